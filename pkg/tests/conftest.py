from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

import sfbs

FIXTURES = Path(sfbs.__file__).resolve().parent / "fixtures"

settings.register_profile("sfbs", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("sfbs")


def fixture_path(name):
    return FIXTURES / f"{name}.toml"


def random_spd(rng, n, cond=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (Q * np.geomspace(1.0, cond, n)) @ Q.T


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv("SFBS_OUTPUT_ROOT", str(tmp_path))
    return tmp_path


def random_pd_instance(rng, noise=True):
    """Random primal-dual model with H of dim <= 4 and 1-3 dual blocks,
    scaled so that the convergence conditions hold. Returns
    ``(model, oracles, x0, v0)`` or ``None`` when the draw is rejected."""
    from sfbs.operators import ProxFunction
    from sfbs.primal_dual import DualBlock, PdModel, PdOracleBundle, SmoothFunction, coupling_norm
    from sfbs.spaces import LinearMap, SpdMetric
    from sfbs.stochastic import AdditiveNoiseOracle, PerturbationSource, Power

    d, q = int(rng.integers(1, 5)), int(rng.integers(1, 4))

    def spd(n, scale):
        A = rng.standard_normal((n, n))
        return SpdMetric(scale * (A @ A.T / n + 0.5 * np.eye(n)))

    W = spd(d, 0.3)
    gs = [ProxFunction.l1(0.5), ProxFunction.box(-1, 1), ProxFunction.squared_l2(1.0, 0.2)]
    blocks = []
    for k in range(q):
        m = int(rng.integers(1, 4))
        blocks.append(DualBlock(gs[k % 3], LinearMap(0.3 * rng.standard_normal((m, d))),
                                spd(m, 0.3), SmoothFunction.scaled_norm(0.2, m)))
    c = coupling_norm(PdModel(ProxFunction.zero(), SmoothFunction.zero(d), blocks, W, mu=1.0))
    if c > 0.8 or max(b.nu for b in blocks) >= 2 * (1 - c):
        return None
    K = rng.standard_normal((3, d))
    K = K * np.sqrt((1 - c) / SmoothFunction.quadratic(K, np.zeros(3)).lipschitz_in_metric(W))
    f = [ProxFunction.l1(0.3), ProxFunction.box(-2, 2)][int(rng.integers(2))]
    model = PdModel(f, SmoothFunction.quadratic(K, rng.standard_normal(3)), blocks, W)
    if noise:
        oracles = PdOracleBundle(
            AdditiveNoiseOracle(model.h.grad, Power(0.1, 1.0), d, 1),
            [AdditiveNoiseOracle(b.jstar.grad, Power(0.1, 1.0), b.dim, 2 + k)
             for k, b in enumerate(blocks)],
            PerturbationSource.zero(),
            [PerturbationSource.decaying(Power(0.1, 1.5), stream=8 + k) for k in range(q)])
    else:
        oracles = PdOracleBundle.exact(model)
    x0 = rng.standard_normal(d)
    v0 = [rng.standard_normal(b.dim) for b in blocks]
    return model, oracles, x0, v0


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(RESULTS):
        ok, detail = RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
