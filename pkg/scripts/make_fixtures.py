"""Regenerate the bundled fixtures under ``src/sfbs/fixtures``.

Matrices are drawn from fixed seeds; reference solutions come from plain
loops written here (not through the engine) so that the acceptance tests
compare the library against an independent computation.

    python3 scripts/make_fixtures.py [--lasso-iters 1000000]
"""

import argparse
import json
from pathlib import Path

import numpy as np

from sfbs.operators import ProxFunction, conjugate_prox
from sfbs.spaces import LinearMap, SpdMetric, save_matrix_text
from sfbs.stochastic import GaussianQuadraticSampler

HERE = Path(__file__).resolve().parent.parent / "src" / "sfbs" / "fixtures"

LASSO_WEIGHT = 0.1
TV_WEIGHT = 0.3
TV_DIM = 20


def soft(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def plain_lasso(K, z, w, iters):
    """ISTA with gamma = 1/lambda_max(K^T K), lambda = 1."""
    L = float(np.linalg.eigvalsh(K.T @ K)[-1])
    g = 1.0 / L
    x = np.zeros(K.shape[1])
    for _ in range(iters):
        x = soft(x - g * (K.T @ (K @ x - z)), g * w)
    res = float(np.linalg.norm(x - soft(x - g * (K.T @ (K @ x - z)), g * w)))
    return x, res


def plain_affine_lasso(Q, c, w, iters):
    L = float(np.linalg.eigvalsh(Q)[-1])
    g = 1.0 / L
    x = np.zeros(Q.shape[0])
    for _ in range(iters):
        x = soft(x - g * (Q @ x - c), g * w)
    res = float(np.linalg.norm(x - soft(x - g * (Q @ x - c), g * w)))
    return x, res


def plain_tv(b, w, W, U, iters):
    """Deterministic primal-dual loop for 1/2||x-b||^2 + w||Dx||_1, f = 0, j = iota_0."""
    D = LinearMap.difference(b.size).matrix
    g = ProxFunction.l1(w)
    Um = SpdMetric.scalar(U, b.size - 1)
    x = np.zeros(b.size)
    v = np.zeros(b.size - 1)
    for _ in range(iters):
        y = x - W * (D.T @ v + (x - b))
        v = conjugate_prox(g, v + U * (D @ (2 * y - x)), Um)
        x = y
    r = np.linalg.norm(x - (x - W * (D.T @ v + (x - b))))
    return x, v, float(r)


def _well_conditioned(rng, m, n, lo, hi):
    Q1, _ = np.linalg.qr(rng.standard_normal((m, n)))
    Q2, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return Q1 @ np.diag(np.linspace(hi, lo, n)) @ Q2.T


def write_ref(name, payload):
    (HERE / name).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lasso-iters", type=int, default=1_000_000)
    ap.add_argument("--pd-iters", type=int, default=200_000)
    args = ap.parse_args()
    HERE.mkdir(parents=True, exist_ok=True)

    # deterministic lasso: 10 x 5 Gaussian / sqrt(10)
    rng = np.random.default_rng(20150212)
    K = rng.standard_normal((10, 5)) / np.sqrt(10)
    x_true = np.array([1.0, 0.0, -0.5, 0.0, 0.25])
    z = K @ x_true + 0.05 * rng.standard_normal(10)
    save_matrix_text(HERE / "lasso_K.txt", K)
    save_matrix_text(HERE / "lasso_z.txt", z)
    x, res = plain_lasso(K, z, LASSO_WEIGHT, args.lasso_iters)
    write_ref("lasso_reference.json", {"x": x.tolist(), "iterations": args.lasso_iters,
                                       "final_residual": res})
    print("lasso", x, res)

    # stochastic lasso: K_i = Kbar + k_std G, z_i = zbar + z_std g
    rng = np.random.default_rng(20150214)
    Kb = _well_conditioned(rng, 10, 5, 0.8, 1.0)
    zb = Kb @ x_true + 0.05 * rng.standard_normal(10)
    save_matrix_text(HERE / "slasso_K.txt", Kb)
    save_matrix_text(HERE / "slasso_z.txt", zb)
    EKK, EKz = GaussianQuadraticSampler(Kb, zb, 0.1, 0.1).second_moments()
    x, res = plain_affine_lasso(EKK, EKz, LASSO_WEIGHT, args.lasso_iters)
    write_ref("slasso_reference.json", {"x": x.tolist(), "iterations": args.lasso_iters,
                                        "final_residual": res})
    print("slasso", x, res)

    # TV-1D denoising
    rng = np.random.default_rng(20150216)
    clean = np.repeat([0.0, 1.0, 0.3, -0.5], TV_DIM // 4)
    b = clean + 0.1 * rng.standard_normal(TV_DIM)
    save_matrix_text(HERE / "tv_b.txt", b)
    x, v, res = plain_tv(b, TV_WEIGHT, 0.5, 0.25, args.pd_iters)
    write_ref("tv_reference.json", {"x": x.tolist(), "v": [v.tolist()],
                                    "iterations": args.pd_iters, "final_residual": res})
    print("tv", res)

    # empirical-gradient reproduction: Kbar with lambda_max(E K^T K) = 1
    rng = np.random.default_rng(20150218)
    Kb = rng.standard_normal((6, 4))
    k_std, z_std = 0.3, 0.3
    M, N = Kb.shape
    s = np.sqrt((1.0 - M * k_std**2) / np.linalg.eigvalsh(Kb.T @ Kb)[-1])
    Kb = s * Kb
    zb = rng.standard_normal(6)
    save_matrix_text(HERE / "r52_K.txt", Kb)
    save_matrix_text(HERE / "r52_z.txt", zb)
    print("r52 lambda_max", np.linalg.eigvalsh(Kb.T @ Kb + M * k_std**2 * np.eye(N))[-1])


if __name__ == "__main__":
    main()
