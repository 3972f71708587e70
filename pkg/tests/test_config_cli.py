import json
import shutil

import jsonschema
import numpy as np
import pytest
import tomli

from sfbs.cli import main
from sfbs.config import SCHEMA, build_experiment, load_config
from sfbs.errors import ConfigurationError
from sfbs.reproduce import reproduce_empirical
from sfbs.runner import certify, run_experiment

from conftest import FIXTURES, fixture_path

ALL = ["lasso_deterministic", "lasso_stochastic", "varying_moreau", "pd_tv1d", "pd_stochastic",
       "reproduce52"]


@pytest.fixture
def fixdir(tmp_path, out_root):
    d = tmp_path / "fixtures"
    shutil.copytree(FIXTURES, d)
    return d


def variant(fixdir, name, new_name, *edits):
    text = (fixdir / f"{name}.toml").read_text()
    for old, new in edits:
        assert old in text, old
        text = text.replace(old, new)
    p = fixdir / f"{new_name}.toml"
    p.write_text(text)
    return p


# -- schema ------------------------------------------------------------------

@pytest.mark.parametrize("name", ALL)
def test_bundled_configs_validate_and_build(name):
    cfg, raw = load_config(fixture_path(name))
    jsonschema.validate(cfg, SCHEMA)
    exp = build_experiment(fixture_path(name))
    assert exp.name == name and len(exp.digest) == 64


def test_unknown_key_rejected_with_field(fixdir, capsys):
    p = variant(fixdir, "lasso_deterministic", "bad", ("max_iters = 5000", "max_iter = 5000"))
    with pytest.raises(ConfigurationError, match=r"field run: unknown key"):
        load_config(p)
    assert main(["run", str(p)]) == 4
    assert "unknown key" in capsys.readouterr().err


def test_inline_matrix_limit(fixdir):
    big = "[" + ", ".join(["1.0"] * 17) + "]"
    p = variant(fixdir, "pd_tv1d", "inline", ('z = "tv_b.txt"', f"z = {big}"))
    with pytest.raises(ConfigurationError):
        load_config(p)


def test_missing_matrix_file(fixdir):
    p = variant(fixdir, "lasso_deterministic", "nofile", ('"lasso_K.txt"', '"nope.txt"'))
    with pytest.raises(ConfigurationError):
        build_experiment(p)


def test_export_schema(capsys):
    assert main(["export-schema"]) == 0
    assert json.loads(capsys.readouterr().out) == json.loads(json.dumps(SCHEMA))


# -- run / certify -----------------------------------------------------------

def test_lasso_deterministic_exit_zero(out_root, capsys):
    assert main(["run", str(fixture_path("lasso_deterministic"))]) == 0
    s = json.loads((out_root / "lasso_deterministic" / "summary.json").read_text())
    assert s["exit_status"] == 0 and s["runs"][0]["final_residual"] <= 1e-8
    assert s["runs"][0]["fejer"]["passed"]
    tr = (out_root / "lasso_deterministic" / "trace_seed0.csv").read_text().splitlines()
    assert tr[0] == "# sfbs-trace v1" and tr[1].startswith("n,lambda,gamma,residual")
    side = json.loads((out_root / "lasso_deterministic" / "trace_seed0.json").read_text())
    assert side["seed"] == 0 and side["config_digest"] == s["config_digest"]


def test_gamma_twice_theta_names_clause_e(fixdir, capsys):
    p = variant(fixdir, "lasso_deterministic", "gamma2",
                ("theta_multiple = 1.0", "theta_multiple = 2.0"))
    assert main(["run", str(p)]) == 2
    err = capsys.readouterr().err
    assert "admissibility clause (e)" in err
    assert main(["certify", str(p)]) == 2
    assert main(["certify", str(fixture_path("lasso_deterministic"))]) == 0


def test_not_converged_and_divergence_statuses(fixdir):
    p = variant(fixdir, "lasso_deterministic", "short", ("max_iters = 5000", "max_iters = 3"))
    assert main(["run", str(p)]) == 1
    p = variant(fixdir, "lasso_deterministic", "diverge",
                ("theta_multiple = 1.0", "theta_multiple = 3.0"),
                ('[run]\n', '[run]\nforce = true\n'),
                ("max_iters = 5000", "max_iters = 100000"))
    assert main(["run", str(p)]) == 3


def test_artifacts_byte_identical_except_timestamp(fixdir, out_root):
    p = variant(fixdir, "pd_stochastic", "det_check", ("max_iters = 5000", "max_iters = 200"))
    exp = build_experiment(p)
    run_experiment(exp)
    first = {q.name: q.read_bytes() for q in sorted(exp.output_dir.iterdir())}
    run_experiment(exp)
    second = {q.name: q.read_bytes() for q in sorted(exp.output_dir.iterdir())}
    assert first.keys() == second.keys()
    for k in first:
        if k == "summary.json":
            a, b = json.loads(first[k]), json.loads(second[k])
            a["metadata"].pop("timestamp")
            b["metadata"].pop("timestamp")
            assert a == b
        else:
            assert first[k] == second[k], k


def test_worker_pool_matches_serial(fixdir, out_root):
    p = variant(fixdir, "pd_stochastic", "pool", ("max_iters = 5000", "max_iters = 100"))
    exp = build_experiment(p)
    run_experiment(exp, workers=1)
    serial = (exp.output_dir / "trace_seed3.csv").read_bytes()
    run_experiment(exp, workers=2)
    assert (exp.output_dir / "trace_seed3.csv").read_bytes() == serial


def test_pd_certificate_covers_error_clauses():
    cert = certify(build_experiment(fixture_path("pd_stochastic")))
    assert cert.passed
    names = " ".join(c.name for c in cert.clauses)
    assert "[u]" in names and "[s_1]" in names and "[b]" in names and "[c_1]" in names


def test_deterministic_variant_is_exact():
    exp = build_experiment(fixture_path("lasso_stochastic"))
    assert exp.stochastic and not exp.deterministic().stochastic


# -- reproduction ------------------------------------------------------------

def test_reproduce_rejects_bad_kappa(fixdir, capsys):
    p = variant(fixdir, "reproduce52", "kappa", ("kappa = 0.9", "kappa = 0.5"))
    assert main(["reproduce-52", str(p)]) == 4
    assert "]1-delta, 1]" in capsys.readouterr().err


def test_reproduce_requires_empirical_oracle(capsys):
    assert main(["reproduce-52", str(fixture_path("pd_tv1d"))]) == 4


def test_reproduce_degenerate_bias_identically_zero(fixdir):
    p = variant(fixdir, "reproduce52", "degenerate", ("k_std = 0.3, z_std = 0.3",
                                                      "k_std = 0.0, z_std = 0.0"))
    res = reproduce_empirical(build_experiment(p), N=30, trials=5)
    assert all(b == 0.0 for b in res.series["bias_norm"])
    assert all(v <= 1e-24 for v in res.series["variance"])


def test_reproduce_writes_series(fixdir, out_root, capsys):
    p = variant(fixdir, "reproduce52", "short52", ("max_iters = 400\ntrials", "max_iters = 40\ntrials"),
                ("trials = 200", "trials = 20"))
    code = main(["reproduce-52", str(p)])
    assert code in (0, 1)
    csv = (out_root / "reproduce52" / "reproduce52_series.csv").read_text().splitlines()
    assert csv[0] == "# sfbs-reproduce v1" and len(csv) == 2 + 41
    js = json.loads((out_root / "reproduce52" / "reproduce52_summary.json").read_text())
    assert set(js["verdicts"]) == {"lam_bias_sq_slope", "variance_slope", "bias_sum_tail"}
    assert js["passed"] == (code == 0)
