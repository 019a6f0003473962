import csv
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adload.cli import main
from adload.harness import (
    ConfigError,
    HarnessConfig,
    baseline_policies,
    config_from_dict,
    dominates,
    load_config,
    non_dominated,
    non_dominated_rows,
    pareto_losses,
    read_pareto_csv,
    run_pareto,
    write_pareto_csv,
)

SMALL_TOML = """
seed = 3

[experiment]
n_records = 6000
eval_records = 4000
betas = [0.5, 0.9]
static_offsets = [2, 4]
n_bootstrap = 20

[training]
model = "linear"
epochs = 5

[reward_model]
kind = "ridge"
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL_TOML)
    return path


# --------------------------------------------------------------------------
# loss calibration


def anchor_values():
    return [("no_ads", 3.0, 0.0), ("max_ads", 1.0, 0.4), ("mid", 2.0, 0.2), ("other", 2.5, 0.05)]


def test_anchor_and_midpoint_losses():
    rows = {r.policy_name: r for r in pareto_losses(anchor_values())}
    assert (rows["no_ads"].sat_loss_pct, rows["no_ads"].ads_loss_pct) == (0.0, 100.0)
    assert (rows["max_ads"].sat_loss_pct, rows["max_ads"].ads_loss_pct) == (100.0, 0.0)
    assert rows["mid"].sat_loss_pct == pytest.approx(50.0)
    assert rows["mid"].ads_loss_pct == pytest.approx(50.0)


def test_degenerate_anchors_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        pareto_losses([("no_ads", 1.0, 0.0), ("max_ads", 1.0, 0.5)])
    with pytest.raises(ValueError, match="anchor"):
        pareto_losses([("no_ads", 1.0, 0.0)])


@settings(max_examples=50)
@given(st.floats(0.01, 100), st.floats(-50, 50), st.floats(0.01, 100), st.floats(-50, 50))
def test_losses_invariant_to_affine_maps(a, b, c, d):
    base = pareto_losses(anchor_values())
    moved = pareto_losses([(n, a * s + b, c * v + d) for n, s, v in anchor_values()])
    for r, m in zip(base, moved):
        assert m.sat_loss_pct == pytest.approx(r.sat_loss_pct, abs=1e-6)
        assert m.ads_loss_pct == pytest.approx(r.ads_loss_pct, abs=1e-6)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(0, 16), st.integers(0, 16)), min_size=1, max_size=8))
def test_front_same_on_raw_values_and_losses(points):
    # dyadic grid values keep the calibration exact, so ties survive it
    grid = [(s / 16, a / 16) for s, a in points]
    values = [("no_ads", 2.0, 0.0), ("max_ads", -2.0, 2.0)] + [(f"p{i}", s, a) for i, (s, a) in enumerate(grid)]
    raw = non_dominated({n: (s, a) for n, s, a in values})
    assert non_dominated_rows(pareto_losses(values)) == raw


def test_dominance():
    assert dominates((1, 1), (1, 0))
    assert not dominates((1, 1), (1, 1))
    assert not dominates((2, 0), (1, 1))


def test_pareto_csv_round_trip(tmp_path):
    rows = pareto_losses([(n, s, a, 0.5 if n == "mid" else None) for n, s, a in anchor_values()])
    write_pareto_csv(tmp_path / "p.csv", rows)
    back = read_pareto_csv(tmp_path / "p.csv")
    assert [r.policy_name for r in back] == [r.policy_name for r in rows]
    assert back[2].beta == 0.5 and back[0].beta is None
    assert back[3].sat_loss_pct == pytest.approx(rows[3].sat_loss_pct, rel=1e-5)


# --------------------------------------------------------------------------
# configuration


def test_defaults_and_small_config(small_config):
    assert load_config(None) == HarnessConfig()
    cfg = load_config(small_config)
    assert cfg.seed == 3 and cfg.experiment.betas == (0.5, 0.9)
    assert cfg.training.model == "linear" and cfg.training.epochs == 5
    assert cfg.reward_model.kind == "ridge"


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        config_from_dict({"training": {"epoch": 3}})
    with pytest.raises(ConfigError, match="unknown sections"):
        config_from_dict({"model": {}})
    with pytest.raises(ConfigError):
        config_from_dict({"experiment": {"log_mode": "stream"}})


def test_unreadable_or_invalid_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[experiment\n")
    with pytest.raises(ConfigError, match="TOML"):
        load_config(bad)


def test_cohorts_and_constraints_from_toml(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(
        "[constraints]\nmax_ads = 1\n\n"
        "[[environment.cohorts]]\nweight = 0.5\nlanguage = \"Tamil\"\nfatigue = 0.2\n\n"
        "[[environment.cohorts]]\nweight = 0.5\nlanguage = \"Hindi\"\nfatigue = 0.8\n"
    )
    cfg = load_config(path)
    assert [p.language for p in cfg.environment.profiles] == ["Tamil", "Hindi"]
    assert cfg.constraints.max_ads == 1
    assert "static(2,5)" in baseline_policies(cfg)


def test_bad_cohort_is_config_error():
    with pytest.raises(ConfigError):
        config_from_dict({"environment": {"cohorts": [{"language": "Tamil"}]}})


@pytest.mark.filterwarnings("ignore:static.*dropping ad")
def test_run_pareto_small(small_config):
    res = run_pareto(load_config(small_config))
    names = {r.policy_name for r in res.rows}
    assert {"no_ads", "max_ads", "uniform", "fatigue", "static(2,5)", "static(4,5)"} <= names
    assert set(res.learned) == {0.5, 0.9}
    assert res.row("no_ads").sat_loss_pct == 0.0 and res.row("max_ads").ads_loss_pct == 0.0
    assert len(res.estimate_rows) == len(res.rows)
    assert all(r.source == "dr_estimate" for r in res.estimate_rows)


# --------------------------------------------------------------------------
# command line


@pytest.mark.filterwarnings("ignore:static.*dropping ad")
def test_cli_pipeline(tmp_path, small_config, capsys):
    out = str(tmp_path / "run")
    common = ["--config", str(small_config), "--out-dir", out]
    assert main(["simulate-log", *common, "--n", "6000"]) == 0
    log = f"{out}/log.jsonl"
    assert main(["validate-propensities", log, *common]) == 0
    assert "harmonic mean test" in (tmp_path / "run" / "propensity_report.txt").read_text()
    assert main(["fit-rewards", log, *common, "--beta", "0.8"]) == 0
    fit = json.loads((tmp_path / "run" / "reward_fit.json").read_text())
    assert len(fit["sat_weights"]) == 7
    assert main(["train-policy", log, *common, "--estimator", "IPW", "--rounds", "2"]) == 0
    assert (tmp_path / "run" / "round1_policy.npz").exists()
    assert main(["evaluate", f"{out}/policy.npz", log, *common, "--clip", "5"]) == 0
    with open(tmp_path / "run" / "estimates.csv") as fh:
        kinds = [r["estimator_kind"] for r in csv.DictReader(fh)]
    assert kinds == ["DM", "IPW", "ClippedIPW", "SNIPS", "DR", "true_exact_enumeration"]
    assert main(["pareto", *common]) == 0
    assert main(["report", "--out-dir", out]) == 0
    assert (tmp_path / "run" / "pareto.svg").read_text().lstrip().startswith("<?xml")
    assert (tmp_path / "run" / "report.csv").exists()


def test_cli_is_deterministic_given_seed(tmp_path, small_config):
    for d in ("a", "b"):
        assert main(["simulate-log", "--config", str(small_config), "--seed", "11", "--n", "500", "--out-dir", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "log.jsonl").read_bytes() == (tmp_path / "b" / "log.jsonl").read_bytes()


def test_cli_validation_failure_exit_code(tmp_path):
    out = str(tmp_path)
    assert main(["simulate-log", "--sampler-fixture", "2.0", "--n", "100000", "--out-dir", out, "--output", "bad.jsonl"]) == 0
    assert main(["validate-propensities", f"{out}/bad.jsonl", "--out-dir", out]) == 2


def test_cli_error_exit_codes(tmp_path, capsys):
    assert main(["simulate-log", "--bogus"]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["simulate-log", "--config", str(tmp_path / "missing.toml"), "--out-dir", str(tmp_path)]) == 1
    bad = tmp_path / "old.jsonl"
    bad.write_text(json.dumps({"schema_version": "adlog-v0"}) + "\n")
    assert main(["validate-propensities", str(bad), "--out-dir", str(tmp_path)]) == 1
    assert main(["report", "--out-dir", str(tmp_path / "empty")]) == 1
    err = capsys.readouterr().err
    assert "usage error" in err and "error:" in err
