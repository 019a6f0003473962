"""Experiment orchestration: configuration, pipelines and Pareto reporting.

The configuration is a single TOML file with optional sections
``[environment]``, ``[constraints]``, ``[rewards]``, ``[training]``,
``[reward_model]``, ``[fatigue_policy]`` and ``[experiment]``; every key maps
onto a field of the corresponding dataclass and unknown keys are rejected.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import sys
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from .action_space import ActionConstraints
from .dataset import LogData, read_log, validate_propensities, write_log
from .estimators import (
    RewardModelConfig,
    ValueEstimate,
    estimate_dm,
    estimate_dr,
    estimate_ipw,
    estimate_snips,
    fit_reward_model,
)
from .policies import (
    FatiguePolicyConfig,
    Policy,
    StaticPolicyConfig,
    TrainingConfig,
    fatigue_policy,
    max_ads_policy,
    no_ads_policy,
    static_policy,
    train_policy,
    uniform_policy,
)
from .rewards import (
    ADS_SIGNAL_NAMES,
    SAT_SIGNAL_NAMES,
    DiscountParams,
    RewardMixConfig,
    RewardWeights,
    ScalarizationConfig,
    fit_scalarization,
    pearson,
    weights_from_fits,
)
from .simulator import (
    EnvironmentConfig,
    RewardTable,
    TruePolicyValue,
    UserProfile,
    enumerate_states,
    generate_decisions,
    generate_log,
    reward_table,
    true_policy_value,
)


class ConfigError(ValueError):
    """Raised for unreadable or invalid configuration files."""


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Log sizes, sweep grids and evaluation settings.

    ``log_mode`` selects i.i.d. decision states (``"decisions"``, where exact
    true values exist) or full sessions (``"sessions"``).
    """

    log_mode: str = "decisions"
    n_records: int = 50_000
    n_users: int = 2_000
    eval_records: int = 50_000
    betas: Tuple[float, ...] = (0.7, 0.8, 0.9)
    static_offsets: Tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    static_post_gap: int = 5
    estimator: str = "DR"
    clip: Optional[float] = None
    significance: float = 0.05
    tolerance: float = 0.05
    n_bootstrap: int = 200

    def __post_init__(self) -> None:
        if self.log_mode not in ("decisions", "sessions"):
            raise ConfigError("experiment.log_mode must be 'decisions' or 'sessions'")
        if any(not 0.0 <= b <= 1.0 for b in self.betas):
            raise ConfigError("experiment.betas must lie in [0, 1]")


@dataclass(frozen=True)
class HarnessConfig:
    environment: EnvironmentConfig = field(default_factory=EnvironmentConfig)
    weights: RewardWeights = field(default_factory=RewardWeights)
    discount: DiscountParams = field(default_factory=DiscountParams)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    reward_model: RewardModelConfig = field(default_factory=lambda: RewardModelConfig(kind="mlp"))
    fatigue: FatiguePolicyConfig = field(default_factory=FatiguePolicyConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    seed: int = 0

    @property
    def constraints(self) -> ActionConstraints:
        return self.environment.constraints

    def with_seed(self, seed: Optional[int]) -> "HarnessConfig":
        return self if seed is None else dataclasses.replace(self, seed=int(seed))


def _coerce(cls, section: Mapping[str, object], name: str, base=None):
    known = {f.name: f for f in fields(cls)}
    unknown = set(section) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    kw = {}
    for key, value in section.items():
        if isinstance(value, list):
            value = tuple(value)
        kw[key] = value
    try:
        return dataclasses.replace(base, **kw) if base is not None else cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{name}]: {exc}") from exc


def config_from_dict(raw: Mapping[str, object]) -> HarnessConfig:
    """Build a :class:`HarnessConfig` from parsed TOML."""
    allowed = {"environment", "constraints", "rewards", "training", "reward_model", "fatigue_policy", "experiment", "seed"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    base = HarnessConfig()
    constraints = _coerce(ActionConstraints, raw.get("constraints", {}), "constraints")
    env_raw = dict(raw.get("environment", {}))
    if "cohorts" in env_raw:
        try:
            env_raw["cohorts"] = tuple(
                (float(c.pop("weight")), UserProfile(**c)) for c in (dict(c) for c in env_raw["cohorts"])
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid environment.cohorts: {exc}") from exc
    env_raw["constraints"] = constraints
    environment = _coerce(EnvironmentConfig, env_raw, "environment")
    rw = dict(raw.get("rewards", {}))
    weights = RewardWeights(
        tuple(rw.pop("sat_weights", base.weights.sat_weights)), tuple(rw.pop("ads_weights", base.weights.ads_weights))
    )
    discount = _coerce(DiscountParams, rw, "rewards")
    return HarnessConfig(
        environment=environment,
        weights=weights,
        discount=discount,
        training=_coerce(TrainingConfig, raw.get("training", {}), "training", base.training),
        reward_model=_coerce(RewardModelConfig, raw.get("reward_model", {}), "reward_model", base.reward_model),
        fatigue=_coerce(FatiguePolicyConfig, raw.get("fatigue_policy", {}), "fatigue_policy"),
        experiment=_coerce(ExperimentConfig, raw.get("experiment", {}), "experiment"),
        seed=int(raw.get("seed", 0)),
    )


def load_config(path: Optional[str | Path]) -> HarnessConfig:
    """Read a TOML configuration file; ``None`` gives the defaults."""
    if path is None:
        return HarnessConfig()
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc
    return config_from_dict(raw)


# --------------------------------------------------------------------------
# Pareto calibration


@dataclass(frozen=True)
class ParetoRow:
    policy_name: str
    beta: Optional[float]
    sat_loss_pct: float
    ads_loss_pct: float
    v_sat: float
    v_ads: float
    source: str = "true_value"


def pareto_losses(
    values: Sequence[Tuple],
    sat_anchor: str = "no_ads",
    ads_anchor: str = "max_ads",
    source: str = "true_value",
) -> List[ParetoRow]:
    """Calibrate ``(name, v_sat, v_ads[, beta])`` tuples to 0-100 losses.

    The SAT loss is 0 at the satisfaction-optimal anchor and 100 at the
    ads-optimal anchor; the ads loss is the mirror image.
    """
    by_name = {v[0]: v for v in values}
    for anchor in (sat_anchor, ads_anchor):
        if anchor not in by_name:
            raise ValueError(f"anchor policy {anchor!r} missing")
    s_top, a_bottom = by_name[sat_anchor][1], by_name[sat_anchor][2]
    s_bottom, a_top = by_name[ads_anchor][1], by_name[ads_anchor][2]
    if s_top == s_bottom or a_top == a_bottom:
        raise ValueError("degenerate anchors: equal objective values")
    rows = []
    for v in values:
        name, v_sat, v_ads = v[0], float(v[1]), float(v[2])
        beta = v[3] if len(v) > 3 else None
        rows.append(
            ParetoRow(
                policy_name=name,
                beta=beta,
                sat_loss_pct=100.0 * (s_top - v_sat) / (s_top - s_bottom),
                ads_loss_pct=100.0 * (a_top - v_ads) / (a_top - a_bottom),
                v_sat=v_sat,
                v_ads=v_ads,
                source=source,
            )
        )
    return rows


def dominates(a: Tuple[float, float], b: Tuple[float, float]) -> bool:
    """True iff ``a`` is at least as good as ``b`` on both objectives and better on one."""
    return a[0] >= b[0] and a[1] >= b[1] and (a[0] > b[0] or a[1] > b[1])


def non_dominated(points: Mapping[str, Tuple[float, float]]) -> List[str]:
    """Names whose (sat, ads) value pair no other entry dominates (larger is better)."""
    return [n for n, p in points.items() if not any(dominates(q, p) for m, q in points.items() if m != n)]


def non_dominated_rows(rows: Sequence[ParetoRow]) -> List[str]:
    """Same as :func:`non_dominated` on calibrated losses (smaller is better)."""
    return non_dominated({r.policy_name: (-r.sat_loss_pct, -r.ads_loss_pct) for r in rows})


# --------------------------------------------------------------------------
# pipelines


def baseline_policies(config: HarnessConfig) -> Dict[str, Policy]:
    c = config.constraints
    out: Dict[str, Policy] = {
        "no_ads": no_ads_policy(c),
        "max_ads": max_ads_policy(config.weights, c),
        "uniform": uniform_policy(c),
        "fatigue": fatigue_policy(config.fatigue, c),
    }
    for off in config.experiment.static_offsets:
        p = static_policy(StaticPolicyConfig(off, config.experiment.static_post_gap), c)
        out[p.name] = p
    return out


def simulate(config: HarnessConfig, policy: Optional[Policy] = None, seed: Optional[int] = None, n: Optional[int] = None) -> LogData:
    """Log from the configured environment under ``policy`` (uniform by default)."""
    policy = policy or uniform_policy(config.constraints)
    seed = config.seed if seed is None else seed
    exp = config.experiment
    if exp.log_mode == "sessions":
        return generate_log(policy, config.environment, exp.n_users if n is None else n, seed, config.discount)
    return generate_decisions(policy, config.environment, exp.n_records if n is None else n, seed, config.discount)


@dataclass
class RewardFitReport:
    weights: RewardWeights
    sat_correlation: Optional[float]
    ads_correlation: Optional[float]
    default_sat_correlation: Optional[float]
    default_ads_correlation: Optional[float]
    reward_model_mse: float
    target_variance: float

    def to_dict(self) -> Dict[str, object]:
        return {
            "sat_weights": dict(zip(SAT_SIGNAL_NAMES, self.weights.sat_weights)),
            "ads_weights": dict(zip(ADS_SIGNAL_NAMES, self.weights.ads_weights)),
            "sat_correlation": self.sat_correlation,
            "ads_correlation": self.ads_correlation,
            "default_sat_correlation": self.default_sat_correlation,
            "default_ads_correlation": self.default_ads_correlation,
            "reward_model_validation_mse": self.reward_model_mse,
            "reward_target_variance": self.target_variance,
        }


def fit_rewards(log: LogData, config: HarnessConfig, beta: Optional[float] = None) -> RewardFitReport:
    """Fit scalarization weights to the retention and revenue labels, then a reward model."""
    sat_x = log.sat_matrix(config.discount)
    ret = ~np.isnan(log.retention)
    rev = ~np.isnan(log.revenue)
    sc = ScalarizationConfig(drop_constant_columns=True)
    sat_fit = fit_scalarization(sat_x[ret], log.retention[ret], sc) if ret.sum() > sat_x.shape[1] else None
    ads_fit = fit_scalarization(log.ads[rev], log.revenue[rev], sc) if rev.sum() > log.ads.shape[1] else None
    weights = weights_from_fits(sat_fit, ads_fit, config.weights)
    mix = RewardMixConfig(0.8 if beta is None else beta)
    model = fit_reward_model(log, config.reward_model, mix, weights, config.discount)
    y = log.rewards(mix, weights, config.discount)
    return RewardFitReport(
        weights=weights,
        sat_correlation=None if sat_fit is None else sat_fit.achieved_correlation,
        ads_correlation=None if ads_fit is None else ads_fit.achieved_correlation,
        default_sat_correlation=pearson(log.retention[ret], sat_x[ret] @ config.weights.sat) if ret.any() else None,
        default_ads_correlation=pearson(log.revenue[rev], log.ads[rev] @ config.weights.ads) if rev.any() else None,
        reward_model_mse=float(model.validation_mse),
        target_variance=float(np.var(y)),
    )


def train(
    log: LogData,
    config: HarnessConfig,
    beta: float,
    objective: str = "DR",
    rounds: int = 1,
    seed: Optional[int] = None,
) -> List[Policy]:
    """Train on ``log``; with ``rounds > 1`` append a fresh uniform slice and retrain each round.

    Returns the policy after every round.
    """
    seed = config.seed if seed is None else seed
    mix = RewardMixConfig(beta)
    tc = dataclasses.replace(config.training, seed=seed)
    policies = []
    data = log
    for k in range(rounds):
        if k > 0:
            fresh = simulate(config, seed=seed + 1000 * k, n=len(log) if config.experiment.log_mode == "decisions" else None)
            data = LogData.concat([data, fresh])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            pol = train_policy(data, objective, mix, config=tc, weights=config.weights, params=config.discount, reward_model_config=config.reward_model)
        pol.name = f"{objective.lower()}-beta{beta:g}"
        policies.append(pol)
    return policies


def evaluate(
    policy: Policy,
    log: LogData,
    config: HarnessConfig,
    beta: float = 0.8,
    clip: Optional[float] = None,
    with_truth: bool = True,
    table: Optional[RewardTable] = None,
) -> Tuple[List[ValueEstimate], Optional[TruePolicyValue]]:
    """All estimators on ``log`` plus, in decision mode, the exact true value."""
    mix = RewardMixConfig(beta)
    r = log.rewards(mix, config.weights, config.discount)
    nb = config.experiment.n_bootstrap
    model = fit_reward_model(log, config.reward_model, mix, config.weights, config.discount)
    ests = [
        estimate_dm(policy, model, log, n_bootstrap=nb, seed=config.seed),
        estimate_ipw(policy, log, rewards=r, n_bootstrap=nb, seed=config.seed),
        estimate_ipw(policy, log, clip=clip if clip is not None else 10.0, rewards=r, n_bootstrap=nb, seed=config.seed),
        estimate_snips(policy, log, rewards=r, n_bootstrap=nb, seed=config.seed),
        estimate_dr(policy, model, log, rewards=r, clip=clip, n_bootstrap=nb, seed=config.seed),
    ]
    truth = None
    if with_truth and config.experiment.log_mode == "decisions":
        truth = true_policy_value(policy, config.environment, config.weights, mix, config.discount, table=table)
    return ests, truth


@dataclass
class ParetoResult:
    rows: List[ParetoRow]
    values: Dict[str, TruePolicyValue]
    learned: Dict[float, str]
    estimate_rows: List[ParetoRow] = field(default_factory=list)

    def row(self, name: str, source: str = "true_value") -> ParetoRow:
        pool = self.rows if source == "true_value" else self.estimate_rows
        return next(r for r in pool if r.policy_name == name)


def run_pareto(config: HarnessConfig, with_estimates: bool = True) -> ParetoResult:
    """Beta sweep of DR-trained policies against the baselines.

    True values come from exact enumeration of the decision-state grid, so
    this experiment requires ``log_mode = "decisions"``. With
    ``with_estimates`` every policy is also scored by DR on an independent
    uniform evaluation log.
    """
    if config.experiment.log_mode != "decisions":
        raise ConfigError("the Pareto experiment needs experiment.log_mode = 'decisions'")
    env = config.environment
    table = reward_table(env, config.discount)
    train_log = simulate(config, seed=config.seed)
    policies = baseline_policies(config)
    learned: Dict[float, str] = {}
    for beta in config.experiment.betas:
        pol = train(train_log, config, beta, "DR")[-1]
        policies[pol.name] = pol
        learned[beta] = pol.name
    values = {
        name: true_policy_value(p, env, config.weights, RewardMixConfig(0.5), config.discount, table=table)
        for name, p in policies.items()
    }
    beta_of = {v: k for k, v in learned.items()}
    rows = pareto_losses([(n, v.v_sat, v.v_ads, beta_of.get(n)) for n, v in values.items()])
    est_rows: List[ParetoRow] = []
    if with_estimates:
        eval_log = simulate(config, seed=config.seed + 1, n=config.experiment.eval_records)
        sat_y = eval_log.sat_rewards(config.weights, config.discount)
        ads_y = eval_log.ads_rewards(config.weights)
        sat_m = fit_reward_model(eval_log, config.reward_model, targets=sat_y)
        ads_m = fit_reward_model(eval_log, config.reward_model, targets=ads_y)
        est = []
        for n, p in policies.items():
            vs = estimate_dr(p, sat_m, eval_log, rewards=sat_y, n_bootstrap=0).value
            va = estimate_dr(p, ads_m, eval_log, rewards=ads_y, n_bootstrap=0).value
            est.append((n, vs, va, beta_of.get(n)))
        est_rows = pareto_losses(est, source="dr_estimate")
    return ParetoResult(rows, values, learned, est_rows)


# --------------------------------------------------------------------------
# outputs

PARETO_COLUMNS = ["policy_name", "beta", "sat_loss_pct", "ads_loss_pct", "v_sat", "v_ads", "source"]


def write_pareto_csv(path: str | Path, rows: Iterable[ParetoRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PARETO_COLUMNS)
        for r in rows:
            w.writerow([r.policy_name, "" if r.beta is None else r.beta, f"{r.sat_loss_pct:.6g}", f"{r.ads_loss_pct:.6g}", f"{r.v_sat:.10g}", f"{r.v_ads:.10g}", r.source])


def read_pareto_csv(path: str | Path) -> List[ParetoRow]:
    with open(path, newline="") as fh:
        return [
            ParetoRow(
                r["policy_name"], float(r["beta"]) if r["beta"] else None, float(r["sat_loss_pct"]),
                float(r["ads_loss_pct"]), float(r["v_sat"]), float(r["v_ads"]), r["source"],
            )
            for r in csv.DictReader(fh)
        ]


def write_estimates_csv(path: str | Path, policy_name: str, estimates: Sequence[ValueEstimate], truth: Optional[TruePolicyValue]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["policy_name", "estimator_kind", "value", "std_error", "n_records", "clip_level"])
        for e in estimates:
            w.writerow([policy_name, e.estimator_kind, f"{e.value:.10g}", f"{e.std_error:.6g}", e.n_records, "" if e.clip_level is None else e.clip_level])
        if truth is not None:
            w.writerow([policy_name, f"true_{truth.method}", f"{truth.v_total:.10g}", f"{truth.mc_std_error:.6g}", "", ""])


def plot_pareto(rows: Sequence[ParetoRow], path: str | Path) -> None:
    """Scatter of calibrated losses with learned policies highlighted, saved as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 5))
    for r in rows:
        learned = r.beta is not None
        ax.scatter(r.ads_loss_pct, r.sat_loss_pct, marker="*" if learned else "o", s=90 if learned else 40,
                   color="tab:red" if learned else "tab:blue")
        ax.annotate(r.policy_name, (r.ads_loss_pct, r.sat_loss_pct), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("ads loss (%)")
    ax.set_ylabel("SAT loss (%)")
    ax.set_title("policy losses relative to single-objective anchors")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def build_report(out_dir: str | Path) -> Path:
    """Merge the CSV outputs found in ``out_dir`` into ``report.csv`` and redraw the plot."""
    out_dir = Path(out_dir)
    merged = []
    for p in sorted(out_dir.glob("*.csv")):
        if p.name in ("report.csv",):
            continue
        with open(p, newline="") as fh:
            for row in csv.DictReader(fh):
                merged.append({"file": p.name, **row})
    if not merged:
        raise FileNotFoundError(f"no CSV outputs in {out_dir}")
    keys: List[str] = []
    for row in merged:
        keys.extend(k for k in row if k not in keys)
    target = out_dir / "report.csv"
    with open(target, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(merged)
    pareto = out_dir / "pareto.csv"
    if pareto.exists():
        rows = [r for r in read_pareto_csv(pareto) if r.source == "true_value"]
        write_pareto_csv(out_dir / "pareto_plot_data.csv", rows)
        plot_pareto(rows, out_dir / "pareto.svg")
    return target
