"""Off-policy value estimators and reward regressors.

All estimators work on a :class:`~adload.dataset.LogData` and a policy that
exposes ``action_probabilities(contexts, subfeed, prev_offset)`` returning an
``(n, n_masks)`` matrix indexed by action bitmask. Values are empirical means
over the records, so estimates are comparable across log sizes.
"""
from __future__ import annotations

import math
import warnings
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from .action_space import ActionConstraints, valid_action_matrix
from .dataset import LogData, split_indices_by_user
from .rewards import DiscountParams, RewardMixConfig, RewardWeights

ESTIMATOR_KINDS = ("DM", "IPW", "ClippedIPW", "SNIPS", "DR")
DEFAULT_BOOTSTRAP = 200


class DataError(ValueError):
    """Raised when logged data cannot support the requested estimate."""


class UndefinedEstimateError(ArithmeticError):
    """Raised when an estimate has no defined value (e.g. all weights zero)."""


# --------------------------------------------------------------------------
# reward models


class RewardModel(ABC):
    """Predictor of the expected final reward for every action bitmask."""

    constraints: ActionConstraints
    validation_mse: Optional[float] = None

    @abstractmethod
    def _raw_predict(self, contexts: np.ndarray, subfeed: np.ndarray, prev_offset: np.ndarray, valid: np.ndarray) -> np.ndarray:
        """Return an ``(n, n_masks)`` matrix; entries outside ``valid`` are ignored."""

    def predict(self, contexts, subfeed, prev_offset) -> np.ndarray:
        """Expected reward for each bitmask, zero on actions outside the catalog."""
        contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
        subfeed = np.asarray(subfeed, dtype=np.int64).reshape(-1)
        prev_offset = np.asarray(prev_offset, dtype=np.int64).reshape(-1)
        valid = valid_action_matrix(self.constraints, subfeed, prev_offset)
        out = self._raw_predict(contexts, subfeed, prev_offset, valid)
        return np.where(valid, out, 0.0)

    def predict_action(self, contexts, actions, subfeed, prev_offset) -> np.ndarray:
        pred = self.predict(contexts, subfeed, prev_offset)
        return pred[np.arange(pred.shape[0]), np.asarray(actions, dtype=np.int64)]

    def predict_log(self, log: LogData) -> np.ndarray:
        return self.predict(log.contexts, log.subfeed, log.prev_offset)


class CallableRewardModel(RewardModel):
    """Wraps ``fn(contexts, subfeed, prev_offset) -> (n, n_masks)``."""

    def __init__(self, fn: Callable, constraints: ActionConstraints = ActionConstraints()) -> None:
        self.fn = fn
        self.constraints = constraints

    def _raw_predict(self, contexts, subfeed, prev_offset, valid):
        return np.asarray(self.fn(contexts, subfeed, prev_offset), dtype=float)


@dataclass(frozen=True)
class RewardModelConfig:
    """Reward regressor settings.

    ``kind`` is ``"ridge"`` or ``"mlp"``. With ``per_action=True`` the ridge
    model adds a per-action linear correction fitted to the residuals of the
    shared model, so the context effect can differ by action.
    """

    kind: str = "ridge"
    ridge_lambda: Optional[float] = None
    ridge_grid: Tuple[float, ...] = (1e-4, 1e-2, 1.0, 10.0, 100.0)
    per_action: bool = True
    hidden_layers: Tuple[int, ...] = (64,)
    max_iter: int = 200
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("ridge", "mlp"):
            raise ValueError(f"unknown reward model kind {self.kind!r}")
        if self.ridge_lambda is not None and self.ridge_lambda <= 0:
            raise ValueError("ridge_lambda must be positive")
        if not 1 <= len(self.hidden_layers) <= 2:
            raise ValueError("hidden_layers must have one or two entries")


def _standardizer(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0) if len(x) else np.zeros(x.shape[1])
    scale = x.std(axis=0) if len(x) else np.ones(x.shape[1])
    return mean, np.where(scale > 1e-12, scale, 1.0)


def _ridge_solve(z: np.ndarray, y: np.ndarray, lam: float, penalize: np.ndarray) -> np.ndarray:
    gram = z.T @ z + lam * np.diag(penalize.astype(float))
    rhs = z.T @ y
    try:
        return np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(gram, rhs, rcond=None)[0]


class RidgeRewardModel(RewardModel):
    """Ridge regression on standardized context plus action one-hot."""

    def __init__(self, constraints: ActionConstraints, mean, scale, lam, shared, per_action=None):
        self.constraints = constraints
        self.mean = mean
        self.scale = scale
        self.lam = lam
        self.shared = shared  # [intercept, context weights (d), action offsets (n_masks)]
        self.per_action = per_action  # (n_masks, d + 1) or None
        self.validation_mse = None

    @staticmethod
    def _design(xs: np.ndarray, actions: np.ndarray, n_masks: int) -> np.ndarray:
        onehot = np.zeros((xs.shape[0], n_masks))
        onehot[np.arange(xs.shape[0]), actions] = 1.0
        return np.hstack([np.ones((xs.shape[0], 1)), xs, onehot])

    @classmethod
    def fit(cls, log: LogData, y: np.ndarray, lam: float, per_action: bool) -> "RidgeRewardModel":
        n_masks = log.constraints.n_masks
        mean, scale = _standardizer(log.contexts)
        xs = (log.contexts - mean) / scale
        d = xs.shape[1]
        z = cls._design(xs, log.actions, n_masks)
        penalize = np.ones(z.shape[1])
        penalize[0] = 0.0
        shared = _ridge_solve(z, y, lam, penalize)
        pa = None
        if per_action:
            resid = y - z @ shared
            pa = np.zeros((n_masks, d + 1))
            zx = np.hstack([np.ones((xs.shape[0], 1)), xs])
            for a in np.unique(log.actions):
                rows = log.actions == a
                pa[a] = _ridge_solve(zx[rows], resid[rows], lam, np.ones(d + 1))
        return cls(log.constraints, mean, scale, lam, shared, pa)

    def _raw_predict(self, contexts, subfeed, prev_offset, valid):
        xs = (contexts - self.mean) / self.scale
        d = xs.shape[1]
        base = self.shared[0] + xs @ self.shared[1 : d + 1]
        out = base[:, None] + self.shared[d + 1 :][None, :]
        if self.per_action is not None:
            out = out + self.per_action[:, 0][None, :] + xs @ self.per_action[:, 1:].T
        return out


class MLPRewardModel(RewardModel):
    """Feed-forward regressor on standardized context plus action one-hot."""

    def __init__(self, constraints: ActionConstraints, mean, scale, net, y_mean, y_scale):
        self.constraints = constraints
        self.mean = mean
        self.scale = scale
        self.net = net
        self.y_mean = y_mean
        self.y_scale = y_scale
        self.validation_mse = None

    @classmethod
    def fit(cls, log: LogData, y: np.ndarray, config: RewardModelConfig) -> "MLPRewardModel":
        from sklearn.neural_network import MLPRegressor

        n_masks = log.constraints.n_masks
        mean, scale = _standardizer(log.contexts)
        xs = (log.contexts - mean) / scale
        z = RidgeRewardModel._design(xs, log.actions, n_masks)[:, 1:]
        y_mean, y_scale = float(np.mean(y)), float(np.std(y)) or 1.0
        net = MLPRegressor(
            hidden_layer_sizes=config.hidden_layers,
            max_iter=config.max_iter,
            early_stopping=True,
            random_state=config.seed,
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            net.fit(z, (y - y_mean) / y_scale)
        return cls(log.constraints, mean, scale, net, y_mean, y_scale)

    def _raw_predict(self, contexts, subfeed, prev_offset, valid):
        n, n_masks = valid.shape
        xs = (contexts - self.mean) / self.scale
        rows, cols = np.nonzero(valid)
        z = np.zeros((rows.size, xs.shape[1] + n_masks))
        z[:, : xs.shape[1]] = xs[rows]
        z[np.arange(rows.size), xs.shape[1] + cols] = 1.0
        out = np.zeros((n, n_masks))
        if rows.size:
            out[rows, cols] = self.net.predict(z) * self.y_scale + self.y_mean
        return out


def _mse(model: RewardModel, log: LogData, y: np.ndarray) -> float:
    if len(log) == 0:
        return float("nan")
    return float(np.mean((model.predict_action(log.contexts, log.actions, log.subfeed, log.prev_offset) - y) ** 2))


def fit_reward_model(
    train: LogData,
    config: RewardModelConfig = RewardModelConfig(),
    mix: RewardMixConfig = RewardMixConfig(),
    weights: RewardWeights = RewardWeights(),
    params: DiscountParams = DiscountParams(),
    validation: Optional[LogData] = None,
    targets: Optional[np.ndarray] = None,
    validation_targets: Optional[np.ndarray] = None,
) -> RewardModel:
    """Fit a reward regressor to the final rewards of ``train``.

    Targets default to ``train.rewards(mix, weights, params)``. When no
    validation log is given one is carved from ``train`` by user. The
    ridge penalty is chosen on the validation split unless fixed in the
    config, then the model is refit on train; ``validation_mse`` is set on
    the returned model.
    """
    if len(train) == 0:
        raise DataError("cannot fit a reward model on an empty log")
    if targets is None:
        targets = train.rewards(mix, weights, params)
    targets = np.asarray(targets, dtype=float)
    if validation is None:
        ids_train, ids_val = _split_indices(train, config)
        fit_log, val_log = train.subset(ids_train), train.subset(ids_val)
        y_fit, y_val = targets[ids_train], targets[ids_val]
    else:
        fit_log, val_log, y_fit = train, validation, targets
        y_val = validation_targets if validation_targets is not None else validation.rewards(mix, weights, params)
    if config.kind == "mlp":
        model: RewardModel = MLPRewardModel.fit(fit_log, y_fit, config)
    else:
        grid = (config.ridge_lambda,) if config.ridge_lambda is not None else config.ridge_grid
        best = None
        for lam in grid:
            cand = RidgeRewardModel.fit(fit_log, y_fit, lam, config.per_action)
            mse = _mse(cand, val_log, y_val) if len(val_log) else 0.0
            if best is None or mse < best[0]:
                best = (mse, cand)
        model = best[1]
    model.validation_mse = _mse(model, val_log, y_val)
    return model


def _split_indices(log: LogData, config: RewardModelConfig) -> Tuple[np.ndarray, np.ndarray]:
    if config.validation_fraction <= 0 or len(log) < 10:
        return np.arange(len(log)), np.zeros(0, dtype=np.int64)
    tr, va = split_indices_by_user(log, config.validation_fraction, seed=config.seed)
    if len(tr) == 0 or len(va) == 0:
        return np.arange(len(log)), np.zeros(0, dtype=np.int64)
    return tr, va


# --------------------------------------------------------------------------
# estimators


@dataclass(frozen=True)
class ValueEstimate:
    value: float
    std_error: float
    estimator_kind: str
    n_records: int
    clip_level: Optional[float] = None

    def __post_init__(self) -> None:
        if self.estimator_kind not in ESTIMATOR_KINDS:
            raise ValueError(f"unknown estimator kind {self.estimator_kind!r}")

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


def _policy_matrix(policy, log: LogData) -> np.ndarray:
    probs = np.asarray(policy.action_probabilities(log.contexts, log.subfeed, log.prev_offset), dtype=float)
    if probs.shape != (len(log), log.constraints.n_masks):
        raise ValueError(f"policy returned shape {probs.shape}, expected {(len(log), log.constraints.n_masks)}")
    return probs


def _check_propensities(log: LogData) -> None:
    if np.any(~np.isfinite(log.propensities)) or np.any(log.propensities <= 0):
        raise DataError("logged propensity must be positive")


def _bootstrap_mean_se(q: np.ndarray, n_bootstrap: int, rng: np.random.Generator) -> float:
    n = q.size
    if n <= 1:
        return 0.0
    if n_bootstrap <= 0:
        return float(np.std(q, ddof=1) / math.sqrt(n))
    means = np.empty(n_bootstrap)
    for b in range(n_bootstrap):
        means[b] = q[rng.integers(0, n, size=n)].mean()
    return float(np.std(means, ddof=1))


def _weights(policy_probs: np.ndarray, log: LogData, clip: Optional[float]) -> np.ndarray:
    pi = policy_probs[np.arange(len(log)), log.actions]
    w = pi / log.propensities
    if clip is not None and math.isfinite(clip):
        w = np.minimum(w, clip)
    return w


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def estimate_dm(policy, reward_model: RewardModel, log: LogData, n_bootstrap: int = DEFAULT_BOOTSTRAP, seed=0) -> ValueEstimate:
    """Mean over records of the policy-weighted reward-model prediction."""
    if len(log) == 0:
        raise UndefinedEstimateError("empty log")
    q = (_policy_matrix(policy, log) * reward_model.predict_log(log)).sum(axis=1)
    return ValueEstimate(float(q.mean()), _bootstrap_mean_se(q, n_bootstrap, _rng(seed)), "DM", len(log))


def estimate_ipw(
    policy,
    log: LogData,
    clip: Optional[float] = None,
    rewards: Optional[np.ndarray] = None,
    mix: RewardMixConfig = RewardMixConfig(),
    n_bootstrap: int = DEFAULT_BOOTSTRAP,
    seed=0,
) -> ValueEstimate:
    """Importance-weighted mean reward, optionally with weights capped at ``clip``.

    ``rewards`` defaults to the log's final rewards under ``mix``.
    """
    if len(log) == 0:
        raise UndefinedEstimateError("empty log")
    _check_propensities(log)
    if clip is not None and clip <= 0:
        raise ValueError("clip must be positive")
    r = log.rewards(mix) if rewards is None else np.asarray(rewards, dtype=float)
    q = r * _weights(_policy_matrix(policy, log), log, clip)
    clipped = clip is not None and math.isfinite(clip)
    return ValueEstimate(
        float(q.mean()),
        _bootstrap_mean_se(q, n_bootstrap, _rng(seed)),
        "ClippedIPW" if clipped else "IPW",
        len(log),
        float(clip) if clipped else None,
    )


def estimate_snips(
    policy,
    log: LogData,
    rewards: Optional[np.ndarray] = None,
    mix: RewardMixConfig = RewardMixConfig(),
    n_bootstrap: int = DEFAULT_BOOTSTRAP,
    seed=0,
) -> ValueEstimate:
    """Self-normalized IPW: ``sum(r w) / sum(w)``."""
    if len(log) == 0:
        raise UndefinedEstimateError("empty log")
    _check_propensities(log)
    r = log.rewards(mix) if rewards is None else np.asarray(rewards, dtype=float)
    w = _weights(_policy_matrix(policy, log), log, None)
    total = w.sum()
    if total <= 0:
        raise UndefinedEstimateError("importance weights sum to zero")
    value = float((r * w).sum() / total)
    n = len(log)
    if n_bootstrap <= 0:
        # delta-method standard error of the ratio
        se = float(np.sqrt(np.sum((w * (r - value)) ** 2)) / total)
    else:
        rng = _rng(seed)
        vals = []
        for _ in range(n_bootstrap):
            idx = rng.integers(0, n, size=n)
            ws = w[idx].sum()
            if ws > 0:
                vals.append((r[idx] * w[idx]).sum() / ws)
        se = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return ValueEstimate(value, se, "SNIPS", n)


def estimate_dr(
    policy,
    reward_model: RewardModel,
    log: LogData,
    rewards: Optional[np.ndarray] = None,
    mix: RewardMixConfig = RewardMixConfig(),
    clip: Optional[float] = None,
    n_bootstrap: int = DEFAULT_BOOTSTRAP,
    seed=0,
) -> ValueEstimate:
    """DM term plus the importance-weighted residual on the logged action."""
    if len(log) == 0:
        raise UndefinedEstimateError("empty log")
    _check_propensities(log)
    r = log.rewards(mix) if rewards is None else np.asarray(rewards, dtype=float)
    probs = _policy_matrix(policy, log)
    pred = reward_model.predict_log(log)
    rows = np.arange(len(log))
    q = (r - pred[rows, log.actions]) * _weights(probs, log, clip) + (probs * pred).sum(axis=1)
    clipped = clip is not None and math.isfinite(clip)
    return ValueEstimate(
        float(q.mean()), _bootstrap_mean_se(q, n_bootstrap, _rng(seed)), "DR", len(log), float(clip) if clipped else None
    )


def estimate(kind: str, policy, log: LogData, reward_model: Optional[RewardModel] = None, **kw) -> ValueEstimate:
    """Dispatch by estimator name (``DM``, ``IPW``, ``ClippedIPW``, ``SNIPS``, ``DR``)."""
    kind_l = kind.lower()
    if kind_l in ("dm", "dr") and reward_model is None:
        raise ValueError(f"{kind} needs a reward model")
    if kind_l == "dm":
        kw.pop("clip", None)
        kw.pop("rewards", None)
        kw.pop("mix", None)
        return estimate_dm(policy, reward_model, log, **kw)
    if kind_l == "ipw":
        kw.pop("clip", None)
        return estimate_ipw(policy, log, **kw)
    if kind_l == "clippedipw":
        kw.setdefault("clip", 10.0)
        return estimate_ipw(policy, log, **kw)
    if kind_l == "snips":
        kw.pop("clip", None)
        return estimate_snips(policy, log, **kw)
    if kind_l == "dr":
        return estimate_dr(policy, reward_model, log, **kw)
    raise ValueError(f"unknown estimator {kind!r}")
