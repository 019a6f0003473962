"""Ad-load policies: baselines, softmax policies and counterfactual training.

A policy maps a batch of decision contexts, given as ``(contexts, subfeed,
prev_offset)`` arrays, to an ``(n, n_masks)`` probability matrix over action
bitmasks with zero mass outside each row's catalog.
"""
from __future__ import annotations

import json
import math
import warnings
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .action_space import (
    ActionConstraints,
    ConfigurationError,
    FeedAction,
    catalog_for_key,
    group_context_keys,
    mask_to_slots,
    validate_action,
    valid_action_matrix,
)
from .dataset import FEATURE_INDEX, LogData, split_indices_by_user
from .estimators import RewardModel, RewardModelConfig, RidgeRewardModel, fit_reward_model
from .rewards import DiscountParams, RewardMixConfig, RewardWeights

POLICY_FORMAT = "adload-policy-v1"


class TrainingError(RuntimeError):
    """Raised when policy training hits a non-finite gradient."""


class ConstraintMismatchError(ValueError):
    """Raised when a stored policy was built for a different action space."""


def _catalog_order(constraints: ActionConstraints) -> np.ndarray:
    """All masks in catalog id order: by ad count, then lexicographic slots."""
    masks = [m for m in range(constraints.n_masks)]
    return np.array(sorted(masks, key=lambda m: (bin(m).count("1"), mask_to_slots(m))), dtype=np.int64)


def _as_arrays(contexts, subfeed, prev_offset):
    contexts = np.atleast_2d(np.asarray(contexts, dtype=float))
    n = contexts.shape[0]
    subfeed = np.broadcast_to(np.asarray(subfeed, dtype=np.int64), (n,))
    prev_offset = np.broadcast_to(np.asarray(prev_offset, dtype=np.int64), (n,))
    return contexts, subfeed, prev_offset


class Policy(ABC):
    """Conditional distribution over the valid actions of each context."""

    kind = "abstract"

    def __init__(self, constraints: ActionConstraints = ActionConstraints(), name: Optional[str] = None) -> None:
        self.constraints = constraints
        self.name = name or self.kind

    @abstractmethod
    def action_probabilities(self, contexts, subfeed, prev_offset) -> np.ndarray:
        """Probability of every bitmask, shape ``(n, n_masks)``."""

    def probability(self, action: FeedAction | int, context, subfeed: Optional[int] = None, prev_offset: int = -1) -> float:
        if isinstance(action, FeedAction):
            mask, sf = action.mask, action.subfeed_index if subfeed is None else subfeed
        else:
            mask, sf = int(action), 0 if subfeed is None else subfeed
        return float(self.action_probabilities(np.asarray(context, dtype=float)[None, :], [sf], [prev_offset])[0, mask])

    def sample(self, contexts, subfeed, prev_offset, rng: np.random.Generator) -> np.ndarray:
        probs = self.action_probabilities(contexts, subfeed, prev_offset)
        cdf = np.cumsum(probs, axis=1)
        u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
        return np.minimum((u >= cdf).sum(axis=1), probs.shape[1] - 1)

    def probabilities_for(self, log: LogData) -> np.ndarray:
        return self.action_probabilities(log.contexts, log.subfeed, log.prev_offset)

    def to_arrays(self) -> Tuple[Dict[str, object], Dict[str, np.ndarray]]:
        """Metadata and parameter arrays for :func:`save_policy`."""
        raise NotImplementedError(f"{type(self).__name__} cannot be serialized")


class DeterministicPolicy(Policy):
    """Policy placing all mass on one action per context."""

    @abstractmethod
    def choose(self, contexts: np.ndarray, subfeed: np.ndarray, prev_offset: np.ndarray) -> np.ndarray:
        """Chosen bitmask per row."""

    def action_probabilities(self, contexts, subfeed, prev_offset) -> np.ndarray:
        contexts, subfeed, prev_offset = _as_arrays(contexts, subfeed, prev_offset)
        chosen = self.choose(contexts, subfeed, prev_offset)
        out = np.zeros((contexts.shape[0], self.constraints.n_masks))
        out[np.arange(contexts.shape[0]), chosen] = 1.0
        return out


class _KeyedDeterministicPolicy(DeterministicPolicy):
    """Deterministic choice that depends only on the catalog key."""

    def _choose_key(self, subfeed: int, prev_offset: int) -> int:
        raise NotImplementedError

    def choose(self, contexts, subfeed, prev_offset):
        keys, inverse = group_context_keys(subfeed, prev_offset)
        picks = np.array([self._choose_key(int(sf), int(off)) for sf, off in keys], dtype=np.int64)
        return picks[inverse]


class NoAdsPolicy(_KeyedDeterministicPolicy):
    kind = "no_ads"

    def _choose_key(self, subfeed, prev_offset):
        return 0

    def to_arrays(self):
        return {}, {}


class MaxAdsPolicy(_KeyedDeterministicPolicy):
    """Most ads, then earliest slots, within each catalog."""

    kind = "max_ads"

    def _choose_key(self, subfeed, prev_offset):
        cat = catalog_for_key(self.constraints, subfeed, prev_offset)
        most = max(a.n_ads for a in cat)
        return min((a for a in cat if a.n_ads == most), key=lambda a: a.slots).mask

    def to_arrays(self):
        return {}, {}


@dataclass(frozen=True)
class StaticPolicyConfig:
    offset: int = 3
    post_gap: int = 5

    def __post_init__(self) -> None:
        if self.offset < 1 or self.post_gap < 1:
            raise ConfigurationError("offset and post_gap must be >= 1")


class StaticPolicy(_KeyedDeterministicPolicy):
    """Ads at fixed fetch positions ``offset + k * (post_gap + 1)``.

    Positions are laid over the two sub-feeds of a fetch; an ad that would
    break the catalog rules for the context is dropped (with one warning per
    policy instance).
    """

    kind = "static"

    def __init__(self, config: StaticPolicyConfig = StaticPolicyConfig(), constraints: ActionConstraints = ActionConstraints(), name: Optional[str] = None) -> None:
        super().__init__(constraints, name or f"static({config.offset},{config.post_gap})")
        self.config = config
        self._warned = False

    def fetch_positions(self, n_subfeeds: int = 2) -> Tuple[int, ...]:
        length = n_subfeeds * self.constraints.subfeed_length
        return tuple(range(self.config.offset, length + 1, self.config.post_gap + 1))

    def _choose_key(self, subfeed, prev_offset):
        L = self.constraints.subfeed_length
        wanted = [p - subfeed * L for p in self.fetch_positions() if subfeed * L < p <= (subfeed + 1) * L]
        kept: List[int] = []
        off = None if prev_offset < 0 else prev_offset
        for s in wanted:
            if validate_action(FeedAction(tuple(kept + [s]), subfeed), self.constraints, off):
                kept.append(s)
            elif not self._warned:
                warnings.warn(f"{self.name}: dropping ad at slot {s} of sub-feed {subfeed} (violates catalog rules)", stacklevel=4)
                self._warned = True
        return FeedAction(tuple(kept), subfeed).mask

    def to_arrays(self):
        return asdict(self.config), {}


@dataclass(frozen=True)
class FatiguePolicyConfig:
    default_ads: int = 1
    low_threshold: float = 0.3
    high_threshold: float = 0.7

    def __post_init__(self) -> None:
        if not 0 < self.low_threshold < self.high_threshold < 1:
            raise ConfigurationError("thresholds must satisfy 0 < low < high < 1")
        if self.default_ads < 0:
            raise ConfigurationError("default_ads must be >= 0")


def _earliest_with_count(constraints: ActionConstraints, subfeed: int, prev_offset: int, count: int) -> int:
    cat = catalog_for_key(constraints, subfeed, prev_offset)
    target = max(a.n_ads for a in cat if a.n_ads <= count)
    return min((a for a in cat if a.n_ads == target), key=lambda a: a.slots).mask


def _earliest_actions(constraints: ActionConstraints, subfeed, prev_offset, counts) -> np.ndarray:
    """Per row: the earliest-slot action with the requested ad count (or the largest available below)."""
    subfeed = np.minimum(np.asarray(subfeed, dtype=np.int64), 1)
    prev_offset = np.asarray(prev_offset, dtype=np.int64)
    counts = np.broadcast_to(np.minimum(np.asarray(counts, dtype=np.int64), constraints.max_ads), subfeed.shape)
    stride = constraints.max_ads + 1
    codes = (2 * prev_offset + subfeed) * stride + counts
    uniq, inverse = np.unique(codes, return_inverse=True)
    picks = np.array(
        [_earliest_with_count(constraints, int(c // stride % 2), int(c // stride // 2), int(c % stride)) for c in uniq],
        dtype=np.int64,
    )
    return picks[inverse.reshape(-1)]


class FixedCountPolicy(DeterministicPolicy):
    """Always ``n_ads`` ads at the earliest valid slots (fewer if the catalog has none)."""

    kind = "fixed_count"

    def __init__(self, n_ads: int, constraints: ActionConstraints = ActionConstraints(), name: Optional[str] = None) -> None:
        if n_ads < 0:
            raise ConfigurationError("n_ads must be >= 0")
        super().__init__(constraints, name or f"fixed_count({n_ads})")
        self.n_ads = int(n_ads)

    def choose(self, contexts, subfeed, prev_offset):
        return _earliest_actions(self.constraints, subfeed, prev_offset, self.n_ads)

    def to_arrays(self):
        return {"n_ads": self.n_ads}, {}


class FatiguePolicy(DeterministicPolicy):
    """One ad more for fresh users, one fewer for fatigued users.

    If the catalog has no action with the target count, the largest
    available count below it is used; slots are the earliest valid ones.
    """

    kind = "fatigue"

    def __init__(self, config: FatiguePolicyConfig = FatiguePolicyConfig(), constraints: ActionConstraints = ActionConstraints(), name: Optional[str] = None) -> None:
        super().__init__(constraints, name)
        self.config = config

    def ad_count(self, fatigue: np.ndarray) -> np.ndarray:
        c = self.config
        n = np.where(fatigue < c.low_threshold, c.default_ads + 1, np.where(fatigue > c.high_threshold, c.default_ads - 1, c.default_ads))
        return np.clip(n, 0, self.constraints.max_ads)

    def choose(self, contexts, subfeed, prev_offset):
        idx = FEATURE_INDEX["fatigue_score"]
        if contexts.shape[1] <= idx or np.any(~np.isfinite(contexts[:, idx])):
            raise ConfigurationError("fatigue policy needs the fatigue_score feature")
        return _earliest_actions(self.constraints, subfeed, prev_offset, self.ad_count(contexts[:, idx]))

    def to_arrays(self):
        return asdict(self.config), {}


class UniformPolicy(Policy):
    kind = "uniform"

    def action_probabilities(self, contexts, subfeed, prev_offset):
        contexts, subfeed, prev_offset = _as_arrays(contexts, subfeed, prev_offset)
        valid = valid_action_matrix(self.constraints, subfeed, prev_offset).astype(float)
        return valid / valid.sum(axis=1, keepdims=True)

    def to_arrays(self):
        return {}, {}


class MixturePolicy(Policy):
    """Fixed convex combination of policies, e.g. an exploring baseline."""

    kind = "mixture"

    def __init__(self, components: Sequence[Policy], weights: Sequence[float], name: Optional[str] = None) -> None:
        weights = np.asarray(weights, dtype=float)
        if len(components) == 0 or weights.shape != (len(components),):
            raise ValueError("need one weight per component")
        if np.any(weights < 0) or not np.isclose(weights.sum(), 1.0):
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        digests = {c.constraints.digest() for c in components}
        if len(digests) != 1:
            raise ConstraintMismatchError("mixture components use different constraints")
        super().__init__(components[0].constraints, name or "+".join(c.name for c in components))
        self.components = list(components)
        self.weights = weights

    def action_probabilities(self, contexts, subfeed, prev_offset):
        out = 0.0
        for w, c in zip(self.weights, self.components):
            if w > 0:
                out = out + w * c.action_probabilities(contexts, subfeed, prev_offset)
        return out


def epsilon_greedy(policy: Policy, epsilon: float) -> MixturePolicy:
    """``(1 - epsilon) * policy + epsilon * uniform``."""
    return MixturePolicy([policy, UniformPolicy(policy.constraints)], [1.0 - epsilon, epsilon], name=f"{policy.name}~{epsilon:g}")


def no_ads_policy(constraints: ActionConstraints = ActionConstraints()) -> Policy:
    return NoAdsPolicy(constraints)


def max_ads_policy(weights: RewardWeights = RewardWeights(), constraints: ActionConstraints = ActionConstraints()) -> Policy:
    """Most ads at the earliest valid positions.

    With nonnegative ads weights more impressions never lower the expected
    ads reward, which is what the count-first heuristic relies on.
    """
    if any(w < 0 for w in weights.ads):
        warnings.warn("negative ads weights: the max-ads heuristic may not maximize the ads reward", stacklevel=2)
    return MaxAdsPolicy(constraints)


def static_policy(config: StaticPolicyConfig = StaticPolicyConfig(), constraints: ActionConstraints = ActionConstraints()) -> Policy:
    return StaticPolicy(config, constraints)


def fatigue_policy(config: FatiguePolicyConfig = FatiguePolicyConfig(), constraints: ActionConstraints = ActionConstraints()) -> Policy:
    return FatiguePolicy(config, constraints)


def uniform_policy(constraints: ActionConstraints = ActionConstraints()) -> Policy:
    return UniformPolicy(constraints)


# --------------------------------------------------------------------------
# softmax policies


class LinearLogits:
    """Logits ``x W + b`` with one column per bitmask."""

    kind = "linear"

    def __init__(self, d: int, n_masks: int, rng: Optional[np.random.Generator] = None, init_scale: float = 0.0) -> None:
        rng = rng or np.random.default_rng(0)
        self.params = {
            "W": init_scale * rng.standard_normal((d, n_masks)),
            "b": np.zeros(n_masks),
        }

    def forward(self, x):
        return x @ self.params["W"] + self.params["b"], None

    def backward(self, x, cache, g):
        return {"W": x.T @ g, "b": g.sum(axis=0)}


class MLPLogits:
    """One tanh hidden layer followed by a linear logit layer."""

    kind = "mlp"

    def __init__(self, d: int, n_masks: int, hidden: int = 32, rng: Optional[np.random.Generator] = None) -> None:
        rng = rng or np.random.default_rng(0)
        self.params = {
            "W1": rng.standard_normal((d, hidden)) / math.sqrt(d),
            "b1": np.zeros(hidden),
            "W2": np.zeros((hidden, n_masks)),
            "b2": np.zeros(n_masks),
        }

    def forward(self, x):
        h = np.tanh(x @ self.params["W1"] + self.params["b1"])
        return h @ self.params["W2"] + self.params["b2"], h

    def backward(self, x, h, g):
        gh = (g @ self.params["W2"].T) * (1.0 - h * h)
        return {"W2": h.T @ g, "b2": g.sum(axis=0), "W1": x.T @ gh, "b1": gh.sum(axis=0)}


def _logit_model_from_arrays(kind: str, arrays: Dict[str, np.ndarray]):
    if kind == "linear":
        m = LinearLogits(1, 1)
    elif kind == "mlp":
        m = MLPLogits(1, 1, hidden=1)
    else:
        raise ValueError(f"unknown logit model {kind!r}")
    m.params = {k[len("p_"):]: np.asarray(v) for k, v in arrays.items() if k.startswith("p_")}
    return m


@dataclass
class SoftmaxPolicyParams:
    """Softmax policy parameters on standardized features.

    ``model`` maps standardized context rows to one logit per bitmask.
    """

    model: object
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    temperature: float = 1.0
    propensity_floor: float = 0.01

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.propensity_floor < 1.0:
            raise ValueError("propensity_floor must lie in [0, 1)")
        for v in self.model.params.values():
            if not np.all(np.isfinite(v)):
                raise ValueError("policy weights must be finite")


class SoftmaxPolicy(Policy):
    """``(1 - eps) * softmax(logits / T) + eps * uniform`` over the catalog."""

    kind = "softmax"

    def __init__(self, params: SoftmaxPolicyParams, constraints: ActionConstraints = ActionConstraints(), name: Optional[str] = None) -> None:
        super().__init__(constraints, name)
        self.params = params

    def _forward(self, contexts, subfeed, prev_offset):
        contexts, subfeed, prev_offset = _as_arrays(contexts, subfeed, prev_offset)
        p = self.params
        x = (contexts - p.feature_mean) / p.feature_scale
        logits, cache = p.model.forward(x)
        valid = valid_action_matrix(self.constraints, subfeed, prev_offset)
        z = np.where(valid, logits / p.temperature, -np.inf)
        z = z - z.max(axis=1, keepdims=True)
        e = np.where(valid, np.exp(z), 0.0)
        sigma = e / e.sum(axis=1, keepdims=True)
        uniform = valid / valid.sum(axis=1, keepdims=True)
        probs = (1.0 - p.propensity_floor) * sigma + p.propensity_floor * uniform
        return probs, sigma, x, cache, valid

    def action_probabilities(self, contexts, subfeed, prev_offset):
        return self._forward(contexts, subfeed, prev_offset)[0]

    def greedy(self) -> "GreedyPolicy":
        """Serve-time argmax version of this policy."""

        def score(contexts, subfeed, prev_offset):
            x = (np.atleast_2d(contexts) - self.params.feature_mean) / self.params.feature_scale
            return self.params.model.forward(x)[0]

        return GreedyPolicy(score, self.constraints, name=f"{self.name}-argmax", source=self)

    def to_arrays(self):
        p = self.params
        meta = {"model": p.model.kind, "temperature": p.temperature, "propensity_floor": p.propensity_floor}
        arrays = {"feature_mean": p.feature_mean, "feature_scale": p.feature_scale}
        arrays.update({f"p_{k}": v for k, v in p.model.params.items()})
        return meta, arrays


def softmax_policy(params: SoftmaxPolicyParams, constraints: ActionConstraints = ActionConstraints()) -> SoftmaxPolicy:
    return SoftmaxPolicy(params, constraints)


def zero_softmax_params(d: int, constraints: ActionConstraints = ActionConstraints(), temperature: float = 1.0, propensity_floor: float = 0.01) -> SoftmaxPolicyParams:
    return SoftmaxPolicyParams(LinearLogits(d, constraints.n_masks), np.zeros(d), np.ones(d), temperature, propensity_floor)


class GreedyPolicy(DeterministicPolicy):
    """Argmax of a score matrix over the catalog; ties go to the lowest action id."""

    kind = "greedy"

    def __init__(self, score_fn, constraints: ActionConstraints = ActionConstraints(), name: Optional[str] = None, source=None) -> None:
        super().__init__(constraints, name)
        self.score_fn = score_fn
        self.source = source
        self._order = _catalog_order(constraints)

    def choose(self, contexts, subfeed, prev_offset):
        scores = np.asarray(self.score_fn(contexts, subfeed, prev_offset), dtype=float)
        valid = valid_action_matrix(self.constraints, subfeed, prev_offset)
        ordered = np.where(valid, scores, -np.inf)[:, self._order]
        return self._order[np.argmax(ordered, axis=1)]

    def to_arrays(self):
        if isinstance(self.source, SoftmaxPolicy):
            meta, arrays = self.source.to_arrays()
            return dict(meta, source="softmax"), arrays
        if isinstance(self.source, RidgeRewardModel):
            m = self.source
            arrays = {"mean": m.mean, "scale": m.scale, "shared": m.shared}
            if m.per_action is not None:
                arrays["per_action"] = m.per_action
            return {"source": "ridge", "lam": m.lam}, arrays
        return super().to_arrays()


def dm_policy(reward_model: RewardModel) -> GreedyPolicy:
    """Deterministic argmax of the reward model's predictions."""
    return GreedyPolicy(reward_model.predict, reward_model.constraints, name="dm", source=reward_model)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters for :func:`train_policy`."""

    model: str = "linear"
    hidden: int = 32
    learning_rate: float = 0.05
    epochs: int = 200
    batch_size: int = 2048
    entropy_coef: float = 0.01
    propensity_floor: float = 0.01
    temperature: float = 1.0
    patience: int = 10
    validation_fraction: float = 0.2
    weight_clip: Optional[float] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.model not in ("linear", "mlp"):
            raise ValueError("model must be 'linear' or 'mlp'")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs, batch_size and patience must be >= 1")


@dataclass
class TrainingResult:
    policy: SoftmaxPolicy
    best_epoch: int
    validation_history: List[float]
    reward_model: Optional[RewardModel]


class _Adam:
    def __init__(self, params: Dict[str, np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-8) -> None:
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def ascend(self, params, grads) -> None:
        self.t += 1
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mh = self.m[k] / (1 - self.b1**self.t)
            vh = self.v[k] / (1 - self.b2**self.t)
            params[k] += self.lr * mh / (np.sqrt(vh) + self.eps)


def reject_deterministic_logging(log: LogData) -> None:
    """Refuse logs whose propensities show no exploration."""
    sizes = log.catalog_sizes()
    if len(log) and np.all(log.propensities[sizes > 1] >= 1.0 - 1e-12) and np.any(sizes > 1):
        raise ValueError("log comes from a deterministic logging policy; it has no support for off-policy training")


def _dr_value(probs, pred, r, w_logged, rows, actions):
    return float(np.mean((r - pred[rows, actions]) * w_logged + (probs * pred).sum(axis=1)))


def train_policy(
    train: LogData,
    objective: str = "DR",
    mix: RewardMixConfig = RewardMixConfig(),
    reward_model: Optional[RewardModel] = None,
    config: TrainingConfig = TrainingConfig(),
    validation: Optional[LogData] = None,
    weights: RewardWeights = RewardWeights(),
    params: DiscountParams = DiscountParams(),
    reward_model_config: RewardModelConfig = RewardModelConfig(),
    return_result: bool = False,
):
    """Gradient ascent on the IPW or DR value estimate of a softmax policy.

    Rewards are recomputed from the raw signals under ``mix``. The DR
    objective fits a reward model on the training part when none is given.
    Selection uses the DR estimate on ``validation`` (a user-level split of
    ``train`` when omitted) with early stopping.
    """
    objective = objective.upper()
    if objective not in ("IPW", "DR"):
        raise ValueError("objective must be IPW or DR")
    reject_deterministic_logging(train)
    if validation is None:
        tr, va = split_indices_by_user(train, config.validation_fraction, seed=config.seed)
        train, validation = train.subset(tr), train.subset(va)
    if len(train) == 0 or len(validation) == 0:
        raise ValueError("training and validation logs must be non-empty")
    if reward_model is None:
        # a different split seed, otherwise the inner split finds no validation users
        rm_config = replace(reward_model_config, seed=reward_model_config.seed + config.seed + 1)
        reward_model = fit_reward_model(train, rm_config, mix, weights, params)

    rng = np.random.default_rng(config.seed)
    n_masks = train.constraints.n_masks
    mean = train.contexts.mean(axis=0)
    scale = train.contexts.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    d = train.contexts.shape[1]
    model = LinearLogits(d, n_masks, rng) if config.model == "linear" else MLPLogits(d, n_masks, config.hidden, rng)
    policy = SoftmaxPolicy(
        SoftmaxPolicyParams(model, mean, scale, config.temperature, config.propensity_floor),
        train.constraints,
        name=f"{objective.lower()}-{config.model}",
    )

    r = train.rewards(mix, weights, params)
    pred = reward_model.predict_log(train)
    if objective == "IPW":
        pred_obj = np.zeros_like(pred)
    else:
        pred_obj = pred
    rows = np.arange(len(train))
    resid_w = (r - pred_obj[rows, train.actions]) / train.propensities
    if config.weight_clip is not None:
        resid_w = np.clip(resid_w, -config.weight_clip * np.abs(r - pred_obj[rows, train.actions]), config.weight_clip * np.abs(r - pred_obj[rows, train.actions]))

    val_r = validation.rewards(mix, weights, params)
    val_pred = reward_model.predict_log(validation)
    val_rows = np.arange(len(validation))

    def validation_value() -> float:
        probs = policy.probabilities_for(validation)
        w = probs[val_rows, validation.actions] / validation.propensities
        return _dr_value(probs, val_pred, val_r, w, val_rows, validation.actions)

    opt = _Adam(model.params, config.learning_rate)
    eps, T, eta = config.propensity_floor, config.temperature, config.entropy_coef
    best_value = validation_value()
    history = [best_value]
    best_params = {k: v.copy() for k, v in model.params.items()}
    best_epoch = 0
    stale = 0
    n = len(train)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            b = order[start : start + config.batch_size]
            probs, sigma, x, cache, valid = policy._forward(train.contexts[b], train.subfeed[b], train.prev_offset[b])
            u = pred_obj[b].copy()
            u[np.arange(b.size), train.actions[b]] += resid_w[b]
            if eta > 0:
                logp = np.log(np.where(valid, probs, 1.0))
                u = u - eta * np.where(valid, logp + 1.0, 0.0)
            centered = u - (sigma * u).sum(axis=1, keepdims=True)
            g = np.where(valid, (1.0 - eps) * sigma * centered / T, 0.0) / b.size
            grads = model.backward(x, cache, g)
            if not all(np.all(np.isfinite(v)) for v in grads.values()):
                raise TrainingError(
                    f"non-finite gradient at epoch {epoch}: max |residual weight| {np.max(np.abs(resid_w[b])):.3g}"
                )
            opt.ascend(model.params, grads)
        value = validation_value()
        history.append(value)
        if value > best_value + 1e-12:
            best_value, best_epoch, stale = value, epoch, 0
            best_params = {k: v.copy() for k, v in model.params.items()}
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.params = best_params
    if best_epoch == 0:
        warnings.warn("validation estimate never improved; returning the initial policy", stacklevel=2)
    if return_result:
        return TrainingResult(policy, best_epoch, history, reward_model)
    return policy


# --------------------------------------------------------------------------
# serialization


def save_policy(policy: Policy, path) -> None:
    """Write a policy to ``.npz`` with a JSON header tying it to its constraints."""
    meta, arrays = policy.to_arrays()
    header = {
        "format": POLICY_FORMAT,
        "kind": policy.kind,
        "name": policy.name,
        "constraints": asdict(policy.constraints),
        "constraints_digest": policy.constraints.digest(),
        "meta": meta,
    }
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header)), **arrays)


def load_policy(path, expected_constraints: Optional[ActionConstraints] = None) -> Policy:
    """Load a policy written by :func:`save_policy`.

    Raises :class:`ConstraintMismatchError` when ``expected_constraints``
    hashes differently from the constraints the policy was built for.
    """
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        arrays = {k: z[k] for k in z.files if k != "__header__"}
    if header.get("format") != POLICY_FORMAT:
        raise ValueError(f"unsupported policy format {header.get('format')!r}")
    constraints = ActionConstraints(**header["constraints"])
    if constraints.digest() != header["constraints_digest"]:
        raise ValueError("policy file constraints do not match their digest")
    if expected_constraints is not None and expected_constraints.digest() != header["constraints_digest"]:
        raise ConstraintMismatchError(
            f"policy built for constraints {header['constraints_digest']}, catalog is {expected_constraints.digest()}"
        )
    kind, meta, name = header["kind"], header["meta"], header.get("name")
    if kind == "no_ads":
        return NoAdsPolicy(constraints, name)
    if kind == "max_ads":
        return MaxAdsPolicy(constraints, name)
    if kind == "uniform":
        return UniformPolicy(constraints, name)
    if kind == "static":
        return StaticPolicy(StaticPolicyConfig(**meta), constraints, name)
    if kind == "fatigue":
        return FatiguePolicy(FatiguePolicyConfig(**meta), constraints, name)
    if kind == "fixed_count":
        return FixedCountPolicy(meta["n_ads"], constraints, name)
    if kind in ("softmax", "greedy") and meta.get("source", "softmax") == "softmax":
        params = SoftmaxPolicyParams(
            _logit_model_from_arrays(meta["model"], arrays),
            arrays["feature_mean"],
            arrays["feature_scale"],
            meta["temperature"],
            meta["propensity_floor"],
        )
        pol = SoftmaxPolicy(params, constraints, name)
        return pol.greedy() if kind == "greedy" else pol
    if kind == "greedy" and meta.get("source") == "ridge":
        model = RidgeRewardModel(constraints, arrays["mean"], arrays["scale"], meta["lam"], arrays["shared"], arrays.get("per_action"))
        return GreedyPolicy(model.predict, constraints, name, source=model)
    raise ValueError(f"unknown policy kind {kind!r}")


def expected_ad_count(policy: Policy, contexts, subfeed, prev_offset, state_weights: Optional[np.ndarray] = None) -> float:
    """Average number of ads the policy places, optionally weighted per row."""
    probs = policy.action_probabilities(contexts, subfeed, prev_offset)
    counts = np.array([bin(m).count("1") for m in range(probs.shape[1])], dtype=float)
    per_row = probs @ counts
    if state_weights is None:
        return float(per_row.mean())
    return float(np.asarray(state_weights) @ per_row)
