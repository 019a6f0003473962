"""Satisfaction and ads reward signals, abandonment discounting and scalarization.

Signal order follows the learned-weight table: seven (dis-)satisfaction
signals, then three ads signals. Default weights are the published ones and
apply to raw (unstandardized) signals.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

SAT_SIGNAL_NAMES: Tuple[str, ...] = (
    "engagements",
    "video_play",
    "pct_video_watch",
    "feed_depth",
    "video_skip",
    "discounted_feed_abandonment",
    "discounted_session_abandonment",
)
ADS_SIGNAL_NAMES: Tuple[str, ...] = ("impressions", "clicks", "installs")

DEFAULT_SAT_WEIGHTS = (0.5995, 0.6235, 0.3464, 0.3213, -0.1432, -0.3742, -1.2345)
DEFAULT_ADS_WEIGHTS = (0.2234, 0.5135, 0.7823)


class DegenerateInputError(ValueError):
    """Raised when a scalarization fit has no usable variance."""


@dataclass(frozen=True)
class SatSignals:
    engagements: float = 0
    video_play: int = 0
    pct_video_watch: float = 0.0
    feed_depth: float = 0
    video_skip: int = 0
    feed_abandoned: int = 0
    session_abandoned: int = 0
    rank_i: int = 1
    rank_d: int = 1
    session_minutes: float = 0.0

    def __post_init__(self) -> None:
        if self.rank_i < 1 or self.rank_d < self.rank_i:
            raise ValueError(f"need 1 <= rank_i <= rank_d, got {self.rank_i}, {self.rank_d}")
        for name in ("video_play", "video_skip", "feed_abandoned", "session_abandoned"):
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"{name} must be binary")
        if not 0.0 <= self.pct_video_watch <= 1.0:
            raise ValueError("pct_video_watch must lie in [0, 1]")
        if self.session_minutes < 0:
            raise ValueError("session_minutes must be nonnegative")


@dataclass(frozen=True)
class AdsSignals:
    impressions: float = 0
    clicks: float = 0
    installs: float = 0

    def __post_init__(self) -> None:
        if self.clicks > self.impressions or self.installs > self.clicks:
            logger.warning("ads funnel out of order: %s", self)

    def as_vector(self) -> np.ndarray:
        return np.array([self.impressions, self.clicks, self.installs], dtype=float)


@dataclass(frozen=True)
class DiscountParams:
    """Abandonment discounting. Logs are natural logs.

    alpha : attribution strength in (0, 1]; 1 attributes the full cost of an
        abandonment to every earlier fetch of the run.
    session_discount_scale : minutes normalizer for session abandonment.
    """

    alpha: float = 0.5
    session_discount_scale: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.session_discount_scale <= 0:
            raise ValueError("session_discount_scale must be positive")


@dataclass(frozen=True)
class RewardWeights:
    sat_weights: Tuple[float, ...] = DEFAULT_SAT_WEIGHTS
    ads_weights: Tuple[float, ...] = DEFAULT_ADS_WEIGHTS

    def __post_init__(self) -> None:
        sat = tuple(float(w) for w in self.sat_weights)
        ads = tuple(float(w) for w in self.ads_weights)
        if len(sat) != len(SAT_SIGNAL_NAMES) or len(ads) != len(ADS_SIGNAL_NAMES):
            raise ValueError("weight vectors must have 7 SAT and 3 ads entries")
        if not all(math.isfinite(w) for w in sat + ads):
            raise ValueError("weights must be finite")
        object.__setattr__(self, "sat_weights", sat)
        object.__setattr__(self, "ads_weights", ads)

    @property
    def sat(self) -> np.ndarray:
        return np.asarray(self.sat_weights)

    @property
    def ads(self) -> np.ndarray:
        return np.asarray(self.ads_weights)

    def to_dict(self) -> Dict[str, Dict[str, float]]:
        return {
            "sat": dict(zip(SAT_SIGNAL_NAMES, self.sat_weights)),
            "ads": dict(zip(ADS_SIGNAL_NAMES, self.ads_weights)),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Dict[str, float]]) -> "RewardWeights":
        sat = data.get("sat", {})
        ads = data.get("ads", {})
        unknown = (set(sat) - set(SAT_SIGNAL_NAMES)) | (set(ads) - set(ADS_SIGNAL_NAMES))
        if unknown:
            raise ValueError(f"unknown reward signals {sorted(unknown)}")
        defaults = cls()
        return cls(
            tuple(sat.get(n, w) for n, w in zip(SAT_SIGNAL_NAMES, defaults.sat_weights)),
            tuple(ads.get(n, w) for n, w in zip(ADS_SIGNAL_NAMES, defaults.ads_weights)),
        )


@dataclass(frozen=True)
class RewardMixConfig:
    beta: float = 0.8

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")


def discounted_feed_abandonment(rank_i: int, rank_d: int, params: DiscountParams = DiscountParams()) -> float:
    """Depth discount times attribution: ``alpha**(rank_d - rank_i) / ln(1 + rank_d)``."""
    if rank_i < 1 or rank_i > rank_d:
        raise ValueError(f"need 1 <= rank_i <= rank_d, got rank_i={rank_i}, rank_d={rank_d}")
    return params.alpha ** (rank_d - rank_i) / math.log1p(rank_d)


def discounted_session_abandonment(session_minutes: float, params: DiscountParams = DiscountParams()) -> float:
    """``1 / ln(2 + minutes / scale)``: finite at zero and decreasing in time spent."""
    if session_minutes < 0:
        raise ValueError(f"session_minutes must be nonnegative, got {session_minutes}")
    return 1.0 / math.log(2.0 + session_minutes / params.session_discount_scale)


def feed_abandonment_discount_array(rank_i, rank_d, params: DiscountParams = DiscountParams()) -> np.ndarray:
    rank_i = np.asarray(rank_i, dtype=float)
    rank_d = np.asarray(rank_d, dtype=float)
    if np.any(rank_i < 1) or np.any(rank_i > rank_d):
        raise ValueError("need 1 <= rank_i <= rank_d elementwise")
    return params.alpha ** (rank_d - rank_i) / np.log1p(rank_d)


def session_abandonment_discount_array(session_minutes, params: DiscountParams = DiscountParams()) -> np.ndarray:
    minutes = np.asarray(session_minutes, dtype=float)
    if np.any(minutes < 0):
        raise ValueError("session_minutes must be nonnegative")
    return 1.0 / np.log(2.0 + minutes / params.session_discount_scale)


def sat_signal_vector(signals: SatSignals, params: DiscountParams = DiscountParams()) -> np.ndarray:
    lam_feed = signals.feed_abandoned * discounted_feed_abandonment(signals.rank_i, signals.rank_d, params)
    lam_session = signals.session_abandoned * discounted_session_abandonment(signals.session_minutes, params)
    return np.array(
        [
            signals.engagements,
            signals.video_play,
            signals.pct_video_watch,
            signals.feed_depth,
            signals.video_skip,
            lam_feed,
            lam_session,
        ],
        dtype=float,
    )


def sat_design_matrix(
    base: np.ndarray,
    feed_abandoned,
    session_abandoned,
    rank_i,
    rank_d,
    session_minutes,
    params: DiscountParams = DiscountParams(),
) -> np.ndarray:
    """Stack the five direct SAT signals with the two discounted abandonment signals.

    ``base`` has columns engagements, video_play, pct_video_watch, feed_depth,
    video_skip.
    """
    base = np.asarray(base, dtype=float).reshape(-1, 5)
    lam_feed = np.asarray(feed_abandoned, dtype=float) * feed_abandonment_discount_array(rank_i, rank_d, params)
    lam_session = np.asarray(session_abandoned, dtype=float) * session_abandonment_discount_array(
        session_minutes, params
    )
    return np.column_stack([base, lam_feed, lam_session])


def sat_reward(
    signals: SatSignals,
    weights: RewardWeights = RewardWeights(),
    params: DiscountParams = DiscountParams(),
) -> float:
    return float(weights.sat @ sat_signal_vector(signals, params))


def ads_reward(signals: AdsSignals, weights: RewardWeights = RewardWeights()) -> float:
    return float(weights.ads @ signals.as_vector())


def final_reward(sat, ads, mix: RewardMixConfig):
    """``beta * sat + (1 - beta) * ads``; works elementwise on arrays."""
    return mix.beta * sat + (1.0 - mix.beta) * ads


# --------------------------------------------------------------------------
# scalarization


@dataclass(frozen=True)
class ScalarizationConfig:
    learning_rate: float = 0.5
    max_iterations: int = 10_000
    tolerance: float = 1e-8
    drop_constant_columns: bool = False


@dataclass(frozen=True)
class ScalarizationFit:
    """Result of a Pearson-correlation scalarization fit.

    ``weights`` is unit-norm and lives in the standardized column space;
    ``raw_weights`` gives the equivalent weights on unstandardized signals
    (same correlation, arbitrary scale).
    """

    weights: np.ndarray
    achieved_correlation: float
    iterations: int
    converged: bool
    column_mean: np.ndarray = field(repr=False)
    column_scale: np.ndarray = field(repr=False)

    @property
    def raw_weights(self) -> np.ndarray:
        scale = np.where(self.column_scale > 0, self.column_scale, np.inf)
        return self.weights / scale

    def score(self, signal_matrix: np.ndarray) -> np.ndarray:
        return np.asarray(signal_matrix, dtype=float) @ self.raw_weights


def pearson(y: np.ndarray, s: np.ndarray) -> float:
    y = np.asarray(y, dtype=float)
    s = np.asarray(s, dtype=float)
    yc = y - y.mean()
    sc = s - s.mean()
    denom = math.sqrt(float(yc @ yc) * float(sc @ sc))
    if denom == 0.0:
        return 0.0
    return float(yc @ sc) / denom


def _pearson_and_grad(w: np.ndarray, c: np.ndarray, cov: np.ndarray, sd_y: float) -> Tuple[float, np.ndarray]:
    cov_w = cov @ w
    var_s = float(w @ cov_w)
    if var_s <= 0.0:
        return 0.0, c / sd_y
    sd_s = math.sqrt(var_s)
    rho = float(c @ w) / (sd_y * sd_s)
    grad = c / (sd_y * sd_s) - rho * cov_w / var_s
    return rho, grad


def fit_scalarization(
    signal_matrix: np.ndarray,
    target: np.ndarray,
    config: ScalarizationConfig = ScalarizationConfig(),
) -> ScalarizationFit:
    """Find linear weights maximizing Pearson correlation with ``target``.

    Columns are standardized first. Optimization is full-batch projected
    gradient ascent on the unit sphere with a fixed step; the objective is
    scale invariant so the gradient is already tangent to the sphere.
    """
    X = np.asarray(signal_matrix, dtype=float)
    y = np.asarray(target, dtype=float).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("signal_matrix must be (n, d) with n matching target")
    n, d = X.shape
    if n < d + 1:
        raise ValueError(f"need at least d + 1 = {d + 1} rows, got {n}")
    sd_y = float(y.std())
    if not sd_y > 0:
        raise DegenerateInputError("target has zero variance")

    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    constant = scale == 0
    if constant.any():
        if not config.drop_constant_columns:
            raise DegenerateInputError(f"constant columns {np.flatnonzero(constant).tolist()}")
        logger.warning("dropping constant columns %s", np.flatnonzero(constant).tolist())
    keep = ~constant
    if not keep.any():
        raise DegenerateInputError("all columns are constant")

    Z = (X[:, keep] - mean[keep]) / scale[keep]
    yc = y - y.mean()
    c = Z.T @ yc / n
    cov = Z.T @ Z / n

    w = c / np.linalg.norm(c) if np.linalg.norm(c) > 0 else np.full(keep.sum(), 1 / math.sqrt(keep.sum()))
    converged = False
    it = 0
    for it in range(1, config.max_iterations + 1):
        rho, grad = _pearson_and_grad(w, c, cov, sd_y)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite gradient in scalarization fit")
        if np.linalg.norm(grad) < config.tolerance:
            converged = True
            break
        w = w + config.learning_rate * grad
        w /= np.linalg.norm(w)
    rho, _ = _pearson_and_grad(w, c, cov, sd_y)
    if rho < 0:
        w, rho = -w, -rho

    full = np.zeros(d)
    full[keep] = w
    return ScalarizationFit(
        weights=full,
        achieved_correlation=float(rho),
        iterations=it,
        converged=converged,
        column_mean=mean,
        column_scale=np.where(keep, scale, 0.0),
    )


def weights_from_fits(
    sat_fit: Optional[ScalarizationFit],
    ads_fit: Optional[ScalarizationFit],
    base: RewardWeights = RewardWeights(),
    sat_norm: Optional[float] = None,
    ads_norm: Optional[float] = None,
) -> RewardWeights:
    """Turn fitted directions into raw-signal ``RewardWeights``.

    A fit only identifies a direction, so raw weights are rescaled to the L2
    norm of the corresponding ``base`` vector unless a norm is given.
    """

    def rescale(fit: ScalarizationFit, ref: Sequence[float], norm: Optional[float]) -> Tuple[float, ...]:
        raw = fit.raw_weights
        target = float(np.linalg.norm(ref)) if norm is None else norm
        return tuple(raw * (target / np.linalg.norm(raw)))

    sat = base.sat_weights if sat_fit is None else rescale(sat_fit, base.sat_weights, sat_norm)
    ads = base.ads_weights if ads_fit is None else rescale(ads_fit, base.ads_weights, ads_norm)
    return RewardWeights(sat, ads)


def discount_to_dict(params: DiscountParams) -> Dict[str, float]:
    return asdict(params)
