"""Logged bandit feedback: records, columnar batches, file I/O and propensity checks.

Log files are JSON lines. The first line is a header carrying the schema
version, the context feature names and the action constraints; each further
line is one record. Actions are stored as slot bitmasks.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .action_space import (
    NO_PREV_AD,
    ActionConstraints,
    catalog_for_key,
    group_context_keys,
    valid_action_matrix,
)
from .rewards import (
    AdsSignals,
    DiscountParams,
    RewardMixConfig,
    RewardWeights,
    SatSignals,
    sat_design_matrix,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "adlog-v1"
LANGUAGES: Tuple[str, ...] = ("Hindi", "Tamil", "Telugu", "Kannada")

CONTEXT_FEATURES: Tuple[str, ...] = (
    "hourly_interactions",
    "daily_interactions",
    "logins_yesterday",
    "inactivity_last_week",
    "fatigue_score",
    "platform_age_days",
    *(f"language_{lang.lower()}" for lang in LANGUAGES),
    "genre_affinity",
    "distinct_genres",
    "post_age_hours",
    "prev_ad_slots",
    "ad_gap",
    "avg_ad_load_3",
    "avg_ad_load_5",
    "session_ad_impressions",
    "session_ad_clicks",
    "subfeed_index",
    "fetch_rank",
    "session_minutes",
    "posts_seen_in_session",
)
FEATURE_INDEX: Dict[str, int] = {name: i for i, name in enumerate(CONTEXT_FEATURES)}
CONTEXT_DIM = len(CONTEXT_FEATURES)

SAT_BASE_FIELDS = ("engagements", "video_play", "pct_video_watch", "feed_depth", "video_skip")
ADS_FIELDS = ("impressions", "clicks", "installs")


class LogFormatError(ValueError):
    """Malformed record or schema mismatch in a log file."""


class InsufficientDataWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LoggedRecord:
    """One logged sub-feed decision ``(x, a, r_a, p_a)`` with raw reward signals."""

    context: Tuple[float, ...]
    action_id: int
    action_mask: int
    catalog_key: Tuple[int, Optional[int]]
    propensity: float
    sat_signals: SatSignals
    ads_signals: AdsSignals
    retention_label: Optional[int] = None
    revenue_label: Optional[float] = None
    user_id: str = ""
    session_id: str = ""
    timestamp: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.propensity <= 1.0:
            raise ValueError(f"propensity must lie in (0, 1], got {self.propensity}")
        object.__setattr__(self, "context", tuple(float(v) for v in self.context))

    def to_json(self) -> Dict:
        sf, off = self.catalog_key
        return {
            "context": list(self.context),
            "action": self.action_mask,
            "action_id": self.action_id,
            "catalog_key": [sf, off],
            "propensity": self.propensity,
            "sat_signals": asdict(self.sat_signals),
            "ads_signals": asdict(self.ads_signals),
            "retention_label": self.retention_label,
            "revenue_label": self.revenue_label,
            "user_id": self.user_id,
            "session_id": self.session_id,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json(cls, obj: Dict) -> "LoggedRecord":
        sf, off = obj["catalog_key"]
        return cls(
            context=tuple(obj["context"]),
            action_id=int(obj["action_id"]),
            action_mask=int(obj["action"]),
            catalog_key=(int(sf), None if off is None else int(off)),
            propensity=float(obj["propensity"]),
            sat_signals=SatSignals(**obj["sat_signals"]),
            ads_signals=AdsSignals(**obj["ads_signals"]),
            retention_label=obj.get("retention_label"),
            revenue_label=obj.get("revenue_label"),
            user_id=str(obj.get("user_id", "")),
            session_id=str(obj.get("session_id", "")),
            timestamp=int(obj.get("timestamp", 0)),
        )


@dataclass
class LogData:
    """Columnar view of a log, the form every estimator works on.

    ``prev_offset`` uses ``NO_PREV_AD`` (-1) for "no earlier ad".
    ``retention`` and ``revenue`` hold NaN where the label is missing.
    """

    contexts: np.ndarray
    actions: np.ndarray
    subfeed: np.ndarray
    prev_offset: np.ndarray
    propensities: np.ndarray
    sat_base: np.ndarray
    feed_abandoned: np.ndarray
    session_abandoned: np.ndarray
    rank_i: np.ndarray
    rank_d: np.ndarray
    session_minutes: np.ndarray
    ads: np.ndarray
    retention: np.ndarray
    revenue: np.ndarray
    user_ids: np.ndarray
    session_ids: np.ndarray
    timestamps: np.ndarray
    constraints: ActionConstraints = field(default_factory=ActionConstraints)
    load_errors: List[Tuple[int, str]] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        n = len(self.actions)
        self.contexts = np.asarray(self.contexts, dtype=float).reshape(n, -1) if n else np.zeros(
            (0, np.asarray(self.contexts).shape[-1] if np.asarray(self.contexts).ndim == 2 else CONTEXT_DIM)
        )
        for name in ("actions", "subfeed", "prev_offset", "rank_i", "rank_d", "timestamps"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64).reshape(n))
        for name in ("propensities", "session_minutes", "retention", "revenue"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(n))
        self.feed_abandoned = np.asarray(self.feed_abandoned, dtype=np.int64).reshape(n)
        self.session_abandoned = np.asarray(self.session_abandoned, dtype=np.int64).reshape(n)
        self.sat_base = np.asarray(self.sat_base, dtype=float).reshape(n, 5)
        self.ads = np.asarray(self.ads, dtype=float).reshape(n, 3)
        self.user_ids = np.asarray(self.user_ids, dtype=object).reshape(n)
        self.session_ids = np.asarray(self.session_ids, dtype=object).reshape(n)
        if n and (np.any(self.propensities <= 0) or np.any(self.propensities > 1)):
            raise ValueError("propensities must lie in (0, 1]")

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    # -- construction -----------------------------------------------------

    @classmethod
    def empty(cls, constraints: ActionConstraints = ActionConstraints(), context_dim: int = CONTEXT_DIM) -> "LogData":
        z = np.zeros(0)
        return cls(
            contexts=np.zeros((0, context_dim)),
            actions=z, subfeed=z, prev_offset=z, propensities=z,
            sat_base=np.zeros((0, 5)), feed_abandoned=z, session_abandoned=z,
            rank_i=z, rank_d=z, session_minutes=z, ads=np.zeros((0, 3)),
            retention=z, revenue=z, user_ids=z, session_ids=z, timestamps=z,
            constraints=constraints,
        )

    @classmethod
    def from_records(
        cls, records: Sequence[LoggedRecord], constraints: ActionConstraints = ActionConstraints()
    ) -> "LogData":
        if not records:
            return cls.empty(constraints)
        sat = [r.sat_signals for r in records]
        return cls(
            contexts=np.array([r.context for r in records], dtype=float),
            actions=[r.action_mask for r in records],
            subfeed=[r.catalog_key[0] for r in records],
            prev_offset=[NO_PREV_AD if r.catalog_key[1] is None else r.catalog_key[1] for r in records],
            propensities=[r.propensity for r in records],
            sat_base=[[getattr(s, f) for f in SAT_BASE_FIELDS] for s in sat],
            feed_abandoned=[s.feed_abandoned for s in sat],
            session_abandoned=[s.session_abandoned for s in sat],
            rank_i=[s.rank_i for s in sat],
            rank_d=[s.rank_d for s in sat],
            session_minutes=[s.session_minutes for s in sat],
            ads=[r.ads_signals.as_vector() for r in records],
            retention=[np.nan if r.retention_label is None else r.retention_label for r in records],
            revenue=[np.nan if r.revenue_label is None else r.revenue_label for r in records],
            user_ids=[r.user_id for r in records],
            session_ids=[r.session_id for r in records],
            timestamps=[r.timestamp for r in records],
            constraints=constraints,
        )

    def to_records(self) -> List[LoggedRecord]:
        out = []
        ids = self.action_ids()
        for i in range(len(self)):
            off = int(self.prev_offset[i])
            base = self.sat_base[i]
            sat = SatSignals(
                engagements=_num(base[0]),
                video_play=int(base[1]),
                pct_video_watch=float(base[2]),
                feed_depth=_num(base[3]),
                video_skip=int(base[4]),
                feed_abandoned=int(self.feed_abandoned[i]),
                session_abandoned=int(self.session_abandoned[i]),
                rank_i=int(self.rank_i[i]),
                rank_d=int(self.rank_d[i]),
                session_minutes=float(self.session_minutes[i]),
            )
            ads = AdsSignals(*(_num(v) for v in self.ads[i]))
            out.append(
                LoggedRecord(
                    context=tuple(self.contexts[i]),
                    action_id=int(ids[i]),
                    action_mask=int(self.actions[i]),
                    catalog_key=(int(self.subfeed[i]), None if off < 0 else off),
                    propensity=float(self.propensities[i]),
                    sat_signals=sat,
                    ads_signals=ads,
                    retention_label=None if np.isnan(self.retention[i]) else int(self.retention[i]),
                    revenue_label=None if np.isnan(self.revenue[i]) else float(self.revenue[i]),
                    user_id=str(self.user_ids[i]),
                    session_id=str(self.session_ids[i]),
                    timestamp=int(self.timestamps[i]),
                )
            )
        return out

    def subset(self, idx) -> "LogData":
        idx = np.asarray(idx)
        kw = {}
        for name in _ARRAY_FIELDS:
            kw[name] = getattr(self, name)[idx]
        return LogData(**kw, constraints=self.constraints)

    @staticmethod
    def concat(parts: Sequence["LogData"]) -> "LogData":
        parts = [p for p in parts if len(p)]
        if not parts:
            return LogData.empty()
        kw = {name: np.concatenate([getattr(p, name) for p in parts]) for name in _ARRAY_FIELDS}
        return LogData(**kw, constraints=parts[0].constraints)

    def with_propensities(self, propensities: np.ndarray) -> "LogData":
        return replace(self, propensities=np.asarray(propensities, dtype=float).copy())

    # -- derived quantities -------------------------------------------------

    def valid_actions(self) -> np.ndarray:
        """Validity of every bitmask under each record's catalog, shape ``(n, n_masks)``."""
        return valid_action_matrix(self.constraints, self.subfeed, self.prev_offset)

    def catalog_sizes(self) -> np.ndarray:
        return self.valid_actions().sum(axis=1)

    def action_ids(self) -> np.ndarray:
        """Dense catalog ids: rank of the chosen mask among valid masks in catalog order."""
        ids = np.zeros(len(self), dtype=np.int64)
        for i, (sf, off, mask) in enumerate(zip(self.subfeed, self.prev_offset, self.actions)):
            ids[i] = catalog_for_key(self.constraints, int(sf), int(off)).encode(int(mask))
        return ids

    def sat_matrix(self, params: DiscountParams = DiscountParams()) -> np.ndarray:
        return sat_design_matrix(
            self.sat_base,
            self.feed_abandoned,
            self.session_abandoned,
            self.rank_i,
            self.rank_d,
            self.session_minutes,
            params,
        )

    def sat_rewards(self, weights: RewardWeights = RewardWeights(), params: DiscountParams = DiscountParams()) -> np.ndarray:
        return self.sat_matrix(params) @ weights.sat

    def ads_rewards(self, weights: RewardWeights = RewardWeights()) -> np.ndarray:
        return self.ads @ weights.ads

    def rewards(
        self,
        mix: RewardMixConfig,
        weights: RewardWeights = RewardWeights(),
        params: DiscountParams = DiscountParams(),
    ) -> np.ndarray:
        return mix.beta * self.sat_rewards(weights, params) + (1 - mix.beta) * self.ads_rewards(weights)


_ARRAY_FIELDS = (
    "contexts", "actions", "subfeed", "prev_offset", "propensities", "sat_base",
    "feed_abandoned", "session_abandoned", "rank_i", "rank_d", "session_minutes",
    "ads", "retention", "revenue", "user_ids", "session_ids", "timestamps",
)


def _num(v: float):
    """Keep integral counts as ints so records round-trip unchanged."""
    v = float(v)
    return int(v) if v.is_integer() else v


# --------------------------------------------------------------------------
# file I/O


def write_log(path: str | os.PathLike, data: LogData | Sequence[LoggedRecord], constraints: Optional[ActionConstraints] = None) -> None:
    if isinstance(data, LogData):
        constraints = constraints or data.constraints
        records = data.to_records()
    else:
        records = list(data)
        constraints = constraints or ActionConstraints()
    header = {
        "schema_version": SCHEMA_VERSION,
        "context_features": list(CONTEXT_FEATURES),
        "constraints": asdict(constraints),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


def read_log(path: str | os.PathLike, lenient: bool = False) -> LogData:
    """Read a log file.

    Malformed records raise ``LogFormatError`` naming the line; with
    ``lenient=True`` they are skipped and listed in ``LogData.load_errors``.
    """
    records: List[LoggedRecord] = []
    errors: List[Tuple[int, str]] = []
    constraints = ActionConstraints()
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not any(line.strip() for line in lines):
        return LogData.empty(constraints)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise LogFormatError(f"line 1: unreadable header ({exc})") from None
    if not isinstance(header, dict) or header.get("schema_version") != SCHEMA_VERSION:
        found = header.get("schema_version") if isinstance(header, dict) else None
        raise LogFormatError(f"line 1: schema mismatch, expected {SCHEMA_VERSION!r}, found {found!r}")
    constraints = ActionConstraints(**header.get("constraints", {}))
    n_features = len(header.get("context_features", CONTEXT_FEATURES))
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = LoggedRecord.from_json(json.loads(line))
            if len(rec.context) != n_features:
                raise ValueError(f"context has {len(rec.context)} features, expected {n_features}")
            catalog = catalog_for_key(
                constraints, rec.catalog_key[0], NO_PREV_AD if rec.catalog_key[1] is None else rec.catalog_key[1]
            )
            if catalog.encode(rec.action_mask) != rec.action_id:
                raise ValueError("action_id does not match action bitmask")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            msg = f"line {lineno}: malformed record ({exc})"
            if not lenient:
                raise LogFormatError(msg) from None
            logger.warning(msg)
            errors.append((lineno, str(exc)))
            continue
        records.append(rec)
    data = LogData.from_records(records, constraints)
    data.load_errors = errors
    return data


# --------------------------------------------------------------------------
# splitting


def _user_unit_interval(user_id: str, seed: int) -> float:
    digest = hashlib.blake2b(f"{seed}:{user_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0**64


def split_indices_by_user(log: LogData, validation_fraction: float, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Record indices of the train and validation sides of :func:`split_by_user`."""
    if not 0.0 < validation_fraction < 1.0:
        raise ValueError("validation_fraction must lie in (0, 1)")
    users = np.unique(log.user_ids.astype(str))
    in_val = {u: _user_unit_interval(u, seed) < validation_fraction for u in users}
    mask = np.array([in_val[str(u)] for u in log.user_ids], dtype=bool)
    return np.flatnonzero(~mask), np.flatnonzero(mask)


def split_by_user(log: LogData, validation_fraction: float, seed: int = 0) -> Tuple[LogData, LogData]:
    """Deterministic user-level split; all records of a user land on one side."""
    tr, va = split_indices_by_user(log, validation_fraction, seed)
    return log.subset(tr), log.subset(va)


# --------------------------------------------------------------------------
# propensity validation


@dataclass(frozen=True)
class ActionTest:
    catalog_key: Tuple[int, Optional[int]]
    action_id: int
    action_mask: int
    observed_count: int
    expected_count: float
    z_score: float
    passed: bool


@dataclass(frozen=True)
class PropensityReport:
    per_action: Tuple[ActionTest, ...]
    arithmetic_pass: bool
    arithmetic_skipped: bool
    harmonic_statistic: float
    harmonic_pass: bool
    n_records: int
    significance: float
    tolerance: float
    harmonic_by_reference: Dict[int, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.arithmetic_pass and self.harmonic_pass

    def summary(self) -> str:
        lines = [
            f"records: {self.n_records}",
            f"arithmetic mean test: {'skipped' if self.arithmetic_skipped else ('pass' if self.arithmetic_pass else 'FAIL')}"
            f" (Bonferroni over {len(self.per_action)} action tests, significance {self.significance})",
            f"harmonic mean test: statistic {self.harmonic_statistic:.4f}, "
            f"{'pass' if self.harmonic_pass else 'FAIL'} (tolerance {self.tolerance})",
        ]
        for t in self.per_action:
            if not t.passed:
                lines.append(
                    f"  catalog {t.catalog_key} action {t.action_id}: observed {t.observed_count}, "
                    f"expected {t.expected_count:.1f}, z={t.z_score:.2f}"
                )
        return "\n".join(lines)


def claimed_distribution(log: LogData) -> np.ndarray:
    """Claimed logging probabilities for every bitmask, shape ``(n, n_masks)``.

    Only the chosen action's propensity is logged, so the claim is taken to
    be uniform over the catalog at that propensity. This is exact for uniform
    logging; a warning is emitted when the logged values contradict it.
    """
    valid = log.valid_actions()
    sizes = valid.sum(axis=1)
    if len(log) and not np.allclose(log.propensities * sizes, 1.0, rtol=1e-6):
        warnings.warn("logged propensities are not uniform over their catalogs", stacklevel=2)
    return valid * log.propensities[:, None]


def _family_offsets(log: LogData) -> np.ndarray:
    """Offsets with every value that no longer constrains slot 1 collapsed to ``NO_PREV_AD``."""
    off = np.asarray(log.prev_offset, dtype=np.int64)
    binding = (off >= 0) & (off + 1 < log.constraints.min_position_difference)
    return np.where(binding, off, NO_PREV_AD)


def arithmetic_mean_test(log: LogData, significance: float = 0.05, min_records: int = 30) -> Tuple[bool, bool, Tuple[ActionTest, ...]]:
    """Compare per-action counts with the sum of claimed propensities.

    Returns ``(passed, skipped, tests)``. Counts are compared within each
    catalog family with a normal approximation to the Poisson-binomial and a
    Bonferroni correction over all tests.
    """
    if len(log) == 0:
        warnings.warn("no records for the arithmetic mean test", InsufficientDataWarning, stacklevel=2)
        return True, True, ()
    claimed = claimed_distribution(log)
    uniq, inverse = group_context_keys(log.subfeed, _family_offsets(log))
    raw: List[Tuple] = []
    for k, (sf, off) in enumerate(uniq):
        rows = inverse == k
        n_rows = int(rows.sum())
        if n_rows < min_records:
            warnings.warn(
                f"catalog family {(int(sf), int(off))} has {n_rows} < {min_records} records; skipped",
                InsufficientDataWarning,
                stacklevel=2,
            )
            continue
        catalog = catalog_for_key(log.constraints, int(sf), int(off))
        p = claimed[rows]
        chosen = log.actions[rows]
        for action_id, action in enumerate(catalog):
            expected = float(p[:, action.mask].sum())
            var = float((p[:, action.mask] * (1 - p[:, action.mask])).sum())
            observed = int((chosen == action.mask).sum())
            z = (observed - expected) / math.sqrt(var) if var > 0 else 0.0
            raw.append((catalog.context_key, action_id, action.mask, observed, expected, z))
    if not raw:
        return True, True, ()
    threshold = stats.norm.isf(significance / (2 * len(raw)))
    tests = tuple(ActionTest(*r, passed=bool(abs(r[5]) < threshold)) for r in raw)
    return all(t.passed for t in tests), False, tests


def _harmonic_terms(chosen_is_ref: np.ndarray, p_ref: np.ndarray) -> np.ndarray:
    return np.where(chosen_is_ref, 1.0 / p_ref, 1.0 / (1.0 - p_ref))


def harmonic_statistic_closed_form(log: LogData) -> float:
    """Expectation of the harmonic variable under the logged distribution itself.

    Equals 2 for any truthful log; records with propensity 1 are excluded.
    """
    p = log.propensities
    keep = p < 1.0
    if not keep.all():
        warnings.warn(f"{int((~keep).sum())} deterministic records excluded", stacklevel=2)
    p = p[keep]
    if p.size == 0:
        return float("nan")
    return float(np.mean(p * (1.0 / p) + (1.0 - p) * (1.0 / (1.0 - p))))


def harmonic_statistic_sampled(log: LogData, rng: np.random.Generator) -> float:
    """Empirical harmonic variable with a reference action drawn per record from the claim."""
    claimed = claimed_distribution(log)
    keep = log.propensities < 1.0
    claimed, chosen = claimed[keep], log.actions[keep]
    if chosen.size == 0:
        return float("nan")
    cdf = np.cumsum(claimed / claimed.sum(axis=1, keepdims=True), axis=1)
    u = rng.random(chosen.size)[:, None]
    ref = np.minimum((u > cdf).sum(axis=1), claimed.shape[1] - 1)
    p_ref = claimed[np.arange(chosen.size), ref]
    return float(np.mean(_harmonic_terms(chosen == ref, p_ref)))


def _harmonic_by_reference(log: LogData) -> Tuple[Dict[int, float], Dict[int, int]]:
    claimed = claimed_distribution(log)
    stats_: Dict[int, float] = {}
    counts: Dict[int, int] = {}
    for mask in range(claimed.shape[1]):
        p_ref = claimed[:, mask]
        rows = (p_ref > 0) & (p_ref < 1)
        if not rows.any():
            continue
        stats_[mask] = float(np.mean(_harmonic_terms(log.actions[rows] == mask, p_ref[rows])))
        counts[mask] = int(rows.sum())
    return stats_, counts


def harmonic_statistic_by_reference(log: LogData) -> Dict[int, float]:
    """Mean harmonic variable for each fixed reference action (keyed by bitmask).

    For reference ``a``, averages ``1{a_i = a}/p_i(a) + 1{a_i != a}/(1 - p_i(a))``
    over the records whose catalog contains ``a``; the expectation is 2 iff
    ``a`` is sampled at its claimed rate.
    """
    return _harmonic_by_reference(log)[0]


def harmonic_statistic_rms(log: LogData) -> float:
    """Pool the per-reference statistics into one number near 2.

    Returns ``2 +/- sqrt(sum_a w_a (H_a - 2)^2)`` with ``w_a`` proportional
    to the records whose catalog contains ``a``; the sign follows the
    reference with the largest deviation. Any action sampled off its claimed
    rate moves the result away from 2, while on truthful logs the deviation
    shrinks like ``1/sqrt(N)``.
    """
    by_ref, counts = _harmonic_by_reference(log)
    if not by_ref:
        return float("nan")
    masks = list(by_ref)
    dev = np.array([by_ref[m] - 2.0 for m in masks])
    w = np.array([counts[m] for m in masks], dtype=float)
    rms = math.sqrt(float(np.sum(w * dev**2) / w.sum()))
    sign = 1.0 if dev[np.argmax(np.abs(dev))] >= 0 else -1.0
    return 2.0 + sign * rms


# fixed stream for reference draws, distinct from small integer seeds used for logs
_SAMPLED_REFERENCE_SEED = 0x5EED_4A11


def harmonic_mean_test(
    log: LogData,
    tolerance: float = 0.05,
    method: str = "rms",
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, bool]:
    """Harmonic-mean propensity test, returns ``(statistic, passed)``.

    ``method="rms"`` (default) pools the per-reference statistics with
    :func:`harmonic_statistic_rms`; ``"per_action"`` reports the single
    reference farthest from 2. ``"sampled"`` and ``"closed_form"`` are the
    pooled variants with a reference drawn from the claimed distribution;
    both have expectation exactly 2 whenever the logged propensities are
    uniform over the catalog, so they cannot flag a wrong sampler that logs
    uniform propensities.
    """
    if method == "closed_form":
        stat = harmonic_statistic_closed_form(log)
    elif method == "sampled":
        stat = harmonic_statistic_sampled(log, rng if rng is not None else np.random.default_rng(_SAMPLED_REFERENCE_SEED))
    elif method == "rms":
        stat = harmonic_statistic_rms(log)
    elif method == "per_action":
        by_ref = harmonic_statistic_by_reference(log)
        stat = max(by_ref.values(), key=lambda h: abs(h - 2.0)) if by_ref else float("nan")
    else:
        raise ValueError(f"unknown method {method!r}")
    if not math.isfinite(stat):
        return stat, False
    return stat, bool(abs(stat - 2.0) <= tolerance)


def validate_propensities(log: LogData, significance: float = 0.05, tolerance: float = 0.05) -> PropensityReport:
    arith_pass, skipped, tests = arithmetic_mean_test(log, significance)
    by_ref = harmonic_statistic_by_reference(log) if len(log) else {}
    stat, h_pass = harmonic_mean_test(log, tolerance) if len(log) else (float("nan"), False)
    return PropensityReport(
        per_action=tests,
        arithmetic_pass=arith_pass,
        arithmetic_skipped=skipped,
        harmonic_statistic=stat,
        harmonic_pass=h_pass,
        n_records=len(log),
        significance=significance,
        tolerance=tolerance,
        harmonic_by_reference=by_ref,
    )
