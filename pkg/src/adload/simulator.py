"""Synthetic ground-truth environment for ad-load decisions.

Every sub-feed decision walks five slots. Before each slot (and once more
after the last one) the user may abandon; the hazard is multiplied right
after an ad. Reached slots are viewed with a position-decaying probability;
viewed posts produce engagement and video signals that are damped by the ads
shown earlier in the sub-feed, and viewed ads produce impressions, clicks and
installs. All magnitudes are invented defaults chosen to reproduce
qualitative orderings (fewer ads: more satisfaction and fewer ad signals;
abandonment spikes after ads; tolerant cohorts lose less), not fitted values.

Two log generators share that outcome model:

* :func:`generate_log` simulates whole sessions, with contexts evolving from
  the actions taken and ``rank_d`` back-filled when a run of consecutive
  fetches ends.
* :func:`generate_decisions` draws decision states i.i.d. from a finite grid
  and continues each run with an action-independent hazard, so the expected
  reward of every (state, action) pair, and therefore the value of any
  policy, is computable exactly by :func:`true_policy_value`.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .action_space import (
    NO_PREV_AD,
    ActionConstraints,
    FeedAction,
    catalog_for_key,
    validate_action,
    valid_action_matrix,
)
from .estimators import RewardModel
from .dataset import CONTEXT_DIM, FEATURE_INDEX, LANGUAGES, LogData
from .rewards import (
    AdsSignals,
    DiscountParams,
    RewardMixConfig,
    RewardWeights,
    SatSignals,
    sat_design_matrix,
    session_abandonment_discount_array,
)

N_SLOTS = 5
EPOCH_MS = 1_700_000_000_000


@dataclass(frozen=True)
class UserProfile:
    language: str = "Hindi"
    fatigue: float = 0.5
    base_engagement: float = 1.0
    ad_sensitivity: float = 1.0
    platform_age_days: float = 365.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.fatigue <= 1.0:
            raise ValueError("fatigue must lie in [0, 1]")
        if self.base_engagement <= 0 or self.ad_sensitivity <= 0:
            raise ValueError("base_engagement and ad_sensitivity must be positive")


LANGUAGE_SENSITIVITY = {"Hindi": 1.15, "Tamil": 0.85, "Telugu": 0.9, "Kannada": 1.1}
LANGUAGE_ENGAGEMENT = {"Hindi": 1.0, "Tamil": 1.1, "Telugu": 1.05, "Kannada": 0.95}
FATIGUE_LEVELS = (0.05, 0.25, 0.5, 0.75, 0.95)


def default_cohorts() -> Tuple[Tuple[float, UserProfile], ...]:
    """Language x fatigue grid.

    Ad sensitivity grows steeply (fourth power) with fatigue, so ads are
    cheap for fresh users and costly for fatigued ones.
    """
    lang_weights = {"Hindi": 0.4, "Tamil": 0.2, "Telugu": 0.2, "Kannada": 0.2}
    out = []
    for lang in LANGUAGES:
        for fatigue in FATIGUE_LEVELS:
            out.append(
                (
                    lang_weights[lang] / len(FATIGUE_LEVELS),
                    UserProfile(
                        language=lang,
                        fatigue=fatigue,
                        base_engagement=LANGUAGE_ENGAGEMENT[lang] * (1.0 - 0.1 * fatigue),
                        ad_sensitivity=LANGUAGE_SENSITIVITY[lang] * (0.35 + 6.0 * fatigue**4),
                        platform_age_days=round(900 * (1.0 - fatigue) + 30),
                    ),
                )
            )
    return tuple(out)


@dataclass(frozen=True)
class EnvironmentConfig:
    """Ground-truth simulator parameters.

    ``base_hazard`` has six entries: abandonment before each of the five
    slots and on leaving the sub-feed. ``decision_offset_values`` uses -1
    for "no earlier ad".
    """

    cohorts: Tuple[Tuple[float, UserProfile], ...] = field(default_factory=default_cohorts)
    position_view_decay: Tuple[float, ...] = (0.97, 0.93, 0.89, 0.85, 0.81)
    base_hazard: Tuple[float, ...] = (0.02, 0.02, 0.02, 0.02, 0.02, 0.03)
    hazard_fatigue_gain: float = 1.5
    post_ad_abandon_multiplier: float = 4.0
    view_fatigue_drop: float = 0.6
    engagement_rate: float = 0.03
    video_share: float = 0.8
    play_rate: float = 0.9
    watch_fraction_mean: float = 0.4
    ad_engagement_damping: float = 0.15
    click_rate: float = 0.06
    click_fatigue_drop: float = 0.8
    install_rate: float = 0.2
    session_abandon_share: float = 0.3
    # run continuation used by the decision-state generator
    continuation_hazard: float = 0.25
    continuation_session_share: float = 0.3
    max_run_length: int = 6
    # session generator
    session_length: Tuple[int, int] = (3, 12)
    minutes_per_post: float = 0.2
    # decision-state grid
    decision_subfeed_probs: Tuple[float, ...] = (0.5, 0.5)
    decision_rank_probs: Tuple[float, ...] = (0.3, 0.22, 0.17, 0.13, 0.1, 0.08)
    decision_offset_values: Tuple[int, ...] = (-1, 0, 1, 2, 3, 5)
    decision_offset_probs: Tuple[float, ...] = (0.2, 0.15, 0.15, 0.15, 0.15, 0.2)
    decision_minutes_values: Tuple[float, ...] = (0.0, 5.0, 15.0)
    decision_minutes_probs: Tuple[float, ...] = (0.4, 0.35, 0.25)
    # labels
    retention_intercept: float = -1.0
    retention_slope: float = 0.8
    revenue_per_impression: float = 0.002
    revenue_per_click: float = 0.05
    revenue_per_install: float = 0.4
    revenue_noise: float = 0.01
    constraints: ActionConstraints = field(default_factory=ActionConstraints)
    seed: int = 0

    def __post_init__(self) -> None:
        weights = np.array([w for w, _ in self.cohorts], dtype=float)
        if len(self.cohorts) == 0 or np.any(weights < 0) or not np.isclose(weights.sum(), 1.0):
            raise ValueError("cohort weights must be nonnegative and sum to 1")
        decay = np.asarray(self.position_view_decay)
        if decay.shape != (N_SLOTS,) or np.any(np.diff(decay) >= 0):
            raise ValueError("position_view_decay needs 5 strictly decreasing entries")
        if len(self.base_hazard) != N_SLOTS + 1:
            raise ValueError("base_hazard needs 6 entries")
        for name in (
            "position_view_decay", "base_hazard", "engagement_rate", "video_share", "play_rate",
            "watch_fraction_mean", "click_rate", "install_rate", "session_abandon_share",
            "continuation_hazard", "continuation_session_share",
        ):
            vals = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if np.any(vals < 0) or np.any(vals > 1):
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.post_ad_abandon_multiplier < 1:
            raise ValueError("post_ad_abandon_multiplier must be >= 1")
        if len(self.decision_rank_probs) != self.max_run_length:
            raise ValueError("decision_rank_probs must have max_run_length entries")
        for vals, probs in (
            (self.decision_subfeed_probs, self.decision_subfeed_probs),
            (self.decision_offset_values, self.decision_offset_probs),
            (self.decision_minutes_values, self.decision_minutes_probs),
        ):
            if len(vals) != len(probs) or not np.isclose(sum(probs), 1.0) or min(probs) < 0:
                raise ValueError("decision grid probabilities must match values and sum to 1")
        lo, hi = self.session_length
        if not 1 <= lo <= hi:
            raise ValueError("session_length must satisfy 1 <= min <= max")

    @property
    def profiles(self) -> Tuple[UserProfile, ...]:
        return tuple(p for _, p in self.cohorts)

    @property
    def cohort_weights(self) -> np.ndarray:
        return np.array([w for w, _ in self.cohorts], dtype=float)


# --------------------------------------------------------------------------
# users and contexts


def sample_user(config: EnvironmentConfig, rng: np.random.Generator) -> UserProfile:
    k = rng.choice(len(config.cohorts), p=config.cohort_weights)
    return config.cohorts[k][1]


@dataclass
class SessionState:
    """Decision-time session bookkeeping feeding the context vector."""

    subfeed_index: int = 0
    fetch_rank: int = 1
    fetch_count: int = 1
    run_index: int = 0
    session_minutes: float = 0.0
    prev_last_ad_offset: Optional[int] = None
    prev_ad_slots: int = 0
    fetch_ad_history: List[int] = field(default_factory=list)
    current_fetch_ads: int = 0
    session_impressions: int = 0
    session_clicks: int = 0
    hourly_interactions: float = 0.0
    daily_interactions: float = 0.0
    posts_seen: int = 0
    genre_affinity: float = 0.5
    distinct_genres: float = 3.0
    post_age_hours: float = 12.0


def build_context(user: UserProfile, state: SessionState, config: EnvironmentConfig | None = None) -> np.ndarray:
    """Context vector in the ``CONTEXT_FEATURES`` order; a missing ad gap is -1."""
    x = np.zeros(CONTEXT_DIM)
    f = FEATURE_INDEX
    x[f["hourly_interactions"]] = state.hourly_interactions
    x[f["daily_interactions"]] = state.daily_interactions
    x[f["logins_yesterday"]] = round(5 * (1.0 - user.fatigue))
    x[f["inactivity_last_week"]] = round(7 * user.fatigue, 3)
    x[f["fatigue_score"]] = user.fatigue
    x[f["platform_age_days"]] = user.platform_age_days
    if user.language in LANGUAGES:
        x[f[f"language_{user.language.lower()}"]] = 1.0
    x[f["genre_affinity"]] = state.genre_affinity
    x[f["distinct_genres"]] = state.distinct_genres
    x[f["post_age_hours"]] = state.post_age_hours
    x[f["prev_ad_slots"]] = state.prev_ad_slots
    x[f["ad_gap"]] = NO_PREV_AD if state.prev_last_ad_offset is None else state.prev_last_ad_offset
    hist = state.fetch_ad_history
    x[f["avg_ad_load_3"]] = float(np.mean(hist[-3:])) if hist else 0.0
    x[f["avg_ad_load_5"]] = float(np.mean(hist[-5:])) if hist else 0.0
    x[f["session_ad_impressions"]] = state.session_impressions
    x[f["session_ad_clicks"]] = state.session_clicks
    x[f["subfeed_index"]] = state.subfeed_index
    x[f["fetch_rank"]] = state.fetch_rank
    x[f["session_minutes"]] = state.session_minutes
    x[f["posts_seen_in_session"]] = state.posts_seen
    return x


# --------------------------------------------------------------------------
# outcome model


@dataclass
class _SlotModel:
    hazard: np.ndarray  # (n, 6)
    view: np.ndarray  # (n, 5)
    is_ad: np.ndarray  # (n, 5) bool
    engage: np.ndarray  # (n, 5), zero on ad slots
    play: np.ndarray  # (n, 5) P(video and played | viewed), zero on ad slots
    skip: np.ndarray  # (n, 5) P(video and skipped | viewed)
    ctr: np.ndarray  # (n,)
    session_share: np.ndarray  # (n,)


def _slot_model(config: EnvironmentConfig, fatigue, sensitivity, engagement, masks) -> _SlotModel:
    fatigue = np.asarray(fatigue, dtype=float)[:, None]
    sens = np.asarray(sensitivity, dtype=float)[:, None]
    eng = np.asarray(engagement, dtype=float)[:, None]
    masks = np.asarray(masks, dtype=np.int64)
    is_ad = ((masks[:, None] >> np.arange(N_SLOTS)) & 1).astype(bool)
    after_ad = np.zeros((masks.size, N_SLOTS + 1), dtype=bool)
    after_ad[:, 1:] = is_ad
    base = np.asarray(config.base_hazard)[None, :] * (1.0 + config.hazard_fatigue_gain * fatigue)
    hazard = np.where(after_ad, base * config.post_ad_abandon_multiplier * sens, base)
    hazard = np.minimum(hazard, 0.95)
    view = np.asarray(config.position_view_decay)[None, :] * (1.0 - config.view_fatigue_drop * fatigue)
    view = np.broadcast_to(view, is_ad.shape).copy()
    ads_before = np.cumsum(is_ad, axis=1) - is_ad
    damp = np.exp(-config.ad_engagement_damping * sens * ads_before)
    post = ~is_ad
    engage = np.where(post, np.minimum(1.0, config.engagement_rate * eng * damp), 0.0)
    played = np.minimum(1.0, config.play_rate * damp)
    play = np.where(post, config.video_share * played, 0.0)
    skip = np.where(post, config.video_share * (1.0 - played), 0.0)
    ctr = config.click_rate * (1.0 - config.click_fatigue_drop * fatigue[:, 0])
    share = np.minimum(1.0, config.session_abandon_share * (0.5 + fatigue[:, 0]))
    return _SlotModel(hazard, view, is_ad, engage, play, skip, ctr, share)


def _continuation_table(config: EnvironmentConfig, params: DiscountParams):
    """Expected attribution and end-rank law for a run that survives the current sub-feed.

    Returns arrays indexed by ``[subfeed, rank_i]`` (rank 1-based):
    expected feed-abandonment attribution, and the probability that the run
    ends through feed abandonment.
    """
    R = config.max_run_length
    c = config.continuation_hazard
    q = config.continuation_session_share
    attrib = np.zeros((2, R + 1))
    p_feed = np.zeros((2, R + 1))
    for sf in (0, 1):
        for r in range(1, R + 1):
            total = 0.0
            pf = 0.0
            j = 1
            while True:
                rank_d = r + (sf + j) // 2
                if rank_d > R:
                    break
                p_end = (1.0 - c) ** (j - 1) * c
                total += p_end * (1.0 - q) * params.alpha ** (rank_d - r) / math.log1p(rank_d)
                pf += p_end * (1.0 - q)
                j += 1
            attrib[sf, r] = total
            p_feed[sf, r] = pf
    return attrib, p_feed


def _sample_continuation(config: EnvironmentConfig, subfeed, rank_i, rng):
    """Draw ``(rank_d, ended_by_feed_abandonment)`` for runs that survive the sub-feed."""
    n = np.asarray(rank_i).size
    R = config.max_run_length
    j = rng.geometric(config.continuation_hazard, size=n) if config.continuation_hazard > 0 else np.full(n, 10**6)
    rank_d = rank_i + (subfeed + j) // 2
    cut = rank_d > R
    # cut runs stop at the last reachable fetch without an abandonment
    rank_d = np.where(cut, R, rank_d)
    rank_d = np.maximum(rank_d, rank_i)
    feed_end = (~cut) & (rng.random(n) >= config.continuation_session_share)
    return rank_d, feed_end


def expected_signals(
    config: EnvironmentConfig,
    fatigue,
    sensitivity,
    engagement,
    masks,
    subfeed,
    rank_i,
    session_minutes,
    params: DiscountParams = DiscountParams(),
) -> Tuple[np.ndarray, np.ndarray]:
    """Exact expected SAT design row (7 signals) and ads row (3 signals).

    The "any video played" and "any skip" flags are carried through a
    forward recursion over slots; everything else is linear in the slot
    reach probabilities.
    """
    m = _slot_model(config, fatigue, sensitivity, engagement, masks)
    n = m.view.shape[0]
    surv = 1.0 - m.hazard
    reach = np.cumprod(surv[:, :N_SLOTS], axis=1)  # P(reach slot s)
    seen = reach * m.view
    e_eng = (seen * m.engage).sum(axis=1)
    e_pct = (seen * m.play).sum(axis=1) * config.watch_fraction_mean / N_SLOTS
    e_depth = reach.sum(axis=1)
    e_imp = (seen * m.is_ad).sum(axis=1)

    # alive mass by (played, skipped) flags; dead mass accumulates per flag
    alive = np.zeros((n, 4))
    alive[:, 0] = 1.0
    dead = np.zeros((n, 4))
    for s in range(N_SLOTS):
        h = m.hazard[:, s : s + 1]
        dead += alive * h
        alive = alive * (1.0 - h)
        pp = m.view[:, s] * m.play[:, s]
        pk = m.view[:, s] * m.skip[:, s]
        stay = 1.0 - pp - pk
        a00, a10, a01, a11 = alive.T
        alive = np.column_stack(
            [
                a00 * stay,
                a10 * (stay + pp) + a00 * pp,
                a01 * (stay + pk) + a00 * pk,
                a11 + a10 * pk + a01 * pp,
            ]
        )
    final = alive + dead
    p_play = final[:, 1] + final[:, 3]
    p_skip = final[:, 2] + final[:, 3]

    p_abandon = 1.0 - np.prod(surv, axis=1)
    p_complete = 1.0 - p_abandon
    subfeed = np.minimum(np.asarray(subfeed, dtype=np.int64), 1)
    rank_i = np.asarray(rank_i, dtype=np.int64)
    attrib, _ = _continuation_table(config, params)
    own = p_abandon * (1.0 - m.session_share) / np.log1p(rank_i)
    e_lam_feed = own + p_complete * attrib[subfeed, rank_i]
    e_lam_session = p_abandon * m.session_share * session_abandonment_discount_array(session_minutes, params)

    sat = np.column_stack([e_eng, p_play, e_pct, e_depth, p_skip, e_lam_feed, e_lam_session])
    ads = np.column_stack([e_imp, e_imp * m.ctr, e_imp * m.ctr * config.install_rate])
    return sat, ads


@dataclass
class SubfeedOutcome:
    """Sampled signals for a batch of sub-feed decisions."""

    sat_base: np.ndarray  # engagements, video_play, pct_video_watch, feed_depth, video_skip
    ads: np.ndarray
    abandon_position: np.ndarray  # 0 = completed, 1..5 before slot, 6 on leaving
    session_abandoned: np.ndarray
    feed_abandoned_here: np.ndarray


def _watch_fraction(config: EnvironmentConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    m = config.watch_fraction_mean
    if m <= 0.0 or m >= 1.0:
        return np.full(n, m)
    return rng.beta(5.0 * m, 5.0 * (1.0 - m), size=n)


def sample_subfeeds(config: EnvironmentConfig, fatigue, sensitivity, engagement, masks, rng: np.random.Generator) -> SubfeedOutcome:
    m = _slot_model(config, fatigue, sensitivity, engagement, masks)
    n = m.view.shape[0]
    alive = np.ones(n, dtype=bool)
    abandon_pos = np.zeros(n, dtype=np.int64)
    eng = np.zeros(n)
    pct = np.zeros(n)
    depth = np.zeros(n)
    played_any = np.zeros(n, dtype=bool)
    skipped_any = np.zeros(n, dtype=bool)
    imp = np.zeros(n)
    clicks = np.zeros(n)
    installs = np.zeros(n)
    for s in range(N_SLOTS + 1):
        quits = alive & (rng.random(n) < m.hazard[:, s])
        abandon_pos[quits] = s + 1
        alive &= ~quits
        if s == N_SLOTS:
            break
        depth += alive
        viewed = alive & (rng.random(n) < m.view[:, s])
        ad = m.is_ad[:, s]
        # one uniform decides the post outcome: play / skip / neither
        u = rng.random(n)
        post_view = viewed & ~ad
        play = post_view & (u < m.play[:, s])
        skip = post_view & (u >= m.play[:, s]) & (u < m.play[:, s] + m.skip[:, s])
        played_any |= play
        skipped_any |= skip
        pct += np.where(play, _watch_fraction(config, rng, n), 0.0) / N_SLOTS
        eng += post_view & (rng.random(n) < m.engage[:, s])
        ad_view = viewed & ad
        clicked = ad_view & (rng.random(n) < m.ctr)
        installed = clicked & (rng.random(n) < config.install_rate)
        imp += ad_view
        clicks += clicked
        installs += installed
    abandoned = abandon_pos > 0
    session = abandoned & (rng.random(n) < m.session_share)
    return SubfeedOutcome(
        sat_base=np.column_stack([eng, played_any, pct, depth, skipped_any]).astype(float),
        ads=np.column_stack([imp, clicks, installs]),
        abandon_position=abandon_pos,
        session_abandoned=session.astype(np.int64),
        feed_abandoned_here=(abandoned & ~session).astype(np.int64),
    )


# --------------------------------------------------------------------------
# decision-state grid


@dataclass(frozen=True)
class DecisionStates:
    """The finite decision-state distribution with contexts and catalog keys."""

    probabilities: np.ndarray
    cohort: np.ndarray
    subfeed: np.ndarray
    rank_i: np.ndarray
    prev_offset: np.ndarray
    session_minutes: np.ndarray
    contexts: np.ndarray

    def __len__(self) -> int:
        return int(self.probabilities.size)


def _decision_session_state(sf: int, rank: int, offset: int, minutes: float) -> SessionState:
    # history counters are synthesized deterministically from the grid point
    had_ad = offset >= 0
    hist = [1 if had_ad else 0] * (rank - 1)
    posts = (rank - 1) * 10 + 5 * sf
    return SessionState(
        subfeed_index=sf,
        fetch_rank=rank,
        fetch_count=rank,
        session_minutes=minutes,
        prev_last_ad_offset=None if offset < 0 else offset,
        prev_ad_slots=int(had_ad and offset <= N_SLOTS - 1),
        fetch_ad_history=hist,
        session_impressions=sum(hist),
        session_clicks=0,
        hourly_interactions=round(0.2 * posts + 0.5 * minutes, 3),
        daily_interactions=round(0.2 * posts + 0.5 * minutes + 10, 3),
        posts_seen=posts,
    )


def enumerate_states(config: EnvironmentConfig) -> DecisionStates:
    """Product grid over cohorts, sub-feed, run rank, ad gap and session minutes."""
    cols: Dict[str, list] = {k: [] for k in ("p", "cohort", "sf", "rank", "off", "min")}
    contexts = []
    for k, (wc, user) in enumerate(config.cohorts):
        for sf, ws in enumerate(config.decision_subfeed_probs):
            for r, wr in enumerate(config.decision_rank_probs, start=1):
                for off, wo in zip(config.decision_offset_values, config.decision_offset_probs):
                    for minutes, wm in zip(config.decision_minutes_values, config.decision_minutes_probs):
                        p = wc * ws * wr * wo * wm
                        if p <= 0:
                            continue
                        cols["p"].append(p)
                        cols["cohort"].append(k)
                        cols["sf"].append(sf)
                        cols["rank"].append(r)
                        cols["off"].append(off)
                        cols["min"].append(minutes)
                        contexts.append(build_context(user, _decision_session_state(sf, r, off, minutes), config))
    return DecisionStates(
        probabilities=np.array(cols["p"]) / np.sum(cols["p"]),
        cohort=np.array(cols["cohort"], dtype=np.int64),
        subfeed=np.array(cols["sf"], dtype=np.int64),
        rank_i=np.array(cols["rank"], dtype=np.int64),
        prev_offset=np.array(cols["off"], dtype=np.int64),
        session_minutes=np.array(cols["min"], dtype=float),
        contexts=np.array(contexts),
    )


def _cohort_arrays(config: EnvironmentConfig, cohort: np.ndarray):
    prof = config.profiles
    fat = np.array([p.fatigue for p in prof])[cohort]
    sens = np.array([p.ad_sensitivity for p in prof])[cohort]
    eng = np.array([p.base_engagement for p in prof])[cohort]
    return fat, sens, eng


@dataclass(frozen=True)
class RewardTable:
    """Exact expected signals for every (state, bitmask) pair."""

    states: DecisionStates
    valid: np.ndarray  # (n_states, n_masks)
    sat_signals: np.ndarray  # (n_states, n_masks, 7)
    ads_signals: np.ndarray  # (n_states, n_masks, 3)

    def sat(self, weights: RewardWeights = RewardWeights()) -> np.ndarray:
        return np.where(self.valid, self.sat_signals @ weights.sat, 0.0)

    def ads(self, weights: RewardWeights = RewardWeights()) -> np.ndarray:
        return np.where(self.valid, self.ads_signals @ weights.ads, 0.0)

    def total(self, mix: RewardMixConfig, weights: RewardWeights = RewardWeights()) -> np.ndarray:
        return mix.beta * self.sat(weights) + (1 - mix.beta) * self.ads(weights)


def reward_table(config: EnvironmentConfig, params: DiscountParams = DiscountParams(), states: Optional[DecisionStates] = None) -> RewardTable:
    states = states if states is not None else enumerate_states(config)
    n_masks = config.constraints.n_masks
    valid = valid_action_matrix(config.constraints, states.subfeed, states.prev_offset)
    fat, sens, eng = _cohort_arrays(config, states.cohort)
    rep = lambda a: np.repeat(a, n_masks)  # noqa: E731
    masks = np.tile(np.arange(n_masks), len(states))
    sat, ads = expected_signals(
        config, rep(fat), rep(sens), rep(eng), masks, rep(states.subfeed), rep(states.rank_i),
        rep(states.session_minutes), params,
    )
    return RewardTable(
        states=states,
        valid=valid,
        sat_signals=sat.reshape(len(states), n_masks, 7),
        ads_signals=ads.reshape(len(states), n_masks, 3),
    )


# --------------------------------------------------------------------------
# log generation


def _retention_labels(config: EnvironmentConfig, sat_score: np.ndarray, rng) -> np.ndarray:
    logit = config.retention_intercept + config.retention_slope * sat_score
    return (rng.random(sat_score.shape) < 1.0 / (1.0 + np.exp(-logit))).astype(float)


def _revenue_labels(config: EnvironmentConfig, ads: np.ndarray, rng) -> np.ndarray:
    rev = ads @ np.array([config.revenue_per_impression, config.revenue_per_click, config.revenue_per_install])
    return np.maximum(rev + config.revenue_noise * rng.standard_normal(rev.shape), 0.0)


def _sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
    return np.minimum((u >= cdf).sum(axis=1), probs.shape[1] - 1)


def generate_decisions(
    policy,
    config: EnvironmentConfig,
    n_records: int,
    seed: int,
    params: DiscountParams = DiscountParams(),
    states: Optional[DecisionStates] = None,
) -> LogData:
    """I.i.d. decision-state log with exact sampling propensities.

    Each record is its own user; contexts come from :func:`enumerate_states`
    and runs surviving the sub-feed continue with an action-independent
    hazard, which is what makes :func:`true_policy_value` exact.
    """
    rng = np.random.default_rng(seed)
    states = states if states is not None else enumerate_states(config)
    if n_records == 0:
        return LogData.empty(config.constraints)
    idx = rng.choice(len(states), size=n_records, p=states.probabilities)
    contexts = states.contexts[idx]
    subfeed = states.subfeed[idx]
    prev_offset = states.prev_offset[idx]
    rank_i = states.rank_i[idx]
    minutes = states.session_minutes[idx]
    probs = policy.action_probabilities(contexts, subfeed, prev_offset)
    actions = _sample_actions(probs, rng)
    propensities = probs[np.arange(n_records), actions]
    fat, sens, eng = _cohort_arrays(config, states.cohort[idx])
    out = sample_subfeeds(config, fat, sens, eng, actions, rng)

    completed = out.abandon_position == 0
    cont_rank_d, cont_feed = _sample_continuation(config, subfeed, rank_i, rng)
    rank_d = np.where(completed, cont_rank_d, rank_i)
    feed_abandoned = np.where(completed, cont_feed.astype(np.int64), out.feed_abandoned_here)

    sat_score = sat_design_matrix(
        out.sat_base, feed_abandoned, out.session_abandoned, rank_i, rank_d, minutes, params
    ) @ RewardWeights().sat
    ids = np.array([f"s{seed}-{i}" for i in range(n_records)], dtype=object)
    return LogData(
        contexts=contexts,
        actions=actions,
        subfeed=subfeed,
        prev_offset=prev_offset,
        propensities=propensities,
        sat_base=out.sat_base,
        feed_abandoned=feed_abandoned,
        session_abandoned=out.session_abandoned,
        rank_i=rank_i,
        rank_d=rank_d,
        session_minutes=minutes,
        ads=out.ads,
        retention=_retention_labels(config, sat_score, rng),
        revenue=_revenue_labels(config, out.ads, rng),
        user_ids=ids,
        session_ids=ids,
        timestamps=EPOCH_MS + np.arange(n_records, dtype=np.int64) * 1000,
        constraints=config.constraints,
    )


def simulate_fetch(
    user: UserProfile,
    state: SessionState,
    action: FeedAction,
    config: EnvironmentConfig,
    rng: np.random.Generator,
) -> Tuple[SatSignals, AdsSignals, SessionState, int]:
    """Simulate one sub-feed and advance the session state.

    Returns ``(sat, ads, next_state, abandon_position)``. ``rank_d`` in the
    returned signals is provisional (equal to ``rank_i``) until the run is
    finalized; ``feed_abandoned`` marks an abandonment in this sub-feed.
    """
    if action.subfeed_index != min(state.subfeed_index, 1) and action.subfeed_index != state.subfeed_index:
        raise ValueError("action sub-feed does not match the session state")
    if not validate_action(action, config.constraints, state.prev_last_ad_offset):
        raise ValueError(f"action {action.slots} invalid for context {state.subfeed_index, state.prev_last_ad_offset}")
    out = sample_subfeeds(
        config, [user.fatigue], [user.ad_sensitivity], [user.base_engagement], [action.mask], rng
    )
    base = out.sat_base[0]
    sat = SatSignals(
        engagements=int(base[0]),
        video_play=int(base[1]),
        pct_video_watch=float(base[2]),
        feed_depth=int(base[3]),
        video_skip=int(base[4]),
        feed_abandoned=int(out.feed_abandoned_here[0]),
        session_abandoned=int(out.session_abandoned[0]),
        rank_i=state.fetch_rank,
        rank_d=state.fetch_rank,
        session_minutes=state.session_minutes,
    )
    ads = AdsSignals(*(int(v) for v in out.ads[0]))
    return sat, ads, _advance(state, action, out, config, rng), int(out.abandon_position[0])


def _advance(state: SessionState, action: FeedAction, out: SubfeedOutcome, config: EnvironmentConfig, rng) -> SessionState:
    depth = int(out.sat_base[0, 3])
    nxt = replace(state, fetch_ad_history=list(state.fetch_ad_history))
    nxt.session_minutes = round(state.session_minutes + config.minutes_per_post * depth, 6)
    nxt.posts_seen = state.posts_seen + depth
    nxt.session_impressions += int(out.ads[0, 0])
    nxt.session_clicks += int(out.ads[0, 1])
    nxt.hourly_interactions = state.hourly_interactions + float(out.sat_base[0, 0]) + 0.2 * depth
    nxt.daily_interactions = state.daily_interactions + float(out.sat_base[0, 0]) + 0.2 * depth
    nxt.prev_ad_slots = action.n_ads
    if action.slots:
        nxt.prev_last_ad_offset = N_SLOTS - action.slots[-1]
    elif state.prev_last_ad_offset is not None:
        nxt.prev_last_ad_offset = state.prev_last_ad_offset + N_SLOTS
    nxt.current_fetch_ads = state.current_fetch_ads + action.n_ads
    abandoned = int(out.abandon_position[0]) > 0
    if state.subfeed_index == 0 and not abandoned:
        nxt.subfeed_index = 1
        return nxt
    # fetch finished (or cut short): roll the per-fetch history
    nxt.fetch_ad_history.append(nxt.current_fetch_ads)
    nxt.current_fetch_ads = 0
    nxt.subfeed_index = 0
    nxt.fetch_count = state.fetch_count + 1
    nxt.genre_affinity = round(float(rng.beta(2, 2)), 4)
    nxt.distinct_genres = float(rng.integers(1, 6))
    nxt.post_age_hours = round(float(rng.gamma(2.0, 6.0)), 3)
    if abandoned:
        nxt.fetch_rank = 1
        nxt.run_index = state.run_index + 1
    else:
        nxt.fetch_rank = state.fetch_rank + 1
    return nxt


def generate_log(
    policy,
    config: EnvironmentConfig,
    n_users: int,
    seed: int,
    params: DiscountParams = DiscountParams(),
) -> LogData:
    """Simulate full sessions under ``policy`` and emit one record per sub-feed.

    Runs end when the user abandons the feed or the session; at that point
    ``rank_d`` is back-filled on every record of the run and, for a feed
    abandonment, ``feed_abandoned`` is set on all of them so the discounted
    cost is attributed backwards. A run cut by the session-length limit ends
    without abandonment.
    """
    if n_users == 0:
        return LogData.empty(config.constraints)
    children = np.random.SeedSequence(seed).spawn(n_users)
    rows: Dict[str, list] = {k: [] for k in (
        "ctx", "act", "sf", "off", "p", "base", "fa", "sa", "ri", "rd", "min", "ads", "uid", "sid", "ts", "run",
    )}
    labels_ret: List[float] = []
    rng_labels = np.random.default_rng(np.random.SeedSequence(seed).spawn(n_users + 1)[-1])
    for u, child in enumerate(children):
        rng = np.random.default_rng(child)
        user = sample_user(config, rng)
        n_fetches = int(rng.integers(config.session_length[0], config.session_length[1] + 1))
        state = SessionState(
            genre_affinity=round(float(rng.beta(2, 2)), 4),
            distinct_genres=float(rng.integers(1, 6)),
            post_age_hours=round(float(rng.gamma(2.0, 6.0)), 3),
        )
        session_rows: List[int] = []
        run_rows: List[int] = []
        sid = f"u{u}-s0"
        t0 = EPOCH_MS + u * 86_400_000
        while True:
            ctx = build_context(user, state, config)
            off = NO_PREV_AD if state.prev_last_ad_offset is None else state.prev_last_ad_offset
            probs = policy.action_probabilities(ctx[None, :], np.array([state.subfeed_index]), np.array([off]))[0]
            mask = int(_sample_actions(probs[None, :], rng)[0])
            action = FeedAction.from_mask(mask, state.subfeed_index)
            sat, ads, nxt, pos = simulate_fetch(user, state, action, config, rng)
            i = len(rows["act"])
            rows["ctx"].append(ctx)
            rows["act"].append(mask)
            rows["sf"].append(state.subfeed_index)
            rows["off"].append(off)
            rows["p"].append(float(probs[mask]))
            rows["base"].append([sat.engagements, sat.video_play, sat.pct_video_watch, sat.feed_depth, sat.video_skip])
            rows["fa"].append(sat.feed_abandoned)
            rows["sa"].append(sat.session_abandoned)
            rows["ri"].append(sat.rank_i)
            rows["rd"].append(sat.rank_i)
            rows["min"].append(sat.session_minutes)
            rows["ads"].append([ads.impressions, ads.clicks, ads.installs])
            rows["uid"].append(f"u{u}")
            rows["sid"].append(sid)
            rows["ts"].append(t0 + int(state.session_minutes * 60_000))
            session_rows.append(i)
            run_rows.append(i)
            session_over = sat.session_abandoned == 1
            run_over = pos > 0
            fetch_done = nxt.subfeed_index == 0
            if fetch_done and nxt.fetch_count > n_fetches:
                session_over = True
            if run_over or session_over:
                # finalization pass for the run: back-fill rank_d and attribution
                rank_d = sat.rank_i
                feed_end = sat.feed_abandoned == 1
                for j in run_rows:
                    rows["rd"][j] = rank_d
                    rows["fa"][j] = int(feed_end)
                run_rows = []
            if session_over:
                break
            state = nxt
        # one retention label per session, affine in mean record satisfaction
        sat_scores = []
        for j in session_rows:
            design = sat_design_matrix(
                np.array([rows["base"][j]]), [rows["fa"][j]], [rows["sa"][j]], [rows["ri"][j]], [rows["rd"][j]],
                [rows["min"][j]], params,
            )
            sat_scores.append(float((design @ RewardWeights().sat)[0]))
        label = _retention_labels(config, np.array([np.mean(sat_scores)]), rng_labels)[0]
        labels_ret.extend([label] * len(session_rows))
    ads_arr = np.array(rows["ads"], dtype=float)
    return LogData(
        contexts=np.array(rows["ctx"]),
        actions=rows["act"],
        subfeed=rows["sf"],
        prev_offset=rows["off"],
        propensities=rows["p"],
        sat_base=np.array(rows["base"], dtype=float),
        feed_abandoned=rows["fa"],
        session_abandoned=rows["sa"],
        rank_i=rows["ri"],
        rank_d=rows["rd"],
        session_minutes=rows["min"],
        ads=ads_arr,
        retention=np.array(labels_ret),
        revenue=_revenue_labels(config, ads_arr, rng_labels),
        user_ids=rows["uid"],
        session_ids=rows["sid"],
        timestamps=rows["ts"],
        constraints=config.constraints,
    )


FULL_CATALOG = ActionConstraints(max_ads=N_SLOTS, min_position_difference=1, forbid_slot1_on_first_subfeed=False)


def sampler_fixture_log(
    n_records: int,
    seed: int,
    boosted_mask: int = 0,
    boost: float = 1.0,
    constraints: ActionConstraints = FULL_CATALOG,
) -> LogData:
    """Single-context log whose propensities claim uniform logging.

    The actual sampler draws ``boosted_mask`` with ``boost`` times the
    uniform probability and spreads the rest evenly, so ``boost=1`` is a
    truthful log and ``boost=2`` the classic corrupted-sampler case. All
    signals are zero; only actions and propensities matter.
    """
    rng = np.random.default_rng(seed)
    masks = catalog_for_key(constraints, 1, NO_PREV_AD).masks
    k = masks.size
    if boosted_mask not in set(masks.tolist()):
        raise ValueError("boosted action is not in the catalog")
    q = np.full(k, (1.0 - boost / k) / (k - 1))
    q[masks == boosted_mask] = boost / k
    if np.any(q < 0):
        raise ValueError("boost too large for the catalog size")
    actions = masks[rng.choice(k, size=n_records, p=q)]
    z = np.zeros(n_records)
    ids = np.array([f"f{seed}-{i}" for i in range(n_records)], dtype=object)
    return LogData(
        contexts=np.zeros((n_records, CONTEXT_DIM)), actions=actions, subfeed=np.ones(n_records, dtype=np.int64),
        prev_offset=np.full(n_records, NO_PREV_AD), propensities=np.full(n_records, 1.0 / k),
        sat_base=np.zeros((n_records, 5)), feed_abandoned=z, session_abandoned=z, rank_i=np.ones(n_records),
        rank_d=np.ones(n_records), session_minutes=z, ads=np.zeros((n_records, 3)), retention=np.full(n_records, np.nan),
        revenue=np.full(n_records, np.nan), user_ids=ids, session_ids=ids,
        timestamps=EPOCH_MS + np.arange(n_records, dtype=np.int64), constraints=constraints,
    )


# --------------------------------------------------------------------------
# oracle


@dataclass(frozen=True)
class TruePolicyValue:
    v_sat: float
    v_ads: float
    beta: float
    mc_std_error: float
    method: str
    complete: bool = True
    mc_std_error_sat: float = 0.0
    mc_std_error_ads: float = 0.0

    @property
    def v_total(self) -> float:
        return self.beta * self.v_sat + (1 - self.beta) * self.v_ads

    def total(self, beta: float) -> float:
        return beta * self.v_sat + (1 - beta) * self.v_ads


EXACT_STATE_LIMIT = 10**6


def true_policy_value(
    policy,
    config: EnvironmentConfig,
    weights: RewardWeights = RewardWeights(),
    mix: RewardMixConfig = RewardMixConfig(),
    params: DiscountParams = DiscountParams(),
    precision: float = 1e-3,
    method: str = "auto",
    table: Optional[RewardTable] = None,
    seed: int = 0,
    max_samples: int = 10**7,
    batch: int = 200_000,
) -> TruePolicyValue:
    """Value of ``policy`` on the decision-state distribution.

    Exact enumeration sums state probability x policy probability x exact
    expected reward. Monte Carlo samples states, actions and outcomes until
    the standard error of the mixed value drops to ``precision``; if the
    sample budget runs out first the result has ``complete=False``.
    """
    n_masks = config.constraints.n_masks
    if method == "auto":
        n_states = len(table.states) if table is not None else len(enumerate_states(config))
        method = "exact_enumeration" if n_states * n_masks <= EXACT_STATE_LIMIT else "monte_carlo"
    if method == "exact_enumeration":
        table = table if table is not None else reward_table(config, params)
        st = table.states
        probs = policy.action_probabilities(st.contexts, st.subfeed, st.prev_offset)
        v_sat = float(st.probabilities @ (probs * table.sat(weights)).sum(axis=1))
        v_ads = float(st.probabilities @ (probs * table.ads(weights)).sum(axis=1))
        return TruePolicyValue(v_sat, v_ads, mix.beta, 0.0, "exact_enumeration")
    if method != "monte_carlo":
        raise ValueError(f"unknown method {method!r}")
    states = table.states if table is not None else enumerate_states(config)
    sums = np.zeros(2)
    sq = np.zeros(3)  # sat^2, ads^2, sat*ads
    n = 0
    k = 0
    se = math.inf
    while n < max_samples:
        log = generate_decisions(policy, config, batch, seed=seed * 7919 + k, params=params, states=states)
        s = log.sat_rewards(weights, params)
        a = log.ads_rewards(weights)
        sums += [s.sum(), a.sum()]
        sq += [(s * s).sum(), (a * a).sum(), (s * a).sum()]
        n += batch
        k += 1
        mean = sums / n
        var_s = sq[0] / n - mean[0] ** 2
        var_a = sq[1] / n - mean[1] ** 2
        cov = sq[2] / n - mean[0] * mean[1]
        b = mix.beta
        var_t = b * b * var_s + (1 - b) ** 2 * var_a + 2 * b * (1 - b) * cov
        se = math.sqrt(max(var_t, 0.0) / n)
        if se <= precision:
            break
    complete = se <= precision
    if not complete:
        warnings.warn(f"Monte Carlo budget exhausted at standard error {se:.3g} > {precision}", stacklevel=2)
    return TruePolicyValue(
        float(mean[0]), float(mean[1]), mix.beta, se, "monte_carlo", complete,
        math.sqrt(max(var_s, 0.0) / n), math.sqrt(max(var_a, 0.0) / n),
    )


class OracleRewardModel(RewardModel):
    """Reward model returning exact expected rewards on decision-state contexts.

    Contexts are matched to grid states by their exact feature values, so it
    only applies to logs from :func:`generate_decisions` on the same config.
    ``bias`` is added to every prediction (used to study robustness).
    """

    def __init__(
        self,
        config: EnvironmentConfig,
        mix: RewardMixConfig,
        weights: RewardWeights = RewardWeights(),
        params: DiscountParams = DiscountParams(),
        bias: float = 0.0,
        table: Optional[RewardTable] = None,
    ) -> None:
        self.table = table if table is not None else reward_table(config, params)
        self.values = self.table.total(mix, weights) + bias
        self.bias = bias
        self.constraints = config.constraints
        self.validation_mse = 0.0
        ctx = np.ascontiguousarray(self.table.states.contexts)
        self._lookup = {row.tobytes(): i for i, row in enumerate(ctx)}

    def state_index(self, contexts: np.ndarray) -> np.ndarray:
        contexts = np.ascontiguousarray(np.asarray(contexts, dtype=float))
        try:
            return np.array([self._lookup[row.tobytes()] for row in contexts], dtype=np.int64)
        except KeyError:
            raise KeyError("context not on the decision-state grid") from None

    def _raw_predict(self, contexts, subfeed, prev_offset, valid) -> np.ndarray:
        return self.values[self.state_index(contexts)]
