import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adload.rewards import (
    AdsSignals,
    DegenerateInputError,
    DiscountParams,
    RewardMixConfig,
    RewardWeights,
    SatSignals,
    ScalarizationConfig,
    ads_reward,
    discounted_feed_abandonment,
    discounted_session_abandonment,
    final_reward,
    fit_scalarization,
    pearson,
    sat_design_matrix,
    sat_reward,
    sat_signal_vector,
    weights_from_fits,
)

from oracles import feed_lambda, session_lambda


def test_feed_discount_spot_values():
    assert discounted_feed_abandonment(1, 1) == pytest.approx(1 / math.log(2), abs=1e-12)
    assert discounted_feed_abandonment(1, 1) == pytest.approx(1.442695, abs=1e-6)
    assert discounted_feed_abandonment(1, 3) == pytest.approx(0.25 / math.log(4), abs=1e-12)
    assert discounted_feed_abandonment(1, 3) == pytest.approx(0.180337, abs=1e-6)
    assert discounted_feed_abandonment(2, 5, DiscountParams(alpha=1.0)) == pytest.approx(1 / math.log(6), abs=1e-12)
    assert discounted_feed_abandonment(2, 5, DiscountParams(alpha=1.0)) == pytest.approx(0.558111, abs=1e-6)


def test_feed_discount_argument_errors():
    with pytest.raises(ValueError):
        discounted_feed_abandonment(3, 2)
    with pytest.raises(ValueError):
        discounted_feed_abandonment(0, 2)
    with pytest.raises(ValueError):
        DiscountParams(alpha=0.0)
    with pytest.raises(ValueError):
        DiscountParams(alpha=1.5)


def test_session_discount_spot_values():
    assert discounted_session_abandonment(0.0) == pytest.approx(1 / math.log(2), abs=1e-12)
    assert discounted_session_abandonment(5.0) == pytest.approx(1 / math.log(7), abs=1e-12)
    assert discounted_session_abandonment(5.0) == pytest.approx(0.513898, abs=1e-6)
    assert discounted_session_abandonment(1e12) < 0.04
    with pytest.raises(ValueError):
        discounted_session_abandonment(-1.0)


def test_session_discount_scale():
    p = DiscountParams(session_discount_scale=10.0)
    assert discounted_session_abandonment(50.0, p) == pytest.approx(session_lambda(50.0, 10.0), abs=1e-12)


@settings(max_examples=100)
@given(
    rank_i=st.integers(1, 8),
    extra=st.integers(0, 8),
    alpha=st.floats(0.01, 1.0),
)
def test_feed_discount_monotone(rank_i, extra, alpha):
    rank_d = rank_i + extra
    v = discounted_feed_abandonment(rank_i, rank_d, DiscountParams(alpha=alpha))
    assert v == pytest.approx(feed_lambda(rank_i, rank_d, alpha), rel=1e-12)
    assert v >= discounted_feed_abandonment(rank_i, rank_d + 1, DiscountParams(alpha=alpha))
    assert v <= discounted_feed_abandonment(rank_i, rank_d, DiscountParams(alpha=min(1.0, alpha * 1.5))) + 1e-15
    assert 0 < alpha ** (rank_d - rank_i) <= 1


def test_single_signal_rewards_reproduce_default_weights():
    w = RewardWeights()
    assert sat_reward(SatSignals(engagements=1), w) == 0.5995
    assert sat_reward(SatSignals(video_play=1), w) == 0.6235
    assert sat_reward(SatSignals(pct_video_watch=1.0), w) == 0.3464
    assert sat_reward(SatSignals(feed_depth=1), w) == 0.3213
    assert sat_reward(SatSignals(video_skip=1), w) == -0.1432
    assert ads_reward(AdsSignals(impressions=1), w) == 0.2234
    assert ads_reward(AdsSignals(clicks=1), w) == 0.5135
    assert ads_reward(AdsSignals(installs=1), w) == 0.7823


def test_reward_examples():
    assert sat_reward(SatSignals()) == 0.0
    assert ads_reward(AdsSignals()) == 0.0
    assert sat_reward(SatSignals(video_play=1, video_skip=1)) == pytest.approx(0.4803, abs=1e-12)
    assert ads_reward(AdsSignals(1, 1, 1)) == pytest.approx(1.5192, abs=1e-12)


def test_abandonment_signals_are_discounted():
    s = SatSignals(feed_abandoned=1, rank_i=1, rank_d=3)
    assert sat_reward(s) == pytest.approx(-0.3742 * 0.25 / math.log(4), abs=1e-12)
    s = SatSignals(session_abandoned=1, session_minutes=5.0)
    assert sat_reward(s) == pytest.approx(-1.2345 / math.log(7), abs=1e-12)


def test_sat_signals_invariants():
    with pytest.raises(ValueError):
        SatSignals(rank_i=3, rank_d=2)
    with pytest.raises(ValueError):
        SatSignals(video_play=2)
    with pytest.raises(ValueError):
        SatSignals(pct_video_watch=1.2)


def test_design_matrix_matches_record_vectors(rng):
    rows = []
    sigs = []
    for _ in range(20):
        ri = int(rng.integers(1, 4))
        s = SatSignals(
            engagements=int(rng.integers(0, 3)), video_play=int(rng.integers(0, 2)), pct_video_watch=float(rng.random()),
            feed_depth=int(rng.integers(0, 6)), video_skip=int(rng.integers(0, 2)), feed_abandoned=int(rng.integers(0, 2)),
            session_abandoned=int(rng.integers(0, 2)), rank_i=ri, rank_d=ri + int(rng.integers(0, 3)),
            session_minutes=float(rng.random() * 10),
        )
        sigs.append(s)
        rows.append(sat_signal_vector(s))
    X = sat_design_matrix(
        [[s.engagements, s.video_play, s.pct_video_watch, s.feed_depth, s.video_skip] for s in sigs],
        [s.feed_abandoned for s in sigs], [s.session_abandoned for s in sigs],
        [s.rank_i for s in sigs], [s.rank_d for s in sigs], [s.session_minutes for s in sigs],
    )
    np.testing.assert_allclose(X, np.array(rows), rtol=0, atol=1e-15)


def test_final_reward_examples():
    assert final_reward(0.7, 5.0, RewardMixConfig(1.0)) == 0.7
    assert final_reward(0.7, 5.0, RewardMixConfig(0.0)) == 5.0
    assert final_reward(1.0, 0.5, RewardMixConfig(0.8)) == pytest.approx(0.9)
    with pytest.raises(ValueError):
        RewardMixConfig(1.1)


@given(st.floats(0, 1), st.floats(-10, 10), st.floats(-10, 10))
def test_final_reward_affine_in_beta(beta, sat, ads):
    r = final_reward(sat, ads, RewardMixConfig(beta))
    assert r == pytest.approx(ads + beta * (sat - ads), abs=1e-9)


@given(
    st.lists(st.floats(0, 5), min_size=3, max_size=3),
    st.lists(st.floats(0, 5), min_size=3, max_size=3),
)
def test_ads_reward_linear(a, b):
    w = RewardWeights()
    total = ads_reward(AdsSignals(*[x + y for x, y in zip(a, b)]), w)
    assert total == pytest.approx(ads_reward(AdsSignals(*a), w) + ads_reward(AdsSignals(*b), w), abs=1e-9)


def test_weights_round_trip_and_validation():
    w = RewardWeights(sat_weights=tuple(range(7)), ads_weights=(1, 2, 3))
    assert RewardWeights.from_dict(w.to_dict()) == w
    with pytest.raises(ValueError):
        RewardWeights(sat_weights=(1.0,) * 6)
    with pytest.raises(ValueError):
        RewardWeights(ads_weights=(1.0, float("nan"), 0.0))
    with pytest.raises(ValueError):
        RewardWeights.from_dict({"sat": {"likes": 1.0}})


# --------------------------------------------------------------------------
# scalarization


def _synthetic(n, d, noise, seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d)) * rng.uniform(0.5, 3.0, d) + rng.normal(0, 2, d)
    w0 = rng.standard_normal(d)
    y = X @ w0 + noise * rng.standard_normal(n)
    return X, y, w0


def test_noiseless_target_recovers_direction():
    X, y, w0 = _synthetic(2000, 7, 0.0, 1)
    fit = fit_scalarization(X, y)
    assert fit.achieved_correlation == pytest.approx(1.0, abs=1e-6)
    assert fit.converged
    direction = w0 / np.linalg.norm(w0)
    raw = fit.raw_weights / np.linalg.norm(fit.raw_weights)
    np.testing.assert_allclose(raw, direction, atol=1e-5)
    assert np.linalg.norm(fit.weights) == pytest.approx(1.0)


@pytest.mark.parametrize("noise", [0.5, 2.0, 5.0])
def test_noisy_target_matches_generating_weights(noise):
    X, y, w0 = _synthetic(5000, 7, noise, 2)
    oracle = pearson(y, X @ w0)
    fit = fit_scalarization(X, y)
    assert abs(fit.achieved_correlation - oracle) <= 0.01
    assert fit.achieved_correlation == pytest.approx(pearson(y, fit.score(X)), abs=1e-9)


def test_pure_noise_target_has_low_correlation():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((10_000, 5))
    y = rng.standard_normal(10_000)
    assert fit_scalarization(X, y).achieved_correlation < 0.05


def test_sign_is_chosen_positive():
    X, y, _ = _synthetic(500, 3, 0.1, 4)
    assert fit_scalarization(X, -y).achieved_correlation > 0.99


def test_degenerate_inputs(caplog):
    X, y, _ = _synthetic(200, 3, 0.1, 5)
    with pytest.raises(DegenerateInputError):
        fit_scalarization(X, np.ones(200))
    Xc = X.copy()
    Xc[:, 1] = 4.0
    with pytest.raises(DegenerateInputError):
        fit_scalarization(Xc, y)
    fit = fit_scalarization(Xc, y, ScalarizationConfig(drop_constant_columns=True))
    assert fit.weights[1] == 0.0
    assert "dropping constant columns" in caplog.text
    with pytest.raises(ValueError):
        fit_scalarization(X[:3], y[:3])


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_pearson_scale_invariance(c, seed):
    X, y, _ = _synthetic(200, 4, 1.0, seed)
    w = np.random.default_rng(seed).standard_normal(4)
    assert pearson(y, X @ (c * w)) == pytest.approx(pearson(y, X @ w), abs=1e-9)


def test_weights_from_fits_rescales_to_reference_norm():
    X, y, w0 = _synthetic(1000, 7, 0.0, 6)
    fit = fit_scalarization(X, y)
    w = weights_from_fits(fit, None)
    assert np.linalg.norm(w.sat) == pytest.approx(np.linalg.norm(RewardWeights().sat))
    assert w.ads_weights == RewardWeights().ads_weights
    np.testing.assert_allclose(w.sat / np.linalg.norm(w.sat), w0 / np.linalg.norm(w0), atol=1e-5)
