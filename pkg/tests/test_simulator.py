import math

import numpy as np
import pytest

from adload.action_space import FeedAction
from adload.dataset import CONTEXT_DIM, FEATURE_INDEX
from adload.policies import FixedCountPolicy, MixturePolicy, max_ads_policy, no_ads_policy, uniform_policy
from adload.rewards import DiscountParams, RewardMixConfig, RewardWeights
from adload.simulator import (
    EnvironmentConfig,
    SessionState,
    UserProfile,
    build_context,
    enumerate_states,
    expected_signals,
    generate_decisions,
    generate_log,
    sample_subfeeds,
    sample_user,
    simulate_fetch,
    true_policy_value,
)

from oracles import enumerate_subfeed

W = RewardWeights()


# --------------------------------------------------------------------------
# exact signals against path enumeration


@pytest.mark.parametrize("mask", [0, 1, 2, 4, 16, 17, 9, 31])
@pytest.mark.parametrize("subfeed,rank_i,minutes", [(0, 1, 0.0), (1, 3, 5.0), (1, 6, 15.0), (0, 4, 2.5)])
def test_expected_signals_match_path_enumeration(mask, subfeed, rank_i, minutes):
    cfg = EnvironmentConfig()
    for profile in cfg.profiles[::4]:
        sat, ads = expected_signals(
            cfg, [profile.fatigue], [profile.ad_sensitivity], [profile.base_engagement], [mask], [subfeed], [rank_i], [minutes]
        )
        ref_sat, ref_ads = enumerate_subfeed(
            cfg, profile.fatigue, profile.ad_sensitivity, profile.base_engagement, mask, subfeed, rank_i, minutes
        )
        np.testing.assert_allclose(sat[0], ref_sat, rtol=0, atol=1e-12)
        np.testing.assert_allclose(ads[0], ref_ads, rtol=0, atol=1e-12)


def test_expected_signals_respect_discount_params():
    cfg = EnvironmentConfig()
    params = DiscountParams(alpha=0.8, session_discount_scale=4.0)
    sat, _ = expected_signals(cfg, [0.5], [1.3], [1.0], [5], [1], [2], [7.0], params)
    ref, _ = enumerate_subfeed(cfg, 0.5, 1.3, 1.0, 5, 1, 2, 7.0, alpha=0.8, scale=4.0)
    np.testing.assert_allclose(sat[0], ref, atol=1e-12)


# --------------------------------------------------------------------------
# a micro environment small enough to evaluate by hand


def micro_env():
    return EnvironmentConfig(
        cohorts=((1.0, UserProfile(fatigue=0.0, ad_sensitivity=1.0)),),
        base_hazard=(0.0, 0.1, 0.0, 0.0, 0.0, 0.0),
        engagement_rate=0.0,
        video_share=0.0,
        install_rate=0.0,
        max_run_length=1,
        decision_subfeed_probs=(0.0, 1.0),
        decision_rank_probs=(1.0,),
        decision_offset_values=(-1,),
        decision_offset_probs=(1.0,),
        decision_minutes_values=(0.0,),
        decision_minutes_probs=(1.0,),
    )


def test_micro_env_has_a_single_state():
    st = enumerate_states(micro_env())
    assert len(st) == 1
    assert st.subfeed.tolist() == [1] and st.rank_i.tolist() == [1] and st.prev_offset.tolist() == [-1]


def test_micro_env_policy_value_by_hand():
    cfg = micro_env()
    policy = MixturePolicy([no_ads_policy(), FixedCountPolicy(1)], [0.5, 0.5])
    got = true_policy_value(policy, cfg, mix=RewardMixConfig(0.8))

    abandon_cost = (0.85 * -0.3742 + 0.15 * -1.2345) / math.log(2)

    def sat_value(h):
        # every user sees slot 1; the rest only if they survive the hazard before slot 2
        return 0.3213 * (1 + 4 * (1 - h)) + h * abandon_cost

    sat_no_ads = sat_value(0.1)
    sat_one_ad = sat_value(0.4)  # ad in slot 1 multiplies the next hazard by 4
    ads_one_ad = 0.97 * 0.2234 + 0.97 * 0.06 * 0.5135
    assert got.v_sat == pytest.approx(0.5 * (sat_no_ads + sat_one_ad), abs=1e-9)
    assert got.v_ads == pytest.approx(0.5 * ads_one_ad, abs=1e-9)
    assert got.v_total == pytest.approx(0.8 * got.v_sat + 0.2 * got.v_ads, abs=1e-12)


def test_micro_env_monte_carlo_agrees():
    cfg = micro_env()
    log = generate_decisions(FixedCountPolicy(1), cfg, 200_000, seed=3)
    assert np.all(log.actions == 1)
    assert log.sat_base[:, 3].mean() == pytest.approx(1 + 4 * 0.6, abs=0.01)
    assert log.ads[:, 0].mean() == pytest.approx(0.97, abs=0.002)


# --------------------------------------------------------------------------
# oracle behavior on the default environment


def test_exact_and_monte_carlo_values_agree(env, table):
    for policy in (uniform_policy(), FixedCountPolicy(2)):
        exact = true_policy_value(policy, env, table=table)
        mc = true_policy_value(policy, env, method="monte_carlo", precision=2e-3, table=table, seed=5)
        assert mc.complete
        assert abs(mc.v_total - exact.v_total) <= 3 * mc.mc_std_error
        assert abs(mc.v_sat - exact.v_sat) <= 3 * mc.mc_std_error_sat + 1e-12
        assert abs(mc.v_ads - exact.v_ads) <= 3 * mc.mc_std_error_ads + 1e-12


def test_no_ads_policy_earns_no_ads_reward(env, table):
    assert true_policy_value(no_ads_policy(), env, table=table).v_ads == 0.0
    assert np.all(table.ads_signals[:, 0, :] == 0.0)


def test_monte_carlo_budget_warning(env, table):
    with pytest.warns(UserWarning, match="budget"):
        res = true_policy_value(uniform_policy(), env, method="monte_carlo", precision=1e-9, max_samples=1000,
                                batch=1000, table=table)
    assert not res.complete


def test_table_is_zero_off_catalog(table):
    assert np.all(table.sat()[~table.valid] == 0.0)
    assert np.all(table.ads()[~table.valid] == 0.0)


def test_trade_off_between_objectives(env, table):
    none = true_policy_value(no_ads_policy(), env, table=table)
    full = true_policy_value(max_ads_policy(), env, table=table)
    assert full.v_ads > none.v_ads
    assert full.v_sat < none.v_sat


def test_neutral_ads_leave_abandonment_unchanged():
    cfg = EnvironmentConfig(post_ad_abandon_multiplier=1.0)
    sat, _ = expected_signals(cfg, [0.3, 0.3], [1.0, 1.0], [1.0, 1.0], [0, 17], [1, 1], [2, 2], [5.0, 5.0])
    np.testing.assert_allclose(sat[0, 5:], sat[1, 5:], atol=1e-15)
    np.testing.assert_allclose(sat[0, 3], sat[1, 3], atol=1e-15)


def test_ads_cost_more_for_sensitive_users():
    cfg = EnvironmentConfig()
    w = W.sat
    sat, _ = expected_signals(cfg, [0.5] * 4, [0.5, 0.5, 2.0, 2.0], [1.0] * 4, [0, 1, 0, 1], [1] * 4, [1] * 4, [0.0] * 4)
    score = sat @ w
    assert score[0] - score[1] < score[2] - score[3]


def test_later_ad_costs_less_satisfaction():
    cfg = EnvironmentConfig()
    sat, _ = expected_signals(cfg, [0.5, 0.5], [1.5, 1.5], [1.0, 1.0], [1, 16], [1, 1], [1, 1], [0.0, 0.0])
    score = sat @ W.sat
    assert score[1] > score[0]


def test_cohort_heterogeneity_in_ad_cost(env, table):
    st = table.states
    key = (st.subfeed == 1) & (st.prev_offset == -1) & (st.rank_i == 1) & (st.session_minutes == 0.0)
    drop = table.sat()[key, 0] - table.sat()[key, 1]
    fatigue = np.array([env.profiles[c].fatigue for c in st.cohort[key]])
    order = np.argsort(fatigue, kind="stable")
    assert drop[order][-1] > 3 * drop[order][0]


# --------------------------------------------------------------------------
# sampling


def test_sample_subfeeds_without_ads_has_no_ad_signals(rng):
    out = sample_subfeeds(EnvironmentConfig(), np.full(1000, 0.4), np.ones(1000), np.ones(1000), np.zeros(1000), rng)
    assert np.all(out.ads == 0)
    assert np.all((out.sat_base[:, 3] >= 0) & (out.sat_base[:, 3] <= 5))
    assert np.all(out.session_abandoned + out.feed_abandoned_here <= 1)


def test_sample_user_follows_cohort_weights(rng):
    cfg = EnvironmentConfig(
        cohorts=((0.25, UserProfile(language="Tamil")), (0.75, UserProfile(language="Hindi")))
    )
    draws = [sample_user(cfg, rng).language for _ in range(4000)]
    assert draws.count("Tamil") / 4000 == pytest.approx(0.25, abs=0.03)
    single = EnvironmentConfig(cohorts=((1.0, UserProfile(fatigue=0.3)),))
    assert sample_user(single, rng) == UserProfile(fatigue=0.3)


def test_build_context_examples():
    user = UserProfile(language="Telugu", fatigue=0.2)
    x = build_context(user, SessionState())
    assert x.shape == (CONTEXT_DIM,)
    assert x[FEATURE_INDEX["ad_gap"]] == -1
    assert x[FEATURE_INDEX["language_telugu"]] == 1.0
    assert x[FEATURE_INDEX["fatigue_score"]] == 0.2
    y = build_context(user, SessionState(prev_last_ad_offset=2, fetch_ad_history=[1, 1, 1]))
    assert y[FEATURE_INDEX["ad_gap"]] == 2
    assert y[FEATURE_INDEX["avg_ad_load_3"]] == 1.0


def test_simulate_fetch_rejects_invalid_action(rng):
    user = UserProfile()
    with pytest.raises(ValueError):
        simulate_fetch(user, SessionState(), FeedAction((1,), 0), EnvironmentConfig(), rng)
    sat, ads, nxt, pos = simulate_fetch(user, SessionState(), FeedAction((3,), 0), EnvironmentConfig(), rng)
    assert sat.rank_i == 1 and ads.impressions in (0, 1)
    if pos == 0:
        assert nxt.subfeed_index == 1 and nxt.prev_last_ad_offset == 2


def test_generate_log_edge_cases(env):
    assert len(generate_log(uniform_policy(), env, n_users=0, seed=1)) == 0
    a = generate_log(uniform_policy(), env, n_users=30, seed=4)
    b = generate_log(uniform_policy(), env, n_users=30, seed=4)
    assert a.to_records() == b.to_records()


def test_session_log_runs_are_consistent(env):
    log = generate_log(uniform_policy(), env, n_users=200, seed=8)
    assert np.all(log.rank_d >= log.rank_i)
    assert np.all(log.rank_i >= 1)
    assert np.all(log.feed_abandoned + log.session_abandoned <= 1)
    # records of one run share rank_d; a new run starts at rank 1
    for uid in np.unique(log.user_ids)[:50]:
        rows = np.flatnonzero(log.user_ids == uid)
        run_id = np.cumsum((log.rank_i[rows] == 1) & (log.subfeed[rows] == 0))
        for r in np.unique(run_id):
            sel = rows[run_id == r]
            assert np.unique(log.rank_d[sel]).size == 1
            assert log.rank_d[sel][0] == log.rank_i[sel].max()


def test_decision_log_determinism_and_propensities(env, table):
    a = generate_decisions(uniform_policy(), env, 2000, seed=6, states=table.states)
    b = generate_decisions(uniform_policy(), env, 2000, seed=6)
    assert a.to_records() == b.to_records()
    probs = uniform_policy().action_probabilities(a.contexts, a.subfeed, a.prev_offset)
    np.testing.assert_array_equal(a.propensities, probs[np.arange(len(a)), a.actions])
    assert np.all(a.rank_d <= env.max_run_length)


def test_reward_table_shape(env, table):
    assert table.sat_signals.shape == (len(table.states), 32, 7)
    assert table.states.probabilities.sum() == pytest.approx(1.0)
    assert len(table.states) == len(env.profiles) * 2 * 6 * 6 * 3


def test_config_validation():
    with pytest.raises(ValueError):
        EnvironmentConfig(cohorts=((0.5, UserProfile()),))
    with pytest.raises(ValueError):
        EnvironmentConfig(position_view_decay=(0.9, 0.9, 0.8, 0.7, 0.6))
    with pytest.raises(ValueError):
        EnvironmentConfig(post_ad_abandon_multiplier=0.5)
    with pytest.raises(ValueError):
        UserProfile(fatigue=1.5)
