import json
import warnings

import numpy as np
import pytest

from adload.action_space import ActionConstraints
from adload.dataset import (
    CONTEXT_DIM,
    InsufficientDataWarning,
    LogData,
    LogFormatError,
    arithmetic_mean_test,
    harmonic_mean_test,
    harmonic_statistic_by_reference,
    harmonic_statistic_closed_form,
    harmonic_statistic_sampled,
    read_log,
    split_by_user,
    validate_propensities,
    write_log,
)
from adload.policies import uniform_policy
from adload.simulator import FULL_CATALOG, generate_decisions, generate_log, sampler_fixture_log


@pytest.fixture(scope="module")
def session_log(env):
    return generate_log(uniform_policy(), env, n_users=40, seed=5)


def _two_action_log(n, p_claim, p_true, seed):
    """Single-ad catalog of size 2: {} and one slot."""
    c = ActionConstraints(max_ads=1, min_position_difference=1, forbid_slot1_on_first_subfeed=False)
    log = sampler_fixture_log(n, seed, constraints=FULL_CATALOG)
    rng = np.random.default_rng(seed)
    actions = np.where(rng.random(n) < p_true, 0, 1)
    return LogData(
        **{k: getattr(log, k) for k in ("contexts", "subfeed", "prev_offset", "sat_base", "feed_abandoned",
                                          "session_abandoned", "rank_i", "rank_d", "session_minutes", "ads",
                                          "retention", "revenue", "user_ids", "session_ids", "timestamps")},
        actions=actions,
        propensities=np.full(n, p_claim),
        constraints=c,
    )


def test_round_trip_preserves_records(tmp_path, session_log):
    path = tmp_path / "log.jsonl"
    write_log(path, session_log)
    back = read_log(path)
    assert len(back) == len(session_log) > 100
    assert back.to_records() == session_log.to_records()
    assert back.constraints == session_log.constraints
    write_log(tmp_path / "again.jsonl", back)
    assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()


def test_round_trip_thousand_decision_records(tmp_path, env):
    log = generate_decisions(uniform_policy(), env, 1000, seed=2)
    write_log(tmp_path / "d.jsonl", log)
    back = read_log(tmp_path / "d.jsonl")
    assert back.to_records() == log.to_records()
    np.testing.assert_array_equal(back.contexts, log.contexts)


def test_malformed_line_is_named(tmp_path, env):
    log = generate_decisions(uniform_policy(), env, 100, seed=3)
    path = tmp_path / "bad.jsonl"
    write_log(path, log)
    lines = path.read_text().splitlines()
    lines[42] = lines[42][:-20]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(LogFormatError, match="line 43"):
        read_log(path)
    lenient = read_log(path, lenient=True)
    assert len(lenient) == 99
    assert [e[0] for e in lenient.load_errors] == [43]


def test_action_id_mismatch_is_malformed(tmp_path, env):
    log = generate_decisions(uniform_policy(), env, 5, seed=3)
    path = tmp_path / "ids.jsonl"
    write_log(path, log)
    lines = path.read_text().splitlines()
    rec = json.loads(lines[1])
    rec["action_id"] = rec["action_id"] + 1 if rec["action_id"] == 0 else 0
    lines[1] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(LogFormatError, match="line 2"):
        read_log(path)


def test_empty_file_gives_empty_log(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    log = read_log(path)
    assert len(log) == 0
    assert log.contexts.shape == (0, CONTEXT_DIM)


def test_schema_mismatch(tmp_path):
    path = tmp_path / "v0.jsonl"
    path.write_text(json.dumps({"schema_version": "adlog-v0"}) + "\n")
    with pytest.raises(LogFormatError, match="schema"):
        read_log(path)


def test_split_single_user_lands_on_one_side(session_log):
    one = session_log.subset(np.flatnonzero(session_log.user_ids == session_log.user_ids[0]))
    tr, va = split_by_user(one, 0.5, seed=1)
    assert {len(tr), len(va)} == {0, len(one)}


def test_split_is_deterministic_and_user_level(session_log):
    a = split_by_user(session_log, 0.3, seed=9)
    b = split_by_user(session_log, 0.3, seed=9)
    assert a[1].to_records() == b[1].to_records()
    assert not set(a[0].user_ids) & set(a[1].user_ids)
    assert len(a[0]) + len(a[1]) == len(session_log)


def test_split_share_close_to_fraction():
    n = 10_000
    log = sampler_fixture_log(n, 0)
    tr, va = split_by_user(log, 0.2, seed=4)
    assert abs(len(va) / n - 0.2) <= 0.02


def test_split_rejects_bad_fraction(session_log):
    with pytest.raises(ValueError):
        split_by_user(session_log, 0.0)


# --------------------------------------------------------------------------
# propensity tests


def test_arithmetic_passes_uniform_five_action_log(env):
    log = generate_decisions(uniform_policy(), env, 50_000, seed=11)
    passed, skipped, tests = arithmetic_mean_test(log)
    assert passed and not skipped
    assert len(tests) > 5


def test_arithmetic_fails_on_oversampled_action():
    c = ActionConstraints()
    log = sampler_fixture_log(50_000, 7, boosted_mask=0, boost=2.0, constraints=c)
    passed, _, tests = arithmetic_mean_test(log)
    assert not passed
    failing = [t for t in tests if not t.passed]
    assert failing[0].action_id == 0 and failing[0].action_mask == 0


def test_arithmetic_skips_tiny_logs(env):
    log = generate_decisions(uniform_policy(), env, 10, seed=1)
    with pytest.warns(InsufficientDataWarning):
        passed, skipped, tests = arithmetic_mean_test(log)
    assert skipped and tests == ()


def test_harmonic_closed_form_two_actions_is_exactly_two():
    log = _two_action_log(1000, 0.5, 0.5, 0)
    assert harmonic_statistic_closed_form(log) == 2.0


def test_harmonic_sampled_truthful_uniform():
    log = sampler_fixture_log(100_000, 21)
    stat = harmonic_statistic_sampled(log, np.random.default_rng(99))
    assert 1.97 <= stat <= 2.03


def test_harmonic_default_flags_corrupted_sampler():
    clean = sampler_fixture_log(100_000, 21)
    bad = sampler_fixture_log(100_000, 21, boosted_mask=0, boost=2.0)
    s_clean, ok_clean = harmonic_mean_test(clean)
    s_bad, ok_bad = harmonic_mean_test(bad)
    assert ok_clean and abs(s_clean - 2) <= 0.03
    assert not ok_bad and abs(s_bad - 2) > 0.05


def test_pooled_variants_cannot_see_uniform_claims():
    # with propensities that claim uniform logging the pooled statistics stay at 2
    bad = sampler_fixture_log(100_000, 21, boosted_mask=0, boost=2.0)
    assert harmonic_statistic_closed_form(bad) == pytest.approx(2.0, abs=1e-12)
    assert harmonic_mean_test(bad, method="sampled")[1]


def test_per_reference_statistic_points_at_the_boosted_action():
    bad = sampler_fixture_log(100_000, 3, boosted_mask=5, boost=2.0)
    by_ref = harmonic_statistic_by_reference(bad)
    assert max(by_ref, key=lambda m: abs(by_ref[m] - 2)) == 5
    assert harmonic_mean_test(bad, method="per_action")[0] == pytest.approx(by_ref[5])


def test_harmonic_deviation_shrinks_with_n():
    devs = []
    for n in (1_000, 10_000, 100_000):
        reps = [abs(harmonic_mean_test(sampler_fixture_log(n, s))[0] - 2) for s in range(5)]
        devs.append(np.mean(reps))
    assert devs[0] > devs[1] > devs[2]


def test_harmonic_excludes_deterministic_records():
    log = _two_action_log(100, 0.5, 0.5, 1)
    log = log.with_propensities(np.where(np.arange(100) < 10, 1.0, 0.5))
    with pytest.warns(UserWarning, match="deterministic"):
        assert harmonic_statistic_closed_form(log) == 2.0


def test_harmonic_unknown_method():
    with pytest.raises(ValueError):
        harmonic_mean_test(sampler_fixture_log(10, 0), method="median")


def test_validate_propensities_report(env):
    report = validate_propensities(generate_decisions(uniform_policy(), env, 20_000, seed=4))
    assert report.passed and report.n_records == 20_000
    assert "harmonic mean test" in report.summary()
    bad = validate_propensities(sampler_fixture_log(100_000, 1, boost=2.0))
    assert not bad.passed and not bad.arithmetic_pass and not bad.harmonic_pass


def test_uniform_session_logs_pass_both_tests(env):
    log = generate_log(uniform_policy(), env, n_users=800, seed=17)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", InsufficientDataWarning)
        report = validate_propensities(log)
    assert report.arithmetic_pass
    assert report.harmonic_pass


def test_logdata_rejects_invalid_propensities():
    log = sampler_fixture_log(5, 0)
    with pytest.raises(ValueError):
        log.with_propensities(np.zeros(5))
