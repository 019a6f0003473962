"""
Catching a broken logger
========================

Off-policy estimates are only as good as the logged propensities. Two
checks compare what the logger claims with what it did: per-action counts
(arithmetic test) and harmonic means of propensity ratios (harmonic test,
expected value 2 for a truthful log).
"""
from adload.dataset import validate_propensities
from adload.policies import uniform_policy
from adload.simulator import EnvironmentConfig, generate_decisions, sampler_fixture_log

##############################################################################
# A clean log from the simulator passes both checks.

clean = generate_decisions(uniform_policy(), EnvironmentConfig(), 50_000, seed=0)
print(validate_propensities(clean).summary())

##############################################################################
# A sampler that draws the empty action twice as often as it claims. The
# propensities in the file still say "uniform over 32 actions".

broken = sampler_fixture_log(100_000, seed=1, boosted_mask=0, boost=2.0)
report = validate_propensities(broken)
print()
print(report.summary())
print("passed:", report.passed)
