"""
Scoring a policy from logged data
=================================

Log decisions under uniform random ad placement, then estimate how a
different policy would have done. The simulator's decision-state mode
has exact expected rewards, so every estimate can be compared with the
true value.
"""
import numpy as np

from adload.estimators import RewardModelConfig, estimate_dm, estimate_dr, estimate_ipw, estimate_snips, fit_reward_model
from adload.policies import epsilon_greedy, fatigue_policy, uniform_policy
from adload.rewards import RewardMixConfig
from adload.simulator import EnvironmentConfig, OracleRewardModel, generate_decisions, reward_table, true_policy_value

env = EnvironmentConfig()
table = reward_table(env)
mix = RewardMixConfig(beta=0.8)

##############################################################################
# The target: the fatigue rule (more ads for fresh users, fewer for tired
# ones) with 30% random exploration.

target = epsilon_greedy(fatigue_policy(), 0.3)
truth = true_policy_value(target, env, mix=mix, table=table)
print(f"true value {truth.v_total:.4f} (SAT {truth.v_sat:.4f}, ads {truth.v_ads:.4f})")

##############################################################################
# One uniform log for fitting the reward model, an independent one for
# evaluation.

fit_log = generate_decisions(uniform_policy(), env, 50_000, seed=1, states=table.states)
eval_log = generate_decisions(uniform_policy(), env, 50_000, seed=2, states=table.states)
model = fit_reward_model(fit_log, RewardModelConfig(), mix)
r = eval_log.rewards(mix)

for est in (
    estimate_dm(target, model, eval_log),
    estimate_ipw(target, eval_log, rewards=r),
    estimate_snips(target, eval_log, rewards=r),
    estimate_dr(target, model, eval_log, rewards=r),
):
    print(f"{est.estimator_kind:>6}: {est.value:.4f} +/- {est.std_error:.4f}")

##############################################################################
# Double robustness: shift every reward prediction by +0.5. DM inherits the
# whole shift while DR's correction term removes it.

shifted = OracleRewardModel(env, mix, bias=0.5, table=table)
dm = estimate_dm(target, shifted, eval_log, n_bootstrap=0).value
dr = estimate_dr(target, shifted, eval_log, rewards=r, n_bootstrap=0).value
print(f"biased model: DM error {dm - truth.v_total:+.4f}, DR error {dr - truth.v_total:+.4f}")

##############################################################################
# Spread over replications: IPW and DR center on the truth, DR is tighter.

ipw, drs = [], []
for seed in range(20):
    log = generate_decisions(uniform_policy(), env, 50_000, seed=100 + seed, states=table.states)
    rr = log.rewards(mix)
    ipw.append(estimate_ipw(target, log, rewards=rr, n_bootstrap=0).value)
    drs.append(estimate_dr(target, model, log, rewards=rr, n_bootstrap=0).value)
print(f"IPW mean {np.mean(ipw):.4f} sd {np.std(ipw):.4f} | DR mean {np.mean(drs):.4f} sd {np.std(drs):.4f}")
