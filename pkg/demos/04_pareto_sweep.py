"""
Trading satisfaction against ads revenue
========================================

Train softmax policies with the DR objective for several reward mixes
beta and place them next to the baselines. Losses are calibrated so the
no-ads policy has 0% SAT loss and the max-ads policy 0% ads loss.
"""
import dataclasses
import warnings

from adload.harness import ExperimentConfig, HarnessConfig, non_dominated_rows, run_pareto

warnings.simplefilter("ignore", UserWarning)

##############################################################################
# A slightly smaller run than the defaults keeps this under a minute.

config = dataclasses.replace(HarnessConfig(), experiment=ExperimentConfig(n_records=30_000, eval_records=30_000))
result = run_pareto(config)
front = non_dominated_rows(result.rows)

print(f"{'policy':>16} {'beta':>5} {'SAT loss':>9} {'ads loss':>9}")
for row in sorted(result.rows, key=lambda r: r.ads_loss_pct):
    mark = "*" if row.policy_name in front else " "
    beta = "" if row.beta is None else f"{row.beta:.1f}"
    print(f"{mark}{row.policy_name:>15} {beta:>5} {row.sat_loss_pct:8.1f}% {row.ads_loss_pct:8.1f}%")

##############################################################################
# The same comparison from DR estimates on an independent uniform log,
# which is what one would have without a simulator.

print()
for row in result.estimate_rows:
    if row.beta is not None or row.policy_name == "fatigue":
        print(f"{row.policy_name:>16} estimated SAT loss {row.sat_loss_pct:6.1f}%  ads loss {row.ads_loss_pct:6.1f}%")
