"""Ad-load allocation as a contextual bandit.

Modules: ``action_space`` (valid ad placements), ``rewards`` (satisfaction
and ads rewards, scalarization fitting), ``dataset`` (logged feedback,
propensity tests), ``estimators`` (DM, IPW, SNIPS, DR), ``policies``
(baselines and off-policy learning), ``simulator`` (ground-truth
environment) and ``harness`` (experiments and reporting).
"""
from .action_space import ActionConstraints, FeedAction, enumerate_actions
from .rewards import DiscountParams, RewardMixConfig, RewardWeights

__all__ = [
    "ActionConstraints",
    "DiscountParams",
    "FeedAction",
    "RewardMixConfig",
    "RewardWeights",
    "enumerate_actions",
]
__version__ = "0.1.0"
