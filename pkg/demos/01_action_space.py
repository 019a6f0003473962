"""
Ad placements as bandit arms
============================

A sub-feed has five posts and an action is the set of slots that carry an
ad. Placement rules prune the 32 subsets down to a small catalog that
depends on the sub-feed and on how far back the previous ad was.
"""
from adload.action_space import (
    ActionConstraints,
    FeedAction,
    enumerate_actions,
    uniform_propensity,
    validate_action,
)

##############################################################################
# Without pruning, up to two ads give 1 + 5 + 10 = 16 placements.

loose = ActionConstraints(max_ads=2, min_position_difference=1, forbid_slot1_on_first_subfeed=False)
print("no pruning:", len(enumerate_actions(loose, 0)), "actions")

##############################################################################
# The default rules keep ads four positions apart and keep slot 1 of the
# first sub-feed ad-free. On the first sub-feed only single ads survive.

rules = ActionConstraints()
first = enumerate_actions(rules, 0)
print("first sub-feed:", [a.slots for a in first])
print("uniform logging propensity:", uniform_propensity(first))

##############################################################################
# On the second sub-feed the previous ad matters. Right after an ad in slot
# 5 (offset 0) the next one must wait until slot 4; with no recent ad the
# pair {1, 5} becomes possible.

for offset in (0, 1, 2, None):
    cat = enumerate_actions(rules, 1, offset)
    print(f"second sub-feed, offset {offset}:", [a.slots for a in cat])

##############################################################################
# Actions travel through logs as bitmasks (bit k-1 marks slot k).

a = FeedAction((1, 5), subfeed_index=1)
print("mask of", a.slots, "=", a.mask, "| valid after offset 5:", validate_action(a, rules, 5))
