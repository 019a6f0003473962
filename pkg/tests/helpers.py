"""Small constructors for hand-built logs."""
import numpy as np

from adload.action_space import NO_PREV_AD, ActionConstraints
from adload.dataset import LogData

#: one-slot "sub-feed": the catalog is exactly {no ad, ad}
TWO_ACTIONS = ActionConstraints(max_ads=1, min_position_difference=1, forbid_slot1_on_first_subfeed=False, subfeed_length=1)


def make_log(actions, propensities, contexts=None, constraints=TWO_ACTIONS, subfeed=1, user_ids=None):
    actions = np.asarray(actions, dtype=np.int64)
    n = actions.size
    contexts = np.zeros((n, 3)) if contexts is None else np.asarray(contexts, dtype=float).reshape(n, -1)
    z = np.zeros(n)
    ids = np.array([f"u{i}" for i in range(n)] if user_ids is None else list(user_ids), dtype=object)
    return LogData(
        contexts=contexts, actions=actions, subfeed=np.full(n, subfeed), prev_offset=np.full(n, NO_PREV_AD),
        propensities=np.broadcast_to(np.asarray(propensities, dtype=float), (n,)).copy(),
        sat_base=np.zeros((n, 5)), feed_abandoned=z, session_abandoned=z, rank_i=np.ones(n), rank_d=np.ones(n),
        session_minutes=z, ads=np.zeros((n, 3)), retention=np.full(n, np.nan), revenue=np.full(n, np.nan),
        user_ids=ids, session_ids=ids, timestamps=np.arange(n), constraints=constraints,
    )
