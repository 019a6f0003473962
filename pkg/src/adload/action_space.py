"""Combinatorial ad-slot action space for a sub-feed.

A feed fetch of ten posts is handled as two independent sub-feeds of five.
An action is the set of sub-feed slots (1-based) that carry an ad. Actions
are serialized everywhere as a bitmask where bit ``k - 1`` marks slot ``k``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from itertools import combinations
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

SUBFEED_LENGTH = 5
N_MASKS = 2**SUBFEED_LENGTH
#: sentinel used in array form for an absent previous-ad offset
NO_PREV_AD = -1


class ConfigurationError(ValueError):
    """Raised for invalid action-space constraints."""


class InvalidStateError(RuntimeError):
    """Raised when an operation needs a non-empty catalog."""


@dataclass(frozen=True, order=True)
class FeedAction:
    """Ad slots placed within one sub-feed.

    ``slots`` is kept sorted; ``subfeed_index`` is 0 for the first sub-feed
    of a fetch.
    """

    slots: Tuple[int, ...] = ()
    subfeed_index: int = 0

    def __post_init__(self) -> None:
        slots = tuple(sorted(int(s) for s in self.slots))
        if len(set(slots)) != len(slots):
            raise ValueError(f"duplicate slots in {self.slots}")
        if any(s < 1 for s in slots):
            raise ValueError(f"slots must be >= 1, got {slots}")
        if self.subfeed_index < 0:
            raise ValueError("subfeed_index must be >= 0")
        object.__setattr__(self, "slots", slots)

    @property
    def n_ads(self) -> int:
        return len(self.slots)

    @property
    def mask(self) -> int:
        return slots_to_mask(self.slots)

    @classmethod
    def from_mask(cls, mask: int, subfeed_index: int = 0) -> "FeedAction":
        return cls(mask_to_slots(mask), subfeed_index)

    def overall_positions(self, subfeed_length: int = SUBFEED_LENGTH) -> Tuple[int, ...]:
        """Positions within the whole fetch (1-based)."""
        base = self.subfeed_index * subfeed_length
        return tuple(base + s for s in self.slots)


def slots_to_mask(slots: Sequence[int]) -> int:
    mask = 0
    for s in slots:
        mask |= 1 << (int(s) - 1)
    return mask


def mask_to_slots(mask: int) -> Tuple[int, ...]:
    mask = int(mask)
    if mask < 0:
        raise ValueError(f"negative action mask {mask}")
    return tuple(k + 1 for k in range(mask.bit_length()) if mask >> k & 1)


@dataclass(frozen=True)
class ActionConstraints:
    """Pruning rules for the action space.

    ``min_position_difference`` is the smallest allowed distance between two
    consecutive ads measured on the concatenated feed, so the default of 4
    removes every pair whose positions differ by 3 or less.
    """

    max_ads: int = 2
    min_position_difference: int = 4
    forbid_slot1_on_first_subfeed: bool = True
    subfeed_length: int = SUBFEED_LENGTH

    def __post_init__(self) -> None:
        if not 1 <= self.subfeed_length <= 16:
            raise ConfigurationError(f"subfeed_length must be in 1..16, got {self.subfeed_length}")
        if not 0 <= self.max_ads <= self.subfeed_length:
            raise ConfigurationError(
                f"max_ads must be in 0..{self.subfeed_length}, got {self.max_ads}"
            )
        if self.min_position_difference < 1:
            raise ConfigurationError("min_position_difference must be >= 1")

    @property
    def n_masks(self) -> int:
        return 2**self.subfeed_length

    def normalize_offset(self, prev_last_ad_offset: Optional[int]) -> Optional[int]:
        """Collapse offsets that can no longer constrain slot 1 to ``None``."""
        if prev_last_ad_offset is None or prev_last_ad_offset < 0:
            return None
        if prev_last_ad_offset + 1 >= self.min_position_difference:
            return None
        return int(prev_last_ad_offset)

    def digest(self) -> str:
        """Stable hash used to tie serialized policies to a catalog family."""
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass(frozen=True)
class ActionCatalog:
    """Valid actions for one context key, with a dense action-id bijection."""

    actions: Tuple[FeedAction, ...]
    subfeed_index: int
    prev_last_ad_offset: Optional[int]
    constraints: ActionConstraints
    _ids: Dict[int, int] = field(default=None, repr=False, compare=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        object.__setattr__(self, "_ids", {a.mask: i for i, a in enumerate(self.actions)})

    def __len__(self) -> int:
        return len(self.actions)

    def __iter__(self) -> Iterator[FeedAction]:
        return iter(self.actions)

    def __contains__(self, action: object) -> bool:
        if isinstance(action, FeedAction):
            return action.mask in self._ids
        return int(action) in self._ids  # type: ignore[arg-type]

    @property
    def context_key(self) -> Tuple[int, Optional[int]]:
        return (self.subfeed_index, self.prev_last_ad_offset)

    @property
    def masks(self) -> np.ndarray:
        return np.array([a.mask for a in self.actions], dtype=np.int64)

    def valid_mask_vector(self) -> np.ndarray:
        """Boolean vector over all bitmasks, True where the action is valid."""
        valid = np.zeros(self.constraints.n_masks, dtype=bool)
        valid[self.masks] = True
        return valid

    def encode(self, action: FeedAction | int) -> int:
        mask = action.mask if isinstance(action, FeedAction) else int(action)
        try:
            return self._ids[mask]
        except KeyError:
            raise KeyError(f"action {mask_to_slots(mask)} not in catalog {self.context_key}") from None

    def decode(self, action_id: int) -> FeedAction:
        if not 0 <= action_id < len(self.actions):
            raise IndexError(f"action id {action_id} out of range for catalog of {len(self)}")
        return self.actions[action_id]


def _satisfies(
    slots: Tuple[int, ...],
    constraints: ActionConstraints,
    subfeed_index: int,
    prev_last_ad_offset: Optional[int],
) -> bool:
    if len(slots) > constraints.max_ads:
        return False
    if any(not 1 <= s <= constraints.subfeed_length for s in slots):
        return False
    if not slots:
        return True
    gap = constraints.min_position_difference
    if any(b - a < gap for a, b in zip(slots, slots[1:])):
        return False
    if constraints.forbid_slot1_on_first_subfeed and subfeed_index == 0 and slots[0] == 1:
        return False
    # distance from the previous sub-feed's last ad to slot s is offset + s
    if prev_last_ad_offset is not None and prev_last_ad_offset >= 0:
        if prev_last_ad_offset + slots[0] < gap:
            return False
    return True


@lru_cache(maxsize=None)
def _enumerate_cached(
    constraints: ActionConstraints, subfeed_index: int, offset: Optional[int]
) -> ActionCatalog:
    positions = range(1, constraints.subfeed_length + 1)
    actions = [
        FeedAction(combo, subfeed_index)
        for k in range(constraints.max_ads + 1)
        for combo in combinations(positions, k)
        if _satisfies(combo, constraints, subfeed_index, offset)
    ]
    return ActionCatalog(tuple(actions), subfeed_index, offset, constraints)


def enumerate_actions(
    constraints: ActionConstraints = ActionConstraints(),
    subfeed_index: int = 0,
    prev_last_ad_offset: Optional[int] = None,
) -> ActionCatalog:
    """Enumerate the valid actions for a sub-feed context.

    Actions are ordered by number of ads, then lexicographically by slots,
    so the empty action always has id 0.

    Parameters
    ----------
    constraints : ActionConstraints
    subfeed_index : int
        0 for the first sub-feed of a fetch.
    prev_last_ad_offset : int, optional
        Number of posts between the most recent earlier ad and slot 1 of this
        sub-feed (the "ad gap" feature). ``None`` when no earlier ad exists.
    """
    if subfeed_index < 0:
        raise ConfigurationError("subfeed_index must be >= 0")
    offset = constraints.normalize_offset(prev_last_ad_offset)
    return _enumerate_cached(constraints, min(int(subfeed_index), 1), offset)


def validate_action(
    action: FeedAction,
    constraints: ActionConstraints = ActionConstraints(),
    prev_last_ad_offset: Optional[int] = None,
) -> bool:
    """True iff ``action`` belongs to the catalog of its context."""
    return _satisfies(action.slots, constraints, action.subfeed_index, prev_last_ad_offset)


def uniform_propensity(catalog: ActionCatalog) -> float:
    if len(catalog) == 0:
        raise InvalidStateError("uniform propensity of an empty catalog is undefined")
    return 1.0 / len(catalog)


def catalog_for_key(
    constraints: ActionConstraints, subfeed_index: int, prev_offset: int
) -> ActionCatalog:
    """Catalog lookup using the array sentinel ``NO_PREV_AD`` for a missing offset."""
    return enumerate_actions(
        constraints, subfeed_index, None if prev_offset < 0 else int(prev_offset)
    )


def group_context_keys(subfeed_index, prev_offset) -> Tuple[np.ndarray, np.ndarray]:
    """Distinct ``(min(subfeed, 1), prev_offset)`` pairs and each row's group index.

    Returns ``(keys, inverse)`` with ``keys`` of shape ``(k, 2)`` sorted by
    offset then sub-feed, and ``keys[inverse]`` reproducing the rows.
    """
    subfeed_index = np.minimum(np.asarray(subfeed_index, dtype=np.int64), 1)
    prev_offset = np.asarray(prev_offset, dtype=np.int64)
    # one integer per pair; a 1-D unique is much cheaper than a row-wise one
    uniq, inverse = np.unique(2 * prev_offset + subfeed_index, return_inverse=True)
    return np.stack([uniq % 2, uniq // 2], axis=1), inverse.reshape(-1)


def valid_action_matrix(
    constraints: ActionConstraints, subfeed_index: np.ndarray, prev_offset: np.ndarray
) -> np.ndarray:
    """Row-wise validity over all bitmasks, shape ``(n, n_masks)``."""
    keys, inverse = group_context_keys(subfeed_index, prev_offset)
    table = np.zeros((len(keys), constraints.n_masks), dtype=bool)
    for k, (sf, off) in enumerate(keys):
        table[k] = catalog_for_key(constraints, int(sf), int(off)).valid_mask_vector()
    return table[inverse]


def catalog_sizes(
    constraints: ActionConstraints, subfeed_index: np.ndarray, prev_offset: np.ndarray
) -> np.ndarray:
    return valid_action_matrix(constraints, subfeed_index, prev_offset).sum(axis=1)
