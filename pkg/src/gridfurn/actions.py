"""Action vocabulary and coordination rules for jointly carrying an object.

Every agent picks one of 13 actions per step. A multi-action (one action per
agent) is *coordinated* when all actions share a modality and additionally:

* NAV: at most one agent does something other than ``Pass``;
* MWO / MO: every agent names the same direction in the global frame;
* RO: every agent rotates the object (there is only one such action).

Headings are the four compass directions, numbered clockwise from north, so
that an egocentric direction can be turned into a global one with modular
addition.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Action",
    "Modality",
    "Heading",
    "GlobalDirection",
    "NUM_ACTIONS",
    "CoordinationTensor",
    "modality_of",
    "globalize",
    "is_coordinated",
    "at_most_one_mover",
    "build_coordination_tensor",
    "coordinated_fraction",
    "relative_orientation",
]


class Modality(enum.Enum):
    NAV = "NAV"
    MWO = "MWO"
    MO = "MO"
    RO = "RO"


class Action(enum.IntEnum):
    MoveAhead = 0
    RotateLeft = 1
    RotateRight = 2
    Pass = 3
    MoveWithObjectAhead = 4
    MoveWithObjectRight = 5
    MoveWithObjectLeft = 6
    MoveWithObjectBack = 7
    MoveObjectAhead = 8
    MoveObjectRight = 9
    MoveObjectLeft = 10
    MoveObjectBack = 11
    RotateObjectRight = 12


NUM_ACTIONS = len(Action)


class Heading(enum.IntEnum):
    """Facing direction, counted in clockwise quarter turns from north."""

    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3

    @property
    def degrees(self) -> int:
        return 90 * int(self)

    def rotated(self, quarter_turns: int) -> "Heading":
        return Heading((int(self) + quarter_turns) % 4)


# Same numbering as Heading; kept separate so signatures say what they mean.
GlobalDirection = Heading

_MODALITY = {
    **{a: Modality.NAV for a in (Action.MoveAhead, Action.RotateLeft, Action.RotateRight, Action.Pass)},
    **{a: Modality.MWO for a in Action if a.name.startswith("MoveWithObject")},
    **{a: Modality.MO for a in Action if a.name.startswith("MoveObject")},
    Action.RotateObjectRight: Modality.RO,
}

# Egocentric direction of MWO/MO actions as clockwise quarter turns from "ahead".
_EGO_OFFSET = {"Ahead": 0, "Right": 1, "Back": 2, "Left": 3}
_DIRECTION_OFFSET = {
    a: _EGO_OFFSET[a.name.replace("MoveWithObject", "").replace("MoveObject", "")]
    for a in Action
    if _MODALITY[a] in (Modality.MWO, Modality.MO)
}
_BY_MODALITY_AND_OFFSET = {(_MODALITY[a], off): a for a, off in _DIRECTION_OFFSET.items()}

# Lookup tables used by the vectorised tensor builder.
_MODALITY_INDEX = np.array([list(Modality).index(_MODALITY[a]) for a in Action])
_OFFSET_TABLE = np.array([_DIRECTION_OFFSET.get(a, -1) for a in Action])


def modality_of(action: Action) -> Modality:
    return _MODALITY[Action(action)]


def egocentric_offset(action: Action) -> Optional[int]:
    """Clockwise quarter turns from 'ahead' for directional object actions."""
    return _DIRECTION_OFFSET.get(Action(action))


def directional_action(modality: Modality, offset: int) -> Action:
    """Inverse of :func:`egocentric_offset` within the MWO or MO modality."""
    return _BY_MODALITY_AND_OFFSET[(modality, offset % 4)]


def globalize(action: Action, heading: Heading) -> Optional[GlobalDirection]:
    """Global direction named by an MWO/MO action, ``None`` for other actions."""
    offset = _DIRECTION_OFFSET.get(Action(action))
    if offset is None:
        return None
    return GlobalDirection((int(heading) + offset) % 4)


NavRule = Callable[[Sequence[Action]], bool]


def at_most_one_mover(actions: Sequence[Action]) -> bool:
    """Navigation rule: every agent except at most one passes."""
    return sum(a != Action.Pass for a in actions) <= 1


def is_coordinated(
    ma: Sequence[Action],
    headings: Sequence[Heading],
    nav_rule: NavRule = at_most_one_mover,
) -> bool:
    if len(ma) != len(headings):
        raise ValueError(f"{len(ma)} actions for {len(headings)} headings")
    modalities = {modality_of(a) for a in ma}
    if len(modalities) != 1:
        return False
    (modality,) = modalities
    if modality is Modality.NAV:
        return nav_rule([Action(a) for a in ma])
    if modality is Modality.RO:
        return True
    return len({globalize(a, h) for a, h in zip(ma, headings)}) == 1


def relative_orientation(headings: Sequence[Heading]) -> Tuple[int, ...]:
    """Headings expressed relative to the first agent's heading."""
    h0 = int(headings[0])
    return tuple((int(h) - h0) % 4 for h in headings)


@dataclass(frozen=True)
class CoordinationTensor:
    """Boolean tensor of shape ``(13,) * N`` marking coordinated multi-actions."""

    mask: np.ndarray
    headings: Tuple[Heading, ...] = field(default=())

    @property
    def n_agents(self) -> int:
        return self.mask.ndim

    def __getitem__(self, ma) -> bool:
        return bool(self.mask[tuple(int(a) for a in ma)])

    def as_float(self, dtype=np.float64) -> np.ndarray:
        return self.mask.astype(dtype)


@lru_cache(maxsize=None)
def _tensor_for_orientation(rel: Tuple[int, ...], nav_rule: NavRule) -> np.ndarray:
    n = len(rel)
    if nav_rule is at_most_one_mover:
        mask = _fast_tensor(rel)
    else:
        mask = np.zeros((NUM_ACTIONS,) * n, dtype=bool)
        headings = [Heading(r) for r in rel]
        for idx in itertools.product(range(NUM_ACTIONS), repeat=n):
            mask[idx] = is_coordinated([Action(i) for i in idx], headings, nav_rule)
    mask.setflags(write=False)
    return mask


def _fast_tensor(rel: Tuple[int, ...]) -> np.ndarray:
    n = len(rel)
    grids = np.meshgrid(*([np.arange(NUM_ACTIONS)] * n), indexing="ij")
    mods = [_MODALITY_INDEX[g] for g in grids]
    same = np.ones_like(grids[0], dtype=bool)
    for m in mods[1:]:
        same &= m == mods[0]
    nav = mods[0] == list(Modality).index(Modality.NAV)
    movers = sum((g != Action.Pass).astype(int) for g in grids)
    nav_ok = nav & (movers <= 1)

    directional = np.isin(mods[0], [list(Modality).index(Modality.MWO), list(Modality).index(Modality.MO)])
    gdirs = [(_OFFSET_TABLE[g] + r) % 4 for g, r in zip(grids, rel)]
    dir_ok = directional.copy()
    for gd in gdirs[1:]:
        dir_ok &= gd == gdirs[0]
    ro_ok = mods[0] == list(Modality).index(Modality.RO)
    return same & (nav_ok | dir_ok | ro_ok)


def build_coordination_tensor(
    headings: Sequence[Heading], nav_rule: NavRule = at_most_one_mover
) -> CoordinationTensor:
    if len(headings) < 2:
        raise ValueError("coordination needs at least two agents")
    headings = tuple(Heading(h) for h in headings)
    mask = _tensor_for_orientation(relative_orientation(headings), nav_rule)
    return CoordinationTensor(mask=mask, headings=headings)


def coordinated_fraction(S: CoordinationTensor | np.ndarray) -> float:
    mask = S.mask if isinstance(S, CoordinationTensor) else np.asarray(S)
    return float(np.count_nonzero(mask)) / mask.size
