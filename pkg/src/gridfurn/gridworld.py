"""Top-down gridworld in which agents carry a lifted object to a goal cell.

Coordinates are ``(x, y)`` with ``x`` the column and ``y`` the row; row 0 is
the northern edge of the map, so moving north decreases ``y``. One cell is
0.25 m.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .actions import (
    Action,
    Heading,
    Modality,
    build_coordination_tensor,
    globalize,
    modality_of,
)

__all__ = [
    "CELL_METERS",
    "REACH_METERS",
    "DEFAULT_MAX_STEPS",
    "MapError",
    "InitializationError",
    "EpisodeDoneError",
    "GridMap",
    "AgentPose",
    "ObjectPose",
    "WorldState",
    "StepOutcome",
    "GridWorld",
    "parse_map",
    "load_map",
    "observe",
    "manhattan_to_goal",
    "OBS_CHANNELS",
    "observe_all",
]

CELL_METERS = 0.25
REACH_METERS = 0.76
DEFAULT_MAX_STEPS = 250
DEFAULT_OBS_RADIUS = 7
OBS_CHANNELS = ("agent_navigable", "object_navigable", "other_agent", "object", "goal")

# Reach threshold in squared cell units: (0.76 / 0.25) ** 2 = 9.2416.
_REACH_SQ = (REACH_METERS / CELL_METERS) ** 2

# Rewards in hundredths so that episode returns are exact.
STEP_PENALTY_CENTS = -1
FAILURE_PENALTY_CENTS = -2
PROGRESS_BONUS_CENTS = 100

_DIR_VECTORS = {
    Heading.NORTH: (0, -1),
    Heading.EAST: (1, 0),
    Heading.SOUTH: (0, 1),
    Heading.WEST: (-1, 0),
}

_MAP_ALPHABET = {
    ".": (True, True),
    "#": (False, False),
    "a": (True, False),
    "o": (False, True),
    "G": (True, True),
}


class MapError(ValueError):
    pass


class InitializationError(RuntimeError):
    pass


class EpisodeDoneError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class GridMap:
    """Static map layout. Flag arrays are indexed ``[y, x]``."""

    agent_navigable: np.ndarray
    object_navigable: np.ndarray
    goal: Tuple[int, int]
    name: str = ""
    text: str = ""

    def __post_init__(self):
        if self.agent_navigable.shape != self.object_navigable.shape:
            raise MapError("flag arrays differ in shape")
        if self.width < 3 or self.height < 3:
            raise MapError(f"map must be at least 3x3, got {self.width}x{self.height}")
        gx, gy = self.goal
        if not self.in_bounds(gx, gy) or not self.object_navigable[gy, gx]:
            raise MapError(f"goal {self.goal} is not object-navigable")
        self.agent_navigable.setflags(write=False)
        self.object_navigable.setflags(write=False)

    @property
    def height(self) -> int:
        return self.agent_navigable.shape[0]

    @property
    def width(self) -> int:
        return self.agent_navigable.shape[1]

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def agent_ok(self, x: int, y: int) -> bool:
        return self.in_bounds(x, y) and bool(self.agent_navigable[y, x])

    def object_ok(self, x: int, y: int) -> bool:
        return self.in_bounds(x, y) and bool(self.object_navigable[y, x])


def parse_map(text: str, name: str = "") -> GridMap:
    """Parse an ASCII map.

    Alphabet: ``.`` navigable by both, ``#`` by neither, ``a`` agents only,
    ``o`` object only, ``G`` the goal (navigable by both). Blank lines at
    either end are ignored.
    """
    rows = [line.rstrip("\r") for line in text.strip("\n").split("\n")]
    rows = [r for r in rows]
    if not rows or not rows[0]:
        raise MapError("empty map")
    width = len(rows[0])
    goal = None
    agent_nav = np.zeros((len(rows), width), dtype=bool)
    object_nav = np.zeros((len(rows), width), dtype=bool)
    for y, row in enumerate(rows):
        if len(row) != width:
            raise MapError(f"row {y} has length {len(row)}, expected {width} (map is not rectangular)")
        for x, ch in enumerate(row):
            if ch not in _MAP_ALPHABET:
                raise MapError(f"unknown map character {ch!r} at ({x}, {y})")
            agent_nav[y, x], object_nav[y, x] = _MAP_ALPHABET[ch]
            if ch == "G":
                if goal is not None:
                    raise MapError(f"duplicate goal at ({x}, {y}); first goal at {goal}")
                goal = (x, y)
    if goal is None:
        raise MapError("map has no goal 'G'")
    return GridMap(agent_nav, object_nav, goal, name=name, text="\n".join(rows))


def load_map(path) -> GridMap:
    from pathlib import Path

    path = Path(path)
    return parse_map(path.read_text(), name=path.stem)


@dataclass(frozen=True)
class AgentPose:
    x: int
    y: int
    heading: Heading

    @property
    def cell(self) -> Tuple[int, int]:
        return (self.x, self.y)


@dataclass(frozen=True)
class ObjectPose:
    """Lifted object; ``(x, y)`` is the top-left cell of its footprint."""

    x: int
    y: int
    rotation: int = 0
    size: Tuple[int, int] = (1, 1)

    @property
    def extent(self) -> Tuple[int, int]:
        w, h = self.size
        return (h, w) if self.rotation % 2 else (w, h)

    def cells(self) -> List[Tuple[int, int]]:
        w, h = self.extent
        return [(self.x + dx, self.y + dy) for dy in range(h) for dx in range(w)]

    def translated(self, dx: int, dy: int) -> "ObjectPose":
        return replace(self, x=self.x + dx, y=self.y + dy)

    def rotated_clockwise(self) -> "ObjectPose":
        return replace(self, rotation=(self.rotation + 1) % 4)


@dataclass(frozen=True)
class WorldState:
    map: GridMap = field(repr=False)
    agents: Tuple[AgentPose, ...]
    obj: ObjectPose
    step_count: int = 0
    best_sq_distance: int = 0
    done: bool = False
    done_reason: Optional[str] = None
    max_steps: int = DEFAULT_MAX_STEPS

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def best_distance(self) -> float:
        """Smallest object-to-goal distance reached so far, in meters."""
        return math.sqrt(self.best_sq_distance) * CELL_METERS

    @property
    def headings(self) -> Tuple[Heading, ...]:
        return tuple(a.heading for a in self.agents)

    def sq_distance_to_goal(self) -> int:
        gx, gy = self.map.goal
        return (self.obj.x - gx) ** 2 + (self.obj.y - gy) ** 2

    def distance_to_goal(self) -> float:
        """Euclidean object-anchor-to-goal distance in meters."""
        return math.sqrt(self.sq_distance_to_goal()) * CELL_METERS

    def object_covers_goal(self) -> bool:
        return self.map.goal in self.obj.cells()


@dataclass(frozen=True)
class StepOutcome:
    success: Tuple[bool, ...]
    reward_cents: Tuple[int, ...]
    done: bool
    done_reason: Optional[str]

    @property
    def rewards(self) -> Tuple[float, ...]:
        return tuple(c / 100 for c in self.reward_cents)


def manhattan_to_goal(state: WorldState) -> int:
    gx, gy = state.map.goal
    return abs(state.obj.x - gx) + abs(state.obj.y - gy)


def _within_reach(cell: Tuple[int, int], footprint: Sequence[Tuple[int, int]]) -> bool:
    x, y = cell
    return min((x - ox) ** 2 + (y - oy) ** 2 for ox, oy in footprint) <= _REACH_SQ


def _faces(pose_cell: Tuple[int, int], heading: Heading, footprint) -> bool:
    # Object lies in the open half-plane in front of the agent.
    x, y = pose_cell
    ox, oy = min(footprint, key=lambda c: (c[0] - x) ** 2 + (c[1] - y) ** 2)
    dx, dy = _DIR_VECTORS[heading]
    return (ox - x) * dx + (oy - y) * dy > 0


class GridWorld:
    """Environment wrapper holding the static configuration.

    ``reset`` and ``step`` are pure functions of their inputs; the instance only
    stores the map and settings.
    """

    def __init__(
        self,
        grid_map: GridMap,
        n_agents: int = 2,
        max_steps: int = DEFAULT_MAX_STEPS,
        object_size: Tuple[int, int] = (1, 1),
        double_positive_rewards: Optional[bool] = None,
        max_attempts: int = 1000,
    ):
        if n_agents < 2:
            raise ValueError("n_agents must be >= 2")
        self.map = grid_map
        self.n_agents = n_agents
        self.max_steps = max_steps
        self.object_size = tuple(object_size)
        if double_positive_rewards is None:
            double_positive_rewards = n_agents == 3
        self.double_positive_rewards = double_positive_rewards
        self.max_attempts = max_attempts
        self._object_placements = self._enumerate_object_placements()

    def _enumerate_object_placements(self) -> List[ObjectPose]:
        m = self.map
        placements = []
        for rotation in range(4):
            for y in range(m.height):
                for x in range(m.width):
                    pose = ObjectPose(x, y, rotation, self.object_size)
                    cells = pose.cells()
                    if m.goal in cells:
                        continue
                    if all(m.object_ok(cx, cy) for cx, cy in cells):
                        placements.append(pose)
        return placements

    # -- reset ---------------------------------------------------------------

    def reset(self, seed: int) -> WorldState:
        rng = np.random.default_rng(seed)
        return reset(self.map, rng, self.n_agents, self)

    # -- step ----------------------------------------------------------------

    def step(self, state: WorldState, ma: Sequence[Action]) -> Tuple[WorldState, StepOutcome]:
        return step(state, ma, self.double_positive_rewards)


def reset(
    grid_map: GridMap,
    rng: np.random.Generator,
    n_agents: int,
    world: Optional[GridWorld] = None,
) -> WorldState:
    """Randomized initial placement.

    The object anchor is drawn uniformly from valid placements (full footprint
    support, not already covering the goal); agents are then drawn from the
    free agent-navigable cells within reach and given a heading that faces the
    object.
    """
    if world is None:
        world = GridWorld(grid_map, n_agents)
    placements = world._object_placements
    if not placements:
        raise InitializationError("no valid object placement on this map")
    for _ in range(world.max_attempts):
        obj = placements[int(rng.integers(len(placements)))]
        footprint = obj.cells()
        occupied = set(footprint)
        candidates = [
            (x, y)
            for y in range(grid_map.height)
            for x in range(grid_map.width)
            if grid_map.agent_navigable[y, x] and (x, y) not in occupied and _within_reach((x, y), footprint)
        ]
        if len(candidates) < n_agents:
            continue
        chosen = rng.choice(len(candidates), size=n_agents, replace=False)
        agents = []
        for idx in chosen:
            cell = candidates[int(idx)]
            facing = [h for h in Heading if _faces(cell, h, footprint)]
            heading = facing[int(rng.integers(len(facing)))]
            agents.append(AgentPose(cell[0], cell[1], heading))
        state = WorldState(
            map=grid_map,
            agents=tuple(agents),
            obj=obj,
            max_steps=world.max_steps,
        )
        return replace(state, best_sq_distance=state.sq_distance_to_goal())
    raise InitializationError(f"no valid placement found after {world.max_attempts} attempts")


def _layout_ok(grid_map: GridMap, agents: Sequence[AgentPose], obj: ObjectPose) -> bool:
    footprint = obj.cells()
    if not all(grid_map.object_ok(x, y) for x, y in footprint):
        return False
    cells = [a.cell for a in agents]
    if len(set(cells)) != len(cells) or set(cells) & set(footprint):
        return False
    return all(grid_map.agent_ok(*c) and _within_reach(c, footprint) for c in cells)


def _apply(state: WorldState, ma: Sequence[Action]):
    """Return the new (agents, obj) if the coordinated multi-action succeeds, else None."""
    modality = modality_of(ma[0])
    agents, obj = state.agents, state.obj
    if modality is Modality.NAV:
        movers = [i for i, a in enumerate(ma) if a != Action.Pass]
        if not movers:
            return agents, obj
        (i,) = movers
        pose = agents[i]
        if ma[i] == Action.RotateLeft:
            new = replace(pose, heading=pose.heading.rotated(-1))
        elif ma[i] == Action.RotateRight:
            new = replace(pose, heading=pose.heading.rotated(1))
        else:
            dx, dy = _DIR_VECTORS[pose.heading]
            new = replace(pose, x=pose.x + dx, y=pose.y + dy)
        agents = agents[:i] + (new,) + agents[i + 1 :]
    elif modality is Modality.RO:
        obj = obj.rotated_clockwise()
    else:
        direction = globalize(ma[0], agents[0].heading)
        dx, dy = _DIR_VECTORS[direction]
        obj = obj.translated(dx, dy)
        if modality is Modality.MWO:
            agents = tuple(replace(a, x=a.x + dx, y=a.y + dy) for a in agents)
    if not _layout_ok(state.map, agents, obj):
        return None
    return agents, obj


def step(
    state: WorldState, ma: Sequence[Action], double_positive_rewards: bool = False
) -> Tuple[WorldState, StepOutcome]:
    if state.done:
        raise EpisodeDoneError("step called on a finished episode")
    ma = tuple(Action(a) for a in ma)
    n = state.n_agents
    if len(ma) != n:
        raise ValueError(f"multi-action has {len(ma)} entries for {n} agents")

    S = build_coordination_tensor(state.headings)
    result = _apply(state, ma) if S[ma] else None
    ok = result is not None
    cents = STEP_PENALTY_CENTS + (0 if ok else FAILURE_PENALTY_CENTS)
    new_state = replace(state, step_count=state.step_count + 1)
    if ok:
        agents, obj = result
        new_state = replace(new_state, agents=agents, obj=obj)
        sq = new_state.sq_distance_to_goal()
        if sq < state.best_sq_distance:
            cents += PROGRESS_BONUS_CENTS * (2 if double_positive_rewards else 1)
            new_state = replace(new_state, best_sq_distance=sq)

    reason = None
    if new_state.object_covers_goal():
        reason = "success"
    elif new_state.step_count >= state.max_steps:
        reason = "step_limit"
    if reason is not None:
        new_state = replace(new_state, done=True, done_reason=reason)
    outcome = StepOutcome(
        success=(ok,) * n,
        reward_cents=(cents,) * n,
        done=reason is not None,
        done_reason=reason,
    )
    return new_state, outcome


# -- observations ------------------------------------------------------------


def observe(state: WorldState, agent: int, r: int = DEFAULT_OBS_RADIUS) -> np.ndarray:
    """Egocentric ``(5, 2r+1, 2r+1)`` window; the agent sits at the center facing up.

    Row 0 is the farthest row ahead of the agent, column ``2r`` is to its right.
    Cells outside the map are all-zero.
    """
    if not 0 <= agent < state.n_agents:
        raise IndexError(f"agent {agent} out of range")
    m = state.map
    size = 2 * r + 1
    planes = np.zeros((5, m.height + 2 * r, m.width + 2 * r), dtype=np.float64)
    planes[0, r : r + m.height, r : r + m.width] = m.agent_navigable
    planes[1, r : r + m.height, r : r + m.width] = m.object_navigable
    for i, a in enumerate(state.agents):
        if i != agent:
            planes[2, a.y + r, a.x + r] = 1.0
    for ox, oy in state.obj.cells():
        planes[3, oy + r, ox + r] = 1.0
    gx, gy = m.goal
    planes[4, gy + r, gx + r] = 1.0
    me = state.agents[agent]
    window = planes[:, me.y : me.y + size, me.x : me.x + size]
    # Turn the window so the agent's heading points to row 0.
    return np.ascontiguousarray(np.rot90(window, k=int(me.heading), axes=(1, 2)))


def _static_planes(m: GridMap, r: int) -> np.ndarray:
    cache = _STATIC_CACHE.get((id(m), r))
    if cache is not None and cache[0] is m:
        return cache[1]
    planes = np.zeros((5, m.height + 2 * r, m.width + 2 * r), dtype=np.float64)
    planes[0, r : r + m.height, r : r + m.width] = m.agent_navigable
    planes[1, r : r + m.height, r : r + m.width] = m.object_navigable
    gx, gy = m.goal
    planes[4, gy + r, gx + r] = 1.0
    _STATIC_CACHE[(id(m), r)] = (m, planes)
    return planes


_STATIC_CACHE: dict = {}


def observe_all(state: WorldState, r: int = DEFAULT_OBS_RADIUS) -> np.ndarray:
    """Observations of every agent, shape ``(N, 5, 2r+1, 2r+1)``; same values as :func:`observe`."""
    planes = _static_planes(state.map, r).copy()
    for a in state.agents:
        planes[2, a.y + r, a.x + r] = 1.0
    for ox, oy in state.obj.cells():
        planes[3, oy + r, ox + r] = 1.0
    size = 2 * r + 1
    out = np.empty((state.n_agents, 5, size, size))
    for i, me in enumerate(state.agents):
        window = planes[:, me.y : me.y + size, me.x : me.x + size]
        out[i] = np.rot90(window, k=int(me.heading), axes=(1, 2))
        out[i, 2, r, r] = 0.0
    return out
