"""Line-delimited trajectory logs: writing, reading, rendering and replay checks.

A log is a sequence of JSON objects, one per line. An ``episode`` record
carries the map text, settings and initial poses; the ``step`` records that
follow carry the executed multi-action and the logged outcome.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

from .actions import Action, Heading
from .gridworld import AgentPose, ObjectPose, WorldState, parse_map, step

__all__ = [
    "TrajectoryError",
    "write_log",
    "read_log",
    "render",
    "ReplayReport",
    "replay",
]

_GLYPHS = {Heading.NORTH: "^", Heading.EAST: ">", Heading.SOUTH: "v", Heading.WEST: "<"}


class TrajectoryError(ValueError):
    pass


def write_log(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_log(path) -> List[dict]:
    """Parse a log, naming the line of the first corrupt or truncated record."""
    path = Path(path)
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TrajectoryError(f"{path}: line {lineno}: corrupt or truncated record ({exc.msg})") from None
            if not isinstance(rec, dict) or "type" not in rec:
                raise TrajectoryError(f"{path}: line {lineno}: record has no type")
            records.append(rec)
    if not any(r["type"] == "step" for r in records):
        raise TrajectoryError(f"{path}: log contains no steps")
    return records


def render(state: WorldState) -> str:
    """ASCII frame: ``#`` walls, ``G`` goal, ``O`` object, heading glyphs for agents."""
    m = state.map
    rows = [list(line) for line in m.text.split("\n")]
    for x, y in state.obj.cells():
        rows[y][x] = "O"
    for i, a in enumerate(state.agents):
        rows[a.y][a.x] = _GLYPHS[a.heading] if state.n_agents <= 2 or i == 0 else str(i)
    return "\n".join("".join(r) for r in rows)


def _state_from_header(rec: dict) -> WorldState:
    m = parse_map(rec["map_text"], name=rec.get("map_name", ""))
    agents = tuple(AgentPose(x, y, Heading(h)) for x, y, h in rec["agents"])
    ox, oy, rot = rec["obj"]
    obj = ObjectPose(ox, oy, rot, tuple(rec.get("object_size", (1, 1))))
    state = WorldState(map=m, agents=agents, obj=obj, max_steps=rec["max_steps"])
    return replace(state, best_sq_distance=state.sq_distance_to_goal())


@dataclass
class ReplayReport:
    episodes: int = 0
    steps: int = 0
    divergences: List[str] = field(default_factory=list)
    frames: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.divergences


def replay(records: Sequence[dict], frames: bool = False) -> ReplayReport:
    """Re-run every logged step and compare outcome and poses with the log.

    Each episode stops at its first divergence, which is reported.
    """
    report = ReplayReport()
    state: Optional[WorldState] = None
    double = False
    diverged = False
    for rec in records:
        if rec["type"] == "episode":
            state = _state_from_header(rec)
            double = bool(rec.get("double_positive_rewards", False))
            diverged = False
            report.episodes += 1
            if frames:
                report.frames.append(f"episode {rec.get('episode', report.episodes - 1)} t=0\n{render(state)}")
            continue
        if rec["type"] != "step":
            continue
        if state is None:
            raise TrajectoryError("step record before any episode record")
        if diverged:
            continue
        where = f"episode {rec.get('episode')} step {rec.get('t')}"
        if state.done:
            report.divergences.append(f"{where}: logged a step after the episode ended")
            diverged = True
            continue
        try:
            ma = [Action[name] for name in rec["multi_action"]]
        except KeyError as exc:
            raise TrajectoryError(f"{where}: unknown action {exc}") from None
        state, outcome = step(state, ma, double)
        report.steps += 1
        checks = [
            ("success", list(outcome.success), rec.get("success")),
            ("reward_cents", list(outcome.reward_cents), rec.get("reward_cents")),
            ("agents", [[a.x, a.y, int(a.heading)] for a in state.agents], rec.get("agents")),
            ("obj", [state.obj.x, state.obj.y, state.obj.rotation], rec.get("obj")),
            ("done", outcome.done, rec.get("done")),
        ]
        for name, got, logged in checks:
            if got != logged:
                report.divergences.append(f"{where}: {name} replayed as {got}, logged {logged}")
                diverged = True
                break
        if frames:
            names = ",".join(rec["multi_action"])
            report.frames.append(f"episode {rec.get('episode')} t={state.step_count} [{names}]\n{render(state)}")
    return report
