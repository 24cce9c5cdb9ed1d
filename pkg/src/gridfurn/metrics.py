"""Episode metrics, aggregate summaries and joint-policy summaries."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .gridworld import CELL_METERS

__all__ = [
    "EpisodeResult",
    "MetricsSummary",
    "md_spl",
    "aggregate",
    "joint_policy_summary",
    "summaries_to_csv",
    "METRIC_COLUMNS",
]

METRIC_COLUMNS = ("md_spl", "success", "ep_len", "final_dist", "invalid_prob", "tvd")


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    steps: int  # actions taken per agent
    start_manhattan_m: float
    final_distance_m: float
    invalid_prob: float = 0.0
    tvd: float = 0.0
    reward: float = 0.0
    map_name: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.start_manhattan_m < 0 or self.final_distance_m < 0:
            raise ValueError("steps and distances must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def md_spl(results: Sequence[EpisodeResult], d_grid: float = CELL_METERS) -> float:
    """Success weighted by Manhattan-distance path efficiency.

    Each episode contributes ``S * (m / d_grid) / max(p, m / d_grid)`` where
    ``m`` is the object's start-to-goal Manhattan distance in meters and
    ``p`` the number of actions per agent.
    """
    if not results:
        raise ValueError("md_spl of an empty result list")
    total = 0.0
    for r in results:
        if not r.success:
            continue
        shortest = r.start_manhattan_m / d_grid
        denom = max(r.steps, shortest)
        total += shortest / denom if denom > 0 else 1.0
    return total / len(results)


@dataclass
class MetricsSummary:
    n_episodes: int
    means: Dict[str, float]
    half_widths: Dict[str, float]
    degenerate: bool = False  # fewer than two episodes, so no spread estimate
    label: str = ""
    tvd_method: str = ""

    def __getattr__(self, name):
        means = self.__dict__.get("means", {})
        if name in means:
            return means[name]
        raise AttributeError(name)

    def row(self) -> Dict[str, object]:
        out: Dict[str, object] = {"method": self.label, "tvd_method": self.tvd_method, "n_episodes": self.n_episodes}
        for k in METRIC_COLUMNS:
            out[k] = self.means[k]
            out[f"{k}_ci95"] = self.half_widths[k]
        out["ci_degenerate"] = int(self.degenerate)
        return out


def aggregate(
    results: Sequence[EpisodeResult],
    label: str = "",
    tvd_method: str = "",
    d_grid: float = CELL_METERS,
) -> MetricsSummary:
    """Means with normal-approximation 95% half-widths (``1.96 * s / sqrt(n)``).

    MD-SPL is aggregated per episode like the others, so its mean equals
    :func:`md_spl`.
    """
    if not results:
        raise ValueError("cannot aggregate an empty result list")
    per_episode = {
        "md_spl": [md_spl([r], d_grid) for r in results],
        "success": [float(r.success) for r in results],
        "ep_len": [float(r.steps) for r in results],
        "final_dist": [r.final_distance_m for r in results],
        "invalid_prob": [r.invalid_prob for r in results],
        "tvd": [r.tvd for r in results],
    }
    n = len(results)
    means, widths = {}, {}
    for k, values in per_episode.items():
        arr = np.asarray(values, dtype=np.float64)
        means[k] = float(arr.mean())
        widths[k] = float(1.96 * arr.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return MetricsSummary(n, means, widths, degenerate=n < 2, label=label, tvd_method=tvd_method)


def joint_policy_summary(episodes: Iterable[Sequence[np.ndarray]]) -> np.ndarray:
    """Mean over episodes of each episode's step-mean joint matrix.

    Averaging within an episode first keeps long episodes from dominating.
    """
    per_episode = []
    for steps in episodes:
        steps = list(steps)
        if not steps:
            raise ValueError("every episode needs at least one step")
        per_episode.append(np.mean(np.stack(steps), axis=0))
    if not per_episode:
        raise ValueError("no episodes to summarize")
    return np.mean(np.stack(per_episode), axis=0)


def summaries_to_csv(summaries: Sequence[MetricsSummary]) -> str:
    rows = [s.row() for s in summaries]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
