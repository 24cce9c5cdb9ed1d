"""Training-direction comparison across policy/loss configurations.

Each configuration is trained from several seeds on the bundled maps, then
its final checkpoint is evaluated with stochastic rollouts. The comparison
reports mean evaluation success per configuration.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .metrics import aggregate
from .trainer import TrainConfig, bundled_maps, evaluate, train

__all__ = ["ARMS", "ArmResult", "DirectionReport", "training_direction"]

log = logging.getLogger(__name__)

# (label, policy, loss, m)
ARMS: Tuple[Tuple[str, str, str, int], ...] = (
    ("sync-cordial", "sync", "cordial", 4),
    ("marginal-entropy", "marginal", "entropy", 1),
    ("marginal-cordial", "marginal", "cordial", 1),
)


@dataclass
class ArmResult:
    label: str
    seeds: List[int]
    eval_success: List[float]
    train_success_last_fifth: List[float]
    seconds: List[float]

    @property
    def mean_success(self) -> float:
        return float(np.mean(self.eval_success))

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "seeds": self.seeds,
            "eval_success": self.eval_success,
            "mean_eval_success": self.mean_success,
            "train_success_last_fifth": self.train_success_last_fifth,
            "seconds": self.seconds,
        }


@dataclass
class DirectionReport:
    arms: Dict[str, ArmResult] = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    @property
    def sync_margin(self) -> float:
        """Mean success of SYNC+CORDIAL minus marginal+entropy."""
        return self.arms["sync-cordial"].mean_success - self.arms["marginal-entropy"].mean_success

    @property
    def cordial_hurts_marginal(self) -> bool:
        return self.arms["marginal-cordial"].mean_success < self.arms["marginal-entropy"].mean_success

    def to_dict(self) -> dict:
        return {
            "settings": self.settings,
            "arms": {k: a.to_dict() for k, a in self.arms.items()},
            "sync_margin": self.sync_margin,
            "cordial_hurts_marginal": self.cordial_hurts_marginal,
        }


def training_direction(
    out_dir,
    episodes: int = 50_000,
    seeds: Sequence[int] = (0, 1, 2),
    workers: int = 4,
    envs_per_worker: int = 1,
    hidden: int = 128,
    eval_episodes: int = 100,
    arms: Sequence[Tuple[str, str, str, int]] = ARMS,
    base: Optional[TrainConfig] = None,
) -> DirectionReport:
    """Train and evaluate every arm for every seed; writes ``report.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    maps = bundled_maps()
    base = base or TrainConfig()
    report = DirectionReport(
        settings={
            "episodes": episodes,
            "seeds": list(seeds),
            "workers": workers,
            "envs_per_worker": envs_per_worker,
            "hidden": hidden,
            "eval_episodes": eval_episodes,
            "maps": [m.name for m in maps],
        }
    )
    for label, policy, loss, m in arms:
        arm = ArmResult(label, list(seeds), [], [], [])
        for seed in seeds:
            config = replace(
                base,
                policy=policy,
                loss=loss,
                m=m,
                episodes=episodes,
                seed=seed,
                workers=workers,
                envs_per_worker=envs_per_worker,
                hidden=hidden,
                log_steps=False,
                checkpoint_every=max(episodes, 1),
            )
            run_dir = out / f"{label}-seed{seed}"
            start = time.perf_counter()
            result = train(config, maps, run_dir)
            elapsed = time.perf_counter() - start
            done = sorted(result.episodes, key=lambda r: r["episode"])
            tail = done[-max(len(done) // 5, 1) :]
            arm.train_success_last_fifth.append(float(np.mean([r["success"] for r in tail])))
            # Evaluation seeds are disjoint from every training seed.
            ev = evaluate(result.model, maps, eval_episodes, seed=10_000 + seed, tvd_method="marginals", record=False)
            arm.eval_success.append(aggregate(ev.results).means["success"])
            arm.seconds.append(elapsed)
            log.info("%s seed %d: eval success %.3f (%.0fs)", label, seed, arm.eval_success[-1], elapsed)
        report.arms[label] = arm
        (out / "report.json").write_text(json.dumps(report.to_dict() if len(report.arms) == len(arms) else {"partial": {k: a.to_dict() for k, a in report.arms.items()}}, indent=2))
    return report
