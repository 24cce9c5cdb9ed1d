"""Command-line entry point: ``gridfurn <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import logging
import math
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import trainer
from .actions import Action, Heading, build_coordination_tensor, coordinated_fraction
from .diffmath import CheckpointError
from .gridworld import MapError
from .metrics import aggregate, joint_policy_summary, summaries_to_csv
from .policy import joint_to_csv
from .rps import optimal_rank_one_search, rank_one_optimum, run_rps_experiment
from .trajectory import TrajectoryError, read_log, replay, write_log

__all__ = ["main", "build_parser"]

log = logging.getLogger("gridfurn")


def _maps_arg(value: Optional[str]):
    return trainer.resolve_maps(value if value else "bundled")


def cmd_train(args) -> int:
    overrides = {}
    for key in ("workers", "episodes", "seed", "out"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if args.maps:
        overrides["maps"] = args.maps
    config = trainer.TrainConfig.from_file(args.config, **overrides)
    maps = trainer.resolve_maps(config.maps)
    result = trainer.train(config, maps)
    out = result.out_dir
    if result.episodes:
        summary = aggregate(result.episode_results(), label=f"{config.policy}-{config.loss}", tvd_method=config.train_tvd_method)
        (out / "train_metrics.csv").write_text(summaries_to_csv([summary]))
    print(f"trained {len(result.episodes)} episodes ({result.skipped} skipped); outputs in {out}")
    for path in result.checkpoints:
        print(f"checkpoint {path}")
    return 0


def cmd_evaluate(args) -> int:
    model, meta = trainer.load_model(args.checkpoint)
    train_cfg = meta.get("train", {})
    maps = _maps_arg(args.maps or train_cfg.get("maps"))
    episodes = 100 if args.episodes is None else args.episodes
    seed = 0 if args.seed is None else args.seed
    result = trainer.evaluate(
        model,
        maps,
        episodes,
        seed=seed,
        tvd_method=args.tvd_method,
        max_steps=int(train_cfg.get("max_steps", 250)),
        double_positive_rewards=train_cfg.get("double_positive_rewards"),
    )
    out = Path(args.out or "runs/eval")
    out.mkdir(parents=True, exist_ok=True)
    write_log(out / "trajectories.jsonl", result.trajectory)
    if not result.results:
        (out / "metrics.csv").write_text("")
        print(f"0 episodes evaluated; outputs in {out}")
        return 0
    label = f"{model.config.policy}-m{model.config.m}"
    summary = aggregate(result.results, label=label, tvd_method=args.tvd_method)
    (out / "metrics.csv").write_text(summaries_to_csv([summary]))
    with open(out / "episodes.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["episode", "map", "success", "steps", "start_manhattan_m", "final_dist_m", "invalid_prob", "tvd", "reward"])
        for e, r in enumerate(result.results):
            writer.writerow([e, r.map_name, int(r.success), r.steps, repr(r.start_manhattan_m), repr(r.final_distance_m), repr(r.invalid_prob), repr(r.tvd), repr(r.reward)])
    labels = [a.name for a in Action]
    (out / "joint_summary.csv").write_text(joint_to_csv(joint_policy_summary(result.joints), labels))
    print(summaries_to_csv([summary]), end="")
    print(f"outputs in {out}")
    return 0


def cmd_replay(args) -> int:
    records = read_log(args.log)
    report = replay(records, frames=not args.quiet)
    for frame in report.frames:
        print(frame)
        print()
    print(f"replayed {report.steps} steps over {report.episodes} episodes, {len(report.divergences)} divergences")
    for d in report.divergences[:1]:
        print(f"first divergence: {d}")
    return 0 if report.ok else 1


def cmd_enumerate(args) -> int:
    n = args.n_agents
    names = [a.name for a in Action]
    total_counts = []
    # Coordination depends only on headings relative to the first agent.
    for rel in itertools.product(range(4), repeat=n - 1):
        headings = (Heading(0),) + tuple(Heading(r) for r in rel)
        S = build_coordination_tensor(headings)
        count = int(S.mask.sum())
        total_counts.append(count)
        label = "/".join(str(h.degrees) for h in headings)
        print(f"# relative orientation {label}: {count} of {S.mask.size} coordinated, fraction {coordinated_fraction(S):.6f}")
        if args.summary:
            continue
        # Rows index the first N-1 agents, columns the last agent.
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["actions"] + names)
        rows = S.mask.reshape(-1, len(names))
        for idx, row in zip(itertools.product(names, repeat=n - 1), rows):
            writer.writerow(["|".join(idx)] + [int(v) for v in row])
        print(buf.getvalue(), end="")
    print(f"agents={n} orientations={len(total_counts)} coordinated_per_orientation={sorted(set(total_counts))}")
    return 0


def cmd_rps(args) -> int:
    p_star, v_star = rank_one_optimum()
    print(f"target rank-one value 5-4*sqrt(2) = {v_star:.6f}")
    print(f"target policy (R,P,S) = ({p_star[0]:.6f}, {p_star[1]:.6f}, {p_star[2]:.6f})")
    p, q, v = optimal_rank_one_search(args.resolution)
    print(f"search resolution {args.resolution}: value {v:.6f}")
    print(f"  p = ({p[0]:.6f}, {p[1]:.6f}, {p[2]:.6f})  q = ({q[0]:.6f}, {q[1]:.6f}, {q[2]:.6f})")
    if args.iterations > 0:
        runs = []
        for kind, m in (("marginal", 1), ("sync", 3)):
            for s in range(args.seeds):
                run = run_rps_experiment(kind, m, args.iterations, s)
                runs.append(run)
                print(f"{kind} m={m} seed={s}: plateau {run.plateau():.4f}")
        if args.curves:
            with open(args.curves, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["policy", "m", "seed", "iteration", "value"])
                for run in runs:
                    for i, v in enumerate(run.values):
                        writer.writerow([run.policy_type, run.m, run.seed, i, repr(v)])
            print(f"learning curves written to {args.curves}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridfurn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy from a key=value config")
    p.add_argument("--config", required=True)
    p.add_argument("--maps", help="'bundled', a map file, a directory or a comma-separated list")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint with stochastic rollouts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--maps")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--tvd-method", choices=("optimize", "marginals"), default="optimize")
    p.add_argument("--workers", type=int, help="accepted for symmetry; evaluation is single-process")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("replay", help="render and verify a trajectory log")
    p.add_argument("log")
    p.add_argument("-q", "--quiet", action="store_true", help="verify only, no frames")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("enumerate-coordination", help="print coordination matrices per relative orientation")
    p.add_argument("--n-agents", type=int, default=2, choices=(2, 3))
    p.add_argument("--summary", action="store_true", help="counts and fractions only")
    p.set_defaults(func=cmd_enumerate)

    p = sub.add_parser("rps-demo", help="rock-paper-scissors expressivity demo")
    p.add_argument("--resolution", type=float, default=1e-3)
    p.add_argument("--iterations", type=int, default=0)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--curves", help="write learning curves CSV here")
    p.set_defaults(func=cmd_rps)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (trainer.ConfigError, MapError, CheckpointError, TrajectoryError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
