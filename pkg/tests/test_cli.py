import collections
import csv
import json

import pytest

from gridfurn.cli import main
from gridfurn.trainer import MAPS_DIR

SMALL = "policy=sync\nm=2\nhidden=8\nmax_steps=6\nn_step=3\nworkers=1\ncheckpoint_every=1000\n"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "train.cfg"
    cfg.write_text(SMALL)
    out = root / "run"
    assert main(["train", "--config", str(cfg), "--episodes", "1", "--out", str(out)]) == 0
    return out


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.cfg"
    assert main(["train", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_unknown_key_is_listed(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(SMALL + "learning_rate=0.1\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_train_one_episode_outputs(trained):
    assert sorted(p.name for p in trained.glob("*.ckpt")) == ["final.ckpt"]
    records = [json.loads(line) for line in (trained / "train_log.jsonl").read_text().splitlines()]
    steps = [r for r in records if r["type"] == "step"]
    episodes = [r for r in records if r["type"] == "episode"]
    assert len(episodes) == 1
    assert len(steps) == episodes[0]["steps"] >= 1
    assert (trained / "train_metrics.csv").is_file()


def _evaluate(trained, out, episodes, seed=3, maps=None):
    argv = ["evaluate", "--checkpoint", str(trained / "final.ckpt"), "--episodes", str(episodes),
            "--seed", str(seed), "--out", str(out), "--tvd-method", "marginals"]
    code = main(argv + (["--maps", str(maps)] if maps else []))
    assert code == 0
    with open(out / "episodes.csv") as fh:
        return list(csv.DictReader(fh))


def test_evaluate_splits_across_maps(trained, tmp_path):
    maps = tmp_path / "maps"
    maps.mkdir()
    for i, name in enumerate(("corridor", "open_room", "pillars", "corridor", "open_room")):
        (maps / f"m{i}.txt").write_bytes((MAPS_DIR / f"{name}.txt").read_bytes())
    rows = _evaluate(trained, tmp_path / "e10", 10, maps=maps)
    counts = collections.Counter(r["map"] for r in rows)
    assert len(counts) == 5 and set(counts.values()) == {2}
    rows = _evaluate(trained, tmp_path / "e7", 7, maps=maps)
    order = list(dict.fromkeys(r["map"] for r in rows))
    assert [collections.Counter(r["map"] for r in rows)[m] for m in order] == [2, 2, 1, 1, 1]
    for name in ("metrics.csv", "episodes.csv", "joint_summary.csv", "trajectories.jsonl"):
        assert (tmp_path / "e7" / name).is_file()


def test_evaluate_is_reproducible(trained, tmp_path):
    _evaluate(trained, tmp_path / "a", 5)
    _evaluate(trained, tmp_path / "b", 5)
    for name in ("metrics.csv", "episodes.csv", "joint_summary.csv", "trajectories.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_replay_evaluation_log(trained, tmp_path, capsys):
    _evaluate(trained, tmp_path / "r", 3)
    capsys.readouterr()
    assert main(["replay", str(tmp_path / "r" / "trajectories.jsonl")]) == 0
    assert "0 divergences" in capsys.readouterr().out


def test_replay_truncated_line(trained, tmp_path, capsys):
    _evaluate(trained, tmp_path / "t", 2)
    log = tmp_path / "t" / "trajectories.jsonl"
    lines = log.read_text().splitlines()
    log.write_text("\n".join(lines[:-1] + [lines[-1][: len(lines[-1]) // 2]]) + "\n")
    capsys.readouterr()
    assert main(["replay", "-q", str(log)]) == 2
    assert f"line {len(lines)}" in capsys.readouterr().err


def test_replay_empty_log(tmp_path, capsys):
    log = tmp_path / "empty.jsonl"
    log.write_text("")
    assert main(["replay", str(log)]) == 2
    assert "no steps" in capsys.readouterr().err


def test_enumerate_coordination(capsys):
    assert main(["enumerate-coordination"]) == 0
    out = capsys.readouterr().out
    headers = [line for line in out.splitlines() if line.startswith("# relative orientation")]
    assert len(headers) == 4
    assert all("16 of 169" in h and "0.094675" in h for h in headers)
    matrix_rows = [line for line in out.splitlines() if line.startswith("Pass,")]
    assert len(matrix_rows) == 4
    body = [line for line in out.splitlines() if not line.startswith(("#", "actions", "agents"))]
    assert len(body) == 4 * 13
    assert sum(line.count(",1") for line in body) == 4 * 16


def test_enumerate_three_agents(capsys):
    assert main(["enumerate-coordination", "--n-agents", "3", "--summary"]) == 0
    out = capsys.readouterr().out
    assert out.count("19 of 2197") == 16


def test_rps_demo(tmp_path, capsys):
    assert main(["rps-demo", "--resolution", "0.05"]) == 0
    out = capsys.readouterr().out
    assert "-0.656854" in out and "search resolution 0.05" in out
