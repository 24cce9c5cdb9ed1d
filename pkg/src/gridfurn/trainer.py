"""Asynchronous n-step actor-critic training and evaluation.

Training runs ``W`` workers. Each worker owns ``envs_per_worker`` environments
and a private model replica; at the start of every rollout segment it copies
the shared parameters, runs up to ``n_step`` steps in all of its
environments, backpropagates through the segment and applies an ADAM update
directly to the shared parameter and moment buffers. With ``W > 1`` the
workers are forked processes writing to shared memory without locks
(``serialized=true`` adds one). With ``W = 1`` everything runs in-process and
is bit-deterministic for a fixed seed.

Episode ``e`` always uses map ``e % len(maps)`` and randomness derived from
``(seed, e)``, regardless of which worker runs it.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import multiprocessing as mp
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import diffmath as dm
from .actions import NUM_ACTIONS, Action, CoordinationTensor, build_coordination_tensor
from .diffmath import Tape, Tensor
from .gridworld import (
    CELL_METERS,
    DEFAULT_OBS_RADIUS,
    GridMap,
    GridWorld,
    InitializationError,
    WorldState,
    load_map,
    manhattan_to_goal,
    observe_all,
)
from .metrics import EpisodeResult
from .nets import POLICY_TYPES, Model, ModelOutput, TboneConfig, assemble_joint_tensor, build_model
from .policy import LOG_FLOOR, SharedRandomStream, invalid_prob, sample_joint, sample_mixture, tvd

__all__ = [
    "ConfigError",
    "TrainConfig",
    "cordial_loss",
    "entropy_loss",
    "discounted_returns",
    "RolloutBuffer",
    "a3c_loss",
    "advantages_of",
    "derive_seed",
    "bundled_maps",
    "resolve_maps",
    "model_config_for",
    "train",
    "TrainResult",
    "evaluate",
    "EvalResult",
    "PolicyController",
    "ScriptedController",
    "load_model",
    "assign_maps",
]

log = logging.getLogger(__name__)

MAPS_DIR = Path(__file__).with_name("maps")


class ConfigError(ValueError):
    pass


# -- configuration -------------------------------------------------------------


@dataclass
class TrainConfig:
    """Training settings; serialized as flat ``key=value`` lines."""

    gamma: float = 0.99
    lr: float = 1e-4
    n_step: int = 20
    beta_start: float = 1.0
    beta_end: float = 0.01
    beta_episodes: int = 5000
    loss: str = "cordial"
    policy: str = "sync"
    m: int = 4
    workers: int = 1
    envs_per_worker: int = 1
    episodes: int = 1000
    max_steps: int = 250
    seed: int = 0
    maps: str = "bundled"
    out: str = "runs/train"
    hidden: int = 128
    n_agents: int = 2
    obs_radius: int = DEFAULT_OBS_RADIUS
    double_positive_rewards: Optional[bool] = None
    checkpoint_every: int = 1000
    log_steps: bool = True
    train_tvd_method: str = "marginals"
    tvd_method: str = "optimize"
    serialized: bool = False
    max_grad_norm: float = 40.0
    dtype: str = "float64"

    def __post_init__(self):
        if self.loss not in ("cordial", "entropy"):
            raise ConfigError(f"loss must be 'cordial' or 'entropy', got {self.loss!r}")
        if self.policy not in POLICY_TYPES:
            raise ConfigError(f"policy must be one of {POLICY_TYPES}, got {self.policy!r}")
        if self.policy != "sync" and self.m != 1:
            self.m = 1
        for name in ("n_step", "workers", "envs_per_worker", "max_steps", "beta_episodes", "checkpoint_every", "m"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.episodes < 0:
            raise ConfigError("episodes must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        for name in ("train_tvd_method", "tvd_method"):
            if getattr(self, name) not in ("optimize", "marginals"):
                raise ConfigError(f"{name} must be 'optimize' or 'marginals'")
        if self.policy == "marginal" and self.loss == "cordial":
            warnings.warn(
                "marginal policies cannot represent coordinated joints; CORDIAL is known to hurt them",
                stacklevel=3,
            )

    def beta(self, episode: int) -> float:
        """Linearly annealed regularization weight for ``episode``."""
        if episode >= self.beta_episodes:
            return self.beta_end  # exact endpoint, no interpolation round-off
        frac = max(episode, 0) / self.beta_episodes
        return self.beta_start - (self.beta_start - self.beta_end) * frac

    # -- key=value text ----------------------------------------------------

    @classmethod
    def keys(cls) -> List[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, values: Dict[str, object]) -> "TrainConfig":
        unknown = sorted(set(values) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values: Dict[str, object] = {}
        unknown = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                unknown.append(key)
                continue
            values[key] = _convert(key, value, types[key])
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(), **overrides)

    def to_text(self) -> str:
        lines = []
        for k, v in dataclasses.asdict(self).items():
            if v is None:
                v = "auto"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _convert(key: str, value: str, typ) -> object:
    typ = str(typ)
    try:
        if "Optional[bool]" in typ:
            return None if value.lower() in ("auto", "none", "") else _bool(value)
        if "bool" in typ:
            return _bool(value)
        if "int" in typ:
            return int(value)
        if "float" in typ:
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} ({exc})") from None
    return value


def _bool(value: str) -> bool:
    v = value.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0] >> np.uint64(1))


def bundled_maps() -> List[GridMap]:
    return [load_map(p) for p in sorted(MAPS_DIR.glob("*.txt"))]


def resolve_maps(spec: Union[str, Sequence, None]) -> List[GridMap]:
    """Maps from ``"bundled"``, a comma-separated path list, or a sequence of paths/maps."""
    if spec is None or spec == "bundled" or spec == "":
        return bundled_maps()
    if isinstance(spec, str):
        spec = [s.strip() for s in spec.split(",") if s.strip()]
    out = []
    for item in spec:
        if isinstance(item, GridMap):
            out.append(item)
            continue
        path = Path(item)
        if not path.exists() and (MAPS_DIR / f"{item}.txt").exists():
            path = MAPS_DIR / f"{item}.txt"
        if path.is_dir():
            out.extend(load_map(p) for p in sorted(path.glob("*.txt")))
        elif path.is_file():
            out.append(load_map(path))
        else:
            raise FileNotFoundError(f"map not found: {item}")
    if not out:
        raise ConfigError("no maps given")
    return out


def model_config_for(config: TrainConfig) -> TboneConfig:
    size = 2 * config.obs_radius + 1
    return TboneConfig(
        n_agents=config.n_agents,
        obs_shape=(5, size, size),
        hidden=config.hidden,
        encoder_hidden=config.hidden,
        m=config.m,
        policy=config.policy,
        dtype=config.dtype,
        seed=config.seed,
    )


# -- losses ----------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def cordial_loss(S, joint, beta: float) -> Tensor:
    """Coordination loss ``-beta <S, log Pi> / sum(S)``.

    ``joint`` may be a Tensor (differentiable) or an array. Entries are
    floored at ``1e-10`` before the log.
    """
    mask = S.mask if isinstance(S, CoordinationTensor) else np.asarray(S)
    joint = _as_tensor(joint)
    if mask.shape != joint.shape:
        raise ValueError(f"coordination tensor {mask.shape} and joint {joint.shape} differ in shape")
    total = float(mask.sum())
    if total == 0:
        raise ValueError("coordination tensor has no coordinated entries")
    weights = mask.astype(joint.data.dtype) * (-beta / total)
    return dm.tsum(dm.mul(dm.log(joint, floor=LOG_FLOOR), weights))


def _batched_cordial(S: np.ndarray, joint: Tensor) -> Tensor:
    """Per-row ``-<S_b, log Pi_b> / sum(S_b)`` for batched ``(B, A, ..., A)`` inputs."""
    axes = tuple(range(1, joint.ndim))
    totals = S.reshape(S.shape[0], -1).sum(axis=1)
    if np.any(totals == 0):
        raise ValueError("coordination tensor has no coordinated entries")
    weights = -S / totals.reshape((-1,) + (1,) * (S.ndim - 1))
    return dm.tsum(dm.mul(dm.log(joint, floor=LOG_FLOOR), weights), axis=axes)


def _entropy_rows(marginals: Tensor) -> Tensor:
    """``sum_i H(pi^i)`` over the agent axis of ``(..., N, A)`` marginals."""
    logs = dm.log(marginals, floor=LOG_FLOOR)
    return dm.mul(dm.tsum(dm.mul(marginals, logs), axis=(-2, -1)), -1.0)


def _joint_marginals(joint: Tensor, batched: bool) -> Tensor:
    lead = 1 if batched else 0
    n = joint.ndim - lead
    parts = []
    for i in range(n):
        axes = tuple(lead + k for k in range(n) if k != i)
        m = dm.tsum(joint, axis=axes) if axes else joint
        shape = (joint.shape[0], 1, joint.shape[lead + i]) if batched else (1, joint.shape[i])
        parts.append(dm.reshape(m, shape))
    return dm.concat(parts, axis=-2)


def entropy_loss(policy, beta: float, joint: bool = False) -> Tensor:
    """Negated total entropy ``-beta * sum_i H(pi^i)``.

    ``policy`` is an ``(N, A)`` array/Tensor of marginals, or with
    ``joint=True`` a joint tensor whose marginals are used.
    """
    p = _as_tensor(policy)
    if joint:
        p = _joint_marginals(p, batched=False)
    if p.ndim != 2:
        raise ValueError(f"marginals must be (N, A), got {p.shape}")
    return dm.mul(_entropy_rows(p), -beta)


def discounted_returns(
    rewards: np.ndarray,
    dones: Optional[np.ndarray] = None,
    bootstrap=0.0,
    gamma: float = 0.99,
) -> np.ndarray:
    """n-step returns ``R_t = r_t + gamma (1 - done_t) R_{t+1}``, ``R_T = bootstrap``.

    ``rewards`` has shape ``(T,)`` or ``(T, B)``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    d = np.zeros_like(r) if dones is None else np.asarray(dones, dtype=np.float64)
    out = np.empty_like(r)
    running = np.asarray(bootstrap, dtype=np.float64) * np.ones_like(r[0]) if r.size else 0.0
    for t in range(len(r) - 1, -1, -1):
        running = r[t] + gamma * (1.0 - d[t]) * running
        out[t] = running
    return out


@dataclass
class _Step:
    log_prob: Tensor  # (B,) log-probability of the sampled multi-action
    values: Tensor  # (B, N) per-agent values; (B, 1) for central
    rewards: np.ndarray  # (B, N) per-agent rewards
    done: np.ndarray  # (B,)
    joint: Tensor  # (B, A, ..., A)
    S: np.ndarray  # (B, A, ..., A) coordination masks
    beta: np.ndarray  # (B,)
    weight: np.ndarray  # (B,) 0 for idle slots


class RolloutBuffer:
    """Up to ``horizon`` steps of a batch of ``B`` environments.

    Scalar inputs are accepted and treated as ``B = 1``.
    """

    def __init__(self, horizon: int = 20):
        self.horizon = horizon
        self.steps: List[_Step] = []

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def full(self) -> bool:
        return len(self.steps) >= self.horizon

    def add(self, log_prob, values, rewards, done, joint, S, beta, weight=None) -> None:
        if self.full:
            raise ValueError(f"rollout buffer already holds {self.horizon} steps")
        log_prob = _as_tensor(log_prob)
        values = _as_tensor(values)
        joint = _as_tensor(joint)
        S = S.mask if isinstance(S, CoordinationTensor) else np.asarray(S)
        if log_prob.ndim == 0:
            log_prob = dm.reshape(log_prob, (1,))
            values = dm.reshape(values, (1, -1) if values.ndim else (1, 1))
            joint = dm.reshape(joint, (1,) + joint.shape)
            S = S[None]
        b = log_prob.shape[0]
        rewards = np.asarray(rewards, dtype=np.float64).reshape(b, -1)
        done = np.asarray(done, dtype=bool).reshape(b)
        beta = np.broadcast_to(np.asarray(beta, dtype=np.float64), (b,)).copy()
        weight = np.ones(b) if weight is None else np.asarray(weight, dtype=np.float64).reshape(b)
        self.steps.append(_Step(log_prob, values, rewards, done, joint, S.astype(np.float64), beta, weight))

    def clear(self) -> None:
        self.steps = []


def a3c_loss(
    buffer: RolloutBuffer,
    bootstrap,
    config: TrainConfig,
    advantages: Optional[np.ndarray] = None,
) -> Tensor:
    """Actor-critic loss over a rollout segment.

    Per step and environment: ``-log Pi(ma) * (R - V)`` with the advantage held
    constant, ``mean_i 0.5 (R - V^i)^2`` and the CORDIAL or entropy term. The
    return signal uses the per-agent reward averaged over agents, and ``V`` is
    the mean of the per-agent values.

    ``advantages`` (``(T, B)``) replaces the computed advantages; since they
    are constants for the gradient, finite-difference checks pass them in.
    """
    if not buffer.steps:
        raise ValueError("empty rollout buffer")
    steps = buffer.steps
    rewards = np.stack([s.rewards.mean(axis=1) for s in steps])  # (T, B)
    dones = np.stack([s.done for s in steps])
    returns = discounted_returns(rewards, dones, bootstrap, config.gamma)
    total = None
    for t, s in enumerate(steps):
        w = s.weight
        R = returns[t]
        v_mean = s.values.data.mean(axis=1)
        adv = (R - v_mean if advantages is None else np.asarray(advantages)[t]) * w
        policy_term = dm.tsum(dm.mul(s.log_prob, -adv))
        diff = dm.sub(R[:, None], s.values)
        value_term = dm.tsum(dm.mul(dm.mul(diff, diff), (0.5 / s.values.shape[1]) * w[:, None]))
        if config.loss == "cordial":
            reg = _batched_cordial(s.S, s.joint)
        else:
            reg = dm.mul(_entropy_rows(_joint_marginals(s.joint, batched=True)), -1.0)
        reg_term = dm.tsum(dm.mul(reg, s.beta * w))
        step_loss = dm.add(dm.add(policy_term, value_term), reg_term)
        total = step_loss if total is None else dm.add(total, step_loss)
    return total


# -- acting -------------------------------------------------------------------------


def advantages_of(buffer: RolloutBuffer, bootstrap, gamma: float) -> np.ndarray:
    """``R_t - mean_i V^i_t`` for every step of the buffer, shape ``(T, B)``."""
    rewards = np.stack([s.rewards.mean(axis=1) for s in buffer.steps])
    dones = np.stack([s.done for s in buffer.steps])
    returns = discounted_returns(rewards, dones, bootstrap, gamma)
    return returns - np.stack([s.values.data.mean(axis=1) for s in buffer.steps])


def _mixture_arrays(out: ModelOutput, b: int) -> Tuple[np.ndarray, np.ndarray]:
    probs = np.exp(out.log_probs.data[b])
    alpha = np.ones(1) if out.log_alpha is None else np.exp(out.log_alpha.data[b])
    return alpha, probs


def _sample(out: ModelOutput, b: int, n_agents: int, seed: int, index: int) -> Tuple[Tuple[int, ...], int]:
    """Sample slot ``b``'s multi-action with per-agent copies of the shared stream."""
    if out.log_alpha is None and out.log_probs.ndim == 2:
        joint = np.exp(out.log_probs.data[b]).reshape((NUM_ACTIONS,) * n_agents)
        ma = sample_joint(joint, SharedRandomStream(seed, index).shared_uniform())
        return ma, 0
    alpha, probs = _mixture_arrays(out, b)
    streams = [SharedRandomStream(seed, index) for _ in range(n_agents)]
    ma, j, _ = sample_mixture(alpha, probs, streams, debug=True)
    return ma, j


def _chosen_log_prob(out: ModelOutput, ma: np.ndarray, comps: np.ndarray) -> Tensor:
    """``log Pi`` of the sampled multi-actions through the sampled components, ``(B,)``."""
    b = ma.shape[0]
    rows = np.arange(b)
    if out.log_alpha is None and out.log_probs.ndim == 2:
        flat = np.ravel_multi_index(tuple(ma.T), (NUM_ACTIONS,) * ma.shape[1])
        return dm.take(out.log_probs, (rows, flat))
    n = ma.shape[1]
    agents = np.tile(np.arange(n), b)
    picked = dm.take(out.log_probs, (np.repeat(rows, n), agents, np.repeat(comps, n), ma.reshape(-1)))
    lp = dm.tsum(dm.reshape(picked, (b, n)), axis=1)
    if out.log_alpha is not None:
        lp = dm.add(lp, dm.take(out.log_alpha, (rows, comps)))
    return lp


def _coordination_masks(states: Sequence[WorldState], n_agents: int) -> np.ndarray:
    return np.stack([build_coordination_tensor(s.headings).mask for s in states]).astype(np.float64)


def _stack_obs(states: Sequence[WorldState], r: int) -> Tuple[np.ndarray, np.ndarray]:
    obs = np.stack([observe_all(s, r) for s in states])
    headings = np.array([[int(h) for h in s.headings] for s in states], dtype=np.int64)
    return obs, headings


# -- training ------------------------------------------------------------------------


@dataclass
class _Slot:
    episode: int = -1
    state: Optional[WorldState] = None
    env_seed: int = 0
    sample_seed: int = 0
    reward_cents: int = 0
    invalid: float = 0.0
    tvd: float = 0.0
    start_manhattan: int = 0
    active: bool = False


class _Worker:
    """One worker's rollout loop; emits records through ``emit``."""

    def __init__(
        self,
        config: TrainConfig,
        maps: Sequence[GridMap],
        claim: Callable[[], Optional[int]],
        shared_params: np.ndarray,
        adam: dm.AdamState,
        emit: Callable[[dict], None],
        lock=None,
        worker_id: int = 0,
    ):
        self.config = config
        self.worlds = [
            GridWorld(m, config.n_agents, config.max_steps, double_positive_rewards=config.double_positive_rewards)
            for m in maps
        ]
        self.claim = claim
        self.model = build_model(model_config_for(config))
        self.shared = shared_params
        self.shared_views = self.model.flat_views(shared_params)
        self.adam = adam
        self.emit = emit
        self.lock = lock
        self.worker_id = worker_id
        self.skipped = 0
        self.updates = 0

    def _start(self, slot: _Slot) -> None:
        c = self.config
        while True:
            e = self.claim()
            if e is None:
                slot.active = False
                slot.state = None
                return
            world = self.worlds[e % len(self.worlds)]
            env_seed = derive_seed(c.seed, e, 0)
            try:
                state = world.reset(env_seed)
            except InitializationError as exc:
                self.skipped += 1
                self.emit({"type": "skipped", "episode": e, "worker": self.worker_id, "reason": str(exc)})
                continue
            slot.episode, slot.state, slot.env_seed = e, state, env_seed
            slot.sample_seed = derive_seed(c.seed, e, 1)
            slot.reward_cents = 0
            slot.invalid = slot.tvd = 0.0
            slot.start_manhattan = manhattan_to_goal(state)
            slot.active = True
            return

    def _finish(self, slot: _Slot) -> None:
        c, s = self.config, slot.state
        steps = s.step_count
        self.emit(
            {
                "type": "episode",
                "episode": slot.episode,
                "worker": self.worker_id,
                "map": s.map.name,
                "env_seed": slot.env_seed,
                "reward": slot.reward_cents / 100,
                "success": s.done_reason == "success",
                "steps": steps,
                "start_manhattan_m": slot.start_manhattan * CELL_METERS,
                "final_dist_m": s.distance_to_goal(),
                "invalid_prob": slot.invalid / max(steps, 1),
                "tvd": slot.tvd / max(steps, 1),
                "beta": c.beta(slot.episode),
            }
        )

    def _pull(self) -> None:
        if self.lock is not None:
            with self.lock:
                self.model.set_flat(self.shared)
        else:
            self.model.set_flat(self.shared)

    def _apply(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.model.parameters()]
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        if self.config.max_grad_norm > 0 and norm > self.config.max_grad_norm:
            scale = self.config.max_grad_norm / norm
            grads = [g * scale for g in grads]
        if self.lock is not None:
            with self.lock:
                dm.adam_step(self.shared_views, grads, self.adam)
        else:
            dm.adam_step(self.shared_views, grads, self.adam)
        self.updates += 1

    def run(self) -> None:
        c = self.config
        B, N = c.envs_per_worker, c.n_agents
        slots = [_Slot() for _ in range(B)]
        for slot in slots:
            self._start(slot)
        hidden = self.model.initial_state(B)
        r = c.obs_radius
        while any(s.active for s in slots):
            self._pull()
            buffer = RolloutBuffer(c.n_step)
            hidden = hidden.detach()
            with Tape() as tape:
                for _ in range(c.n_step):
                    live = [s.active for s in slots]
                    if not any(live):
                        break
                    states = [s.state if s.active else _placeholder(slots) for s in slots]
                    obs, headings = _stack_obs(states, r)
                    out = self.model.forward(obs, headings, hidden)
                    joint = assemble_joint_tensor(out, N)
                    S = _coordination_masks(states, N)
                    ma = np.zeros((B, N), dtype=np.int64)
                    comps = np.zeros(B, dtype=np.int64)
                    rewards = np.zeros((B, N))
                    done = np.zeros(B, dtype=bool)
                    betas = np.zeros(B)
                    weight = np.asarray(live, dtype=np.float64)
                    finished = []
                    for b, slot in enumerate(slots):
                        if not slot.active:
                            done[b] = True
                            continue
                        t = slot.state.step_count
                        ma[b], comps[b] = _sample(out, b, N, slot.sample_seed, t)
                        betas[b] = c.beta(slot.episode)
                        pi = joint.data[b]
                        ip = invalid_prob(pi, S[b].astype(bool))
                        tv = tvd(pi, c.train_tvd_method) if N == 2 or c.train_tvd_method == "marginals" else 0.0
                        world = self.worlds[slot.episode % len(self.worlds)]
                        new_state, outcome = world.step(slot.state, [Action(a) for a in ma[b]])
                        rewards[b] = outcome.rewards
                        slot.reward_cents += outcome.reward_cents[0]
                        slot.invalid += ip
                        slot.tvd += tv
                        if c.log_steps:
                            self.emit(
                                {
                                    "type": "step",
                                    "episode": slot.episode,
                                    "t": t,
                                    "multi_action": [Action(a).name for a in ma[b]],
                                    "component": int(comps[b]),
                                    "success": bool(outcome.success[0]),
                                    "reward": outcome.reward_cents[0] / 100,
                                    "invalid_prob": ip,
                                    "tvd": tv,
                                }
                            )
                        slot.state = new_state
                        if outcome.done:
                            done[b] = True
                            finished.append(b)
                    log_prob = _chosen_log_prob(out, ma, comps)
                    buffer.add(log_prob, out.values, rewards, done, joint, S, betas, weight)
                    keep = np.ones((B, 1, 1))
                    for b in finished:
                        self._finish(slots[b])
                        self._start(slots[b])
                        keep[b] = 0.0
                    hidden = out.state
                    if finished:
                        hidden = type(hidden)(dm.mul(hidden.hidden, keep), hidden.messages)
                bootstrap = self._bootstrap(slots, hidden, r)
                loss = a3c_loss(buffer, bootstrap, c)
                self.model.zero_grad()
                tape.backward(loss)
            self._apply()

    def _bootstrap(self, slots: Sequence[_Slot], hidden, r: int) -> np.ndarray:
        if not any(s.active for s in slots):
            return np.zeros(len(slots))
        states = [s.state if s.active else _placeholder(slots) for s in slots]
        obs, headings = _stack_obs(states, r)
        out = self.model.forward(obs, headings, hidden.detach())
        values = out.values.data.mean(axis=1)
        return np.where([s.active for s in slots], values, 0.0)


def _placeholder(slots: Sequence[_Slot]) -> WorldState:
    for s in slots:
        if s.state is not None:
            return s.state
    raise RuntimeError("no live state to pad the batch with")


@dataclass
class TrainResult:
    out_dir: Path
    episodes: List[dict]
    checkpoints: List[Path]
    skipped: int
    model: Model

    def episode_results(self) -> List[EpisodeResult]:
        return [_record_to_result(r) for r in self.episodes]


def _record_to_result(r: dict) -> EpisodeResult:
    return EpisodeResult(
        success=bool(r["success"]),
        steps=int(r["steps"]),
        start_manhattan_m=float(r["start_manhattan_m"]),
        final_distance_m=float(r["final_dist_m"]),
        invalid_prob=float(r["invalid_prob"]),
        tvd=float(r["tvd"]),
        reward=float(r["reward"]),
        map_name=r.get("map", ""),
        seed=int(r.get("env_seed", 0)),
    )


class _Writer:
    """Single consumer of worker records: log file, checkpoints, results."""

    def __init__(self, config: TrainConfig, out_dir: Path, snapshot: Callable[[], np.ndarray], model: Model):
        self.config = config
        self.out_dir = out_dir
        self.snapshot = snapshot
        self.model = model
        self.log = open(out_dir / "train_log.jsonl", "w")
        self.episodes: List[dict] = []
        self.checkpoints: List[Path] = []
        self.skipped = 0

    def __call__(self, record: dict) -> None:
        self.log.write(json.dumps(record, sort_keys=True) + "\n")
        if record["type"] == "skipped":
            self.skipped += 1
        elif record["type"] == "episode":
            self.episodes.append(record)
            done = len(self.episodes)
            if done % self.config.checkpoint_every == 0 and done < self.config.episodes:
                self.checkpoint(f"ckpt_{done:07d}.ckpt")

    def checkpoint(self, name: str) -> Path:
        path = self.out_dir / name
        self.model.set_flat(self.snapshot())
        meta = {
            "model": self.model.config.to_dict(),
            "train": self.config.to_dict(),
            "episodes_done": len(self.episodes),
        }
        dm.save_checkpoint(path, self.model.state_dict(), meta)
        self.checkpoints.append(path)
        return path

    def close(self) -> None:
        self.log.close()


def train(config: TrainConfig, maps: Optional[Sequence[GridMap]] = None, out_dir=None) -> TrainResult:
    """Run training; writes ``train_log.jsonl`` and checkpoints into ``out_dir``."""
    maps = list(maps) if maps is not None else resolve_maps(config.maps)
    out = Path(out_dir if out_dir is not None else config.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.to_text())
    model = build_model(model_config_for(config))
    n = model.n_params
    if config.workers == 1:
        shared = model.get_flat()
        adam = dm.AdamState.like([np.zeros(n)], lr=config.lr)
        adam = _adam_views(model, shared, adam.m[0], adam.v[0], adam.step, config.lr)
        writer = _Writer(config, out, lambda: shared.copy(), model)
        counter = iter(range(config.episodes))
        worker = _Worker(config, maps, lambda: next(counter, None), shared, adam, writer, None, 0)
        try:
            worker.run()
        finally:
            writer.close()
    else:
        writer = _run_hogwild(config, maps, model, out)
    final = writer.checkpoint("final.ckpt")
    log.info("trained %d episodes, %d skipped, final checkpoint %s", len(writer.episodes), writer.skipped, final)
    model.set_flat(writer.snapshot())
    return TrainResult(out, writer.episodes, writer.checkpoints, writer.skipped, model)


def _adam_views(model: Model, shared: np.ndarray, m: np.ndarray, v: np.ndarray, step: np.ndarray, lr: float):
    return dm.AdamState(m=model.flat_views(m), v=model.flat_views(v), step=step, lr=lr)


def _hogwild_worker(config, maps, raw, counter, lock, queue, worker_id):
    n = len(raw["params"])
    shared = np.frombuffer(raw["params"], dtype=np.float64, count=n)
    m = np.frombuffer(raw["m"], dtype=np.float64, count=n)
    v = np.frombuffer(raw["v"], dtype=np.float64, count=n)
    step = np.frombuffer(raw["step"], dtype=np.int64, count=1)

    def claim():
        with counter.get_lock():
            e = counter.value
            if e >= config.episodes:
                return None
            counter.value = e + 1
            return e

    model_stub = build_model(model_config_for(config))
    adam = _adam_views(model_stub, shared, m, v, step, config.lr)
    worker = _Worker(config, maps, claim, shared, adam, queue.put, lock if config.serialized else None, worker_id)
    try:
        worker.run()
    finally:
        queue.put({"type": "worker_done", "worker": worker_id, "updates": worker.updates})


def _run_hogwild(config: TrainConfig, maps, model: Model, out: Path) -> _Writer:
    ctx = mp.get_context("fork")
    n = model.n_params
    raw = {
        "params": ctx.RawArray("d", n),
        "m": ctx.RawArray("d", n),
        "v": ctx.RawArray("d", n),
        "step": ctx.RawArray("q", 1),
    }
    shared = np.frombuffer(raw["params"], dtype=np.float64, count=n)
    shared[:] = model.get_flat()
    counter = ctx.Value("q", 0)
    lock = ctx.Lock()
    queue = ctx.Queue()
    writer = _Writer(config, out, lambda: shared.copy(), model)
    procs = [
        ctx.Process(target=_hogwild_worker, args=(config, maps, raw, counter, lock, queue, w), daemon=True)
        for w in range(config.workers)
    ]
    for p in procs:
        p.start()
    remaining = len(procs)
    try:
        while remaining:
            record = queue.get()
            if record["type"] == "worker_done":
                remaining -= 1
                continue
            writer(record)
    finally:
        for p in procs:
            p.join()
        writer.close()
    bad = [p.exitcode for p in procs if p.exitcode != 0]
    if bad:
        raise RuntimeError(f"{len(bad)} worker(s) failed with exit codes {bad}")
    return writer


# -- evaluation ---------------------------------------------------------------------


def load_model(path) -> Tuple[Model, dict]:
    """Rebuild a model from a checkpoint, checking the manifest against the architecture."""
    arrays, meta = dm.load_checkpoint(path)
    if "model" not in meta:
        raise dm.CheckpointError(f"{path}: manifest has no model configuration")
    cfg = meta["model"]
    try:
        model = build_model(TboneConfig(**cfg))
    except TypeError as exc:
        raise dm.CheckpointError(f"{path}: incompatible model configuration ({exc})") from None
    expected = {k: p.shape for k, p in model.params.items()}
    found = {k: tuple(a.shape) for k, a in arrays.items()}
    if expected != found:
        diff = sorted(set(expected.items()) ^ set(found.items()))
        raise dm.CheckpointError(f"{path}: incompatible checkpoint manifest, mismatched tensors {diff[:4]}")
    model.load_state_dict(arrays)
    return model, meta


class PolicyController:
    """Samples multi-actions from a trained model, exactly as during training."""

    def __init__(self, model: Model, obs_radius: Optional[int] = None):
        self.model = model
        self.n_agents = model.config.n_agents
        size = model.config.obs_shape[1]
        self.obs_radius = (size - 1) // 2 if obs_radius is None else obs_radius
        self.hidden = None

    def reset(self) -> None:
        self.hidden = self.model.initial_state(1)

    def act(self, state: WorldState, sample_seed: int) -> dict:
        obs, headings = _stack_obs([state], self.obs_radius)
        out = self.model.forward(obs, headings, self.hidden)
        self.hidden = out.state
        joint = assemble_joint_tensor(out, self.n_agents).data[0]
        ma, j = _sample(out, 0, self.n_agents, sample_seed, state.step_count)
        info = {"multi_action": ma, "joint": joint, "component": j}
        if out.log_alpha is not None:
            info["alpha"] = np.exp(out.log_alpha.data[0]).tolist()
        if out.state.messages:
            info["messages"] = [m.data[0].tolist() for m in out.state.messages]
        return info


class ScriptedController:
    """Deterministic controller from ``fn(state) -> multi-action``; its joint is a point mass."""

    def __init__(self, fn: Callable[[WorldState], Sequence[int]], n_agents: int = 2):
        self.fn = fn
        self.n_agents = n_agents

    def reset(self) -> None:
        pass

    def act(self, state: WorldState, sample_seed: int) -> dict:
        ma = tuple(int(a) for a in self.fn(state))
        joint = np.zeros((NUM_ACTIONS,) * self.n_agents)
        joint[ma] = 1.0
        return {"multi_action": ma, "joint": joint, "component": 0}


def assign_maps(episodes: int, n_maps: int) -> List[int]:
    """Round-robin map index per episode; 7 episodes over 5 maps gives 2,2,1,1,1."""
    return [e % n_maps for e in range(episodes)]


@dataclass
class EvalResult:
    results: List[EpisodeResult] = field(default_factory=list)
    joints: List[List[np.ndarray]] = field(default_factory=list)  # per episode, per step
    trajectory: List[dict] = field(default_factory=list)  # JSON-ready log records


def evaluate(
    controller: Union[str, Path, Model, PolicyController, ScriptedController],
    maps: Sequence[GridMap],
    episodes: int,
    seed: int = 0,
    tvd_method: str = "optimize",
    max_steps: int = 250,
    double_positive_rewards: Optional[bool] = None,
    record: bool = True,
) -> EvalResult:
    """Stochastic rollouts with per-episode metrics; deterministic given ``seed``."""
    if isinstance(controller, (str, Path)):
        controller = load_model(controller)[0]
    if isinstance(controller, Model):
        controller = PolicyController(controller)
    maps = list(maps)
    if not maps:
        raise ValueError("no maps to evaluate on")
    n = controller.n_agents
    worlds = [GridWorld(m, n, max_steps, double_positive_rewards=double_positive_rewards) for m in maps]
    out = EvalResult()
    for e, mi in enumerate(assign_maps(episodes, len(maps))):
        world = worlds[mi]
        env_seed = derive_seed(seed, e, 0)
        sample_seed = derive_seed(seed, e, 1)
        state = world.reset(env_seed)
        controller.reset()
        start = manhattan_to_goal(state)
        if record:
            out.trajectory.append(_episode_header(e, world, env_seed, state))
        reward_cents = 0
        inv = tv_sum = 0.0
        joints = []
        while not state.done:
            info = controller.act(state, sample_seed)
            ma = info["multi_action"]
            S = build_coordination_tensor(state.headings)
            pi = info["joint"]
            ip = invalid_prob(pi, S)
            tv = tvd(pi, tvd_method) if (n == 2 or tvd_method == "marginals") else tvd(pi, "marginals")
            state, outcome = world.step(state, [Action(a) for a in ma])
            reward_cents += outcome.reward_cents[0]
            inv += ip
            tv_sum += tv
            joints.append(pi if n == 2 else pi.sum(axis=tuple(range(2, n))))
            if record:
                rec = {
                    "type": "step",
                    "episode": e,
                    "env_seed": env_seed,
                    "t": state.step_count - 1,
                    "multi_action": [Action(a).name for a in ma],
                    "success": list(outcome.success),
                    "reward_cents": list(outcome.reward_cents),
                    "agents": [[a.x, a.y, int(a.heading)] for a in state.agents],
                    "obj": [state.obj.x, state.obj.y, state.obj.rotation],
                    "done": outcome.done,
                    "done_reason": outcome.done_reason,
                    "invalid_prob": ip,
                    "tvd": tv,
                    "component": info.get("component", 0),
                }
                for key in ("alpha", "messages"):
                    if key in info:
                        rec[key] = info[key]
                out.trajectory.append(rec)
        steps = state.step_count
        out.results.append(
            EpisodeResult(
                success=state.done_reason == "success",
                steps=steps,
                start_manhattan_m=start * CELL_METERS,
                final_distance_m=state.distance_to_goal(),
                invalid_prob=inv / steps,
                tvd=tv_sum / steps,
                reward=reward_cents / 100,
                map_name=world.map.name,
                seed=env_seed,
            )
        )
        out.joints.append(joints)
    return out


def _episode_header(e: int, world: GridWorld, env_seed: int, state: WorldState) -> dict:
    return {
        "type": "episode",
        "episode": e,
        "map_name": world.map.name,
        "map_text": world.map.text,
        "env_seed": env_seed,
        "n_agents": world.n_agents,
        "max_steps": world.max_steps,
        "double_positive_rewards": world.double_positive_rewards,
        "object_size": list(state.obj.size),
        "agents": [[a.x, a.y, int(a.heading)] for a in state.agents],
        "obj": [state.obj.x, state.obj.y, state.obj.rotation],
    }
