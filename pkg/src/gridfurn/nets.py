"""Recurrent communicating actor-critic networks.

The decentralized backbone runs per agent (all weights shared, agents told
apart by a learned embedding):

    observation -> 2-layer MLP encoder -> [encoding; embedding] -> GRU
    -> message round 1 -> message round 2 -> final hidden state

In each round every agent emits a 16-dim message and reads the mean of the
other agents' messages. Heads on top of the final hidden state produce ``m``
action distributions per agent, a value per agent and, for ``m > 1``, mixing
weights computed from the concatenated round-2 messages.

The central baseline encodes all observations jointly and emits one softmax
over all ``13 ** N`` multi-actions.

Batched tensors carry a leading batch axis ``B`` (parallel environments) and
an agent axis ``N``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from . import diffmath as dm
from .actions import NUM_ACTIONS
from .diffmath import Tensor

__all__ = [
    "POLICY_TYPES",
    "TboneConfig",
    "TboneState",
    "ModelOutput",
    "Model",
    "TboneModel",
    "CentralModel",
    "build_model",
    "alpha_head",
    "assemble_joint_tensor",
    "agent_marginals",
]

POLICY_TYPES = ("marginal", "marginal-no-comm", "sync", "central")


@dataclass
class TboneConfig:
    n_agents: int = 2
    obs_shape: Tuple[int, int, int] = (5, 15, 15)
    hidden: int = 128
    encoder_hidden: int = 128
    embed_dim: int = 16
    msg_dim: int = 16
    rounds: int = 2
    alpha_hidden: int = 64
    m: int = 1
    policy: str = "sync"
    heading_input: bool = True
    n_actions: int = NUM_ACTIONS
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.obs_shape = tuple(self.obs_shape)
        if self.policy not in POLICY_TYPES:
            raise ValueError(f"unknown policy type {self.policy!r}")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.rounds != 2:
            raise ValueError("the backbone uses exactly two communication rounds")
        if self.policy != "sync" and self.m != 1:
            raise ValueError(f"{self.policy} policies have a single component (m=1)")

    @property
    def obs_features(self) -> int:
        c, h, w = self.obs_shape
        return c * h * w + (4 if self.heading_input else 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["obs_shape"] = list(self.obs_shape)
        return d


class TboneState(NamedTuple):
    hidden: Tensor  # (B, N, H) recurrent memory
    messages: Tuple[Tensor, ...] = ()  # per round, (B, N, msg_dim)

    def detach(self) -> "TboneState":
        return TboneState(self.hidden.detach(), tuple(m.detach() for m in self.messages))


class ModelOutput(NamedTuple):
    log_probs: Tensor  # (B, N, m, A) per-component log policies; central: (B, A**N)
    log_alpha: Optional[Tensor]  # (B, m)
    values: Tensor  # (B, N) or (B, 1) for central
    state: TboneState


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, scale: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, scale / np.sqrt(fan_in), size=(fan_in, fan_out))


def _features(obs: np.ndarray, headings: np.ndarray, heading_input: bool) -> np.ndarray:
    b, n = obs.shape[:2]
    flat = obs.reshape(b, n, -1)
    if heading_input:
        onehot = np.eye(4)[np.asarray(headings, dtype=np.int64)]
        flat = np.concatenate([flat, onehot], axis=-1)
    return flat


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return dm.add(dm.matmul(x, w), b)


def _gru(x: Tensor, h: Tensor, p: Dict[str, Tensor], size: int) -> Tensor:
    gx = _linear(x, p["gru_wx"], p["gru_bx"])
    gh = dm.matmul(h, p["gru_wh"])
    z = dm.sigmoid(dm.add(gx[:, :size], gh[:, :size]))
    r = dm.sigmoid(dm.add(gx[:, size : 2 * size], gh[:, size : 2 * size]))
    n = dm.tanh(dm.add(gx[:, 2 * size :], dm.mul(r, gh[:, 2 * size :])))
    return dm.add(n, dm.mul(z, dm.sub(h, n)))


def alpha_head(messages: Tensor, params: Dict[str, Tensor]) -> Tensor:
    """Mixing logits from the concatenated round-2 messages ``(B, N*msg_dim)``.

    Two hidden ReLU layers of width 64, then a linear map to ``m`` logits.
    """
    x = dm.relu(_linear(messages, params["alpha_w1"], params["alpha_b1"]))
    x = dm.relu(_linear(x, params["alpha_w2"], params["alpha_b2"]))
    return _linear(x, params["alpha_w3"], params["alpha_b3"])


class Model:
    """Shared plumbing: named parameters with optional flat backing storage."""

    def __init__(self, config: TboneConfig):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.params: Dict[str, Tensor] = {}

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = dm.parameter(value, name=name, dtype=self.dtype)

    @property
    def names(self) -> List[str]:
        return list(self.params)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def bind(self, flat: np.ndarray) -> None:
        """Make every parameter a view into ``flat`` (copying current values in)."""
        if flat.size != self.n_params:
            raise ValueError(f"flat buffer has {flat.size} entries, model needs {self.n_params}")
        offset = 0
        for p in self.params.values():
            view = flat[offset : offset + p.size].reshape(p.shape)
            view[...] = p.data
            p.data = view
            offset += p.size

    def flat_views(self, flat: np.ndarray) -> List[np.ndarray]:
        """Views of ``flat`` laid out like this model's parameters (no copy)."""
        views, offset = [], 0
        for p in self.params.values():
            views.append(flat[offset : offset + p.size].reshape(p.shape))
            offset += p.size
        return views

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.params.values()])

    def set_flat(self, flat: np.ndarray) -> None:
        for p, v in zip(self.params.values(), self.flat_views(np.asarray(flat))):
            p.data[...] = v

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, arrays: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(arrays)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, p in self.params.items():
            if arrays[k].shape != p.shape:
                raise ValueError(f"{k}: shape {arrays[k].shape} != {p.shape}")
            p.data[...] = arrays[k]

    def initial_state(self, batch: int) -> TboneState:
        raise NotImplementedError

    def forward(self, obs: np.ndarray, headings: np.ndarray, state: TboneState) -> ModelOutput:
        raise NotImplementedError


class TboneModel(Model):
    """Decentralized backbone with marginal or mixture (SYNC) heads."""

    def __init__(self, config: TboneConfig):
        super().__init__(config)
        c = config
        if c.policy == "central":
            raise ValueError("use CentralModel for the central policy")
        rng = np.random.default_rng(c.seed)
        H, E, D, K = c.hidden, c.encoder_hidden, c.embed_dim, c.msg_dim
        self._add("enc_w1", _init_linear(rng, c.obs_features, E))
        self._add("enc_b1", np.zeros(E))
        self._add("enc_w2", _init_linear(rng, E, E))
        self._add("enc_b2", np.zeros(E))
        self._add("embed", rng.normal(0.0, 1.0, size=(c.n_agents, D)))
        self._add("gru_wx", _init_linear(rng, E + D, 3 * H))
        self._add("gru_bx", np.zeros(3 * H))
        self._add("gru_wh", _init_linear(rng, H, 3 * H))
        if self.communicates:
            for r in (1, 2):
                in_dim = H if r == 1 else H
                self._add(f"msg{r}_w", _init_linear(rng, in_dim, K))
                self._add(f"msg{r}_b", np.zeros(K))
                self._add(f"upd{r}_w", _init_linear(rng, H + K, H))
                self._add(f"upd{r}_b", np.zeros(H))
        if c.m > 1:
            A = c.alpha_hidden
            self._add("alpha_w1", _init_linear(rng, c.n_agents * K, A))
            self._add("alpha_b1", np.zeros(A))
            self._add("alpha_w2", _init_linear(rng, A, A))
            self._add("alpha_b2", np.zeros(A))
            self._add("alpha_w3", _init_linear(rng, A, c.m, scale=0.01))
            self._add("alpha_b3", np.zeros(c.m))
        self._add("pi_w", _init_linear(rng, H, c.m * c.n_actions, scale=0.01))
        self._add("pi_b", np.zeros(c.m * c.n_actions))
        self._add("v_w", _init_linear(rng, H, 1, scale=0.1))
        self._add("v_b", np.zeros(1))
        # Policy heads never outgrow the central joint head: m*H*13 <= H*13**N.
        if c.m * c.n_actions > c.n_actions**c.n_agents:
            raise ValueError(f"m={c.m} policy heads exceed the size of a central joint head")
        n = c.n_agents
        self._mix = np.array((np.ones((n, n)) - np.eye(n)) / max(n - 1, 1), dtype=self.dtype)

    @property
    def communicates(self) -> bool:
        return self.config.policy != "marginal-no-comm"

    def initial_state(self, batch: int) -> TboneState:
        c = self.config
        return TboneState(Tensor(np.zeros((batch, c.n_agents, c.hidden), dtype=self.dtype)))

    def forward(self, obs: np.ndarray, headings: np.ndarray, state: TboneState) -> ModelOutput:
        c, p = self.config, self.params
        b, n = obs.shape[:2]
        if n != c.n_agents:
            raise dm.ShapeError(f"expected {c.n_agents} agents, got {n}")
        H, K = c.hidden, c.msg_dim
        x = Tensor(_features(obs, headings, c.heading_input).reshape(b * n, -1).astype(self.dtype))
        x = dm.relu(_linear(x, p["enc_w1"], p["enc_b1"]))
        x = dm.relu(_linear(x, p["enc_w2"], p["enc_b2"]))
        emb = p["embed"][np.tile(np.arange(n), b)]
        h_prev = dm.reshape(state.hidden, (b * n, H))
        h_mem = _gru(dm.concat([x, emb], axis=1), h_prev, p, H)

        h = h_mem
        messages = []
        if self.communicates:
            for r in (1, 2):
                msg = dm.tanh(_linear(h, p[f"msg{r}_w"], p[f"msg{r}_b"]))
                heard = dm.matmul(Tensor(self._mix), dm.reshape(msg, (b, n, K)))
                h = dm.tanh(_linear(dm.concat([h, dm.reshape(heard, (b * n, K))], axis=1), p[f"upd{r}_w"], p[f"upd{r}_b"]))
                messages.append(dm.reshape(msg, (b, n, K)))

        logits = dm.reshape(_linear(h, p["pi_w"], p["pi_b"]), (b, n, c.m, c.n_actions))
        log_probs = dm.log_softmax(logits, axis=-1)
        values = dm.reshape(_linear(h, p["v_w"], p["v_b"]), (b, n))
        log_alpha = None
        if c.m > 1:
            log_alpha = dm.log_softmax(alpha_head(dm.reshape(messages[1], (b, n * K)), p), axis=-1)
        new_state = TboneState(dm.reshape(h_mem, (b, n, H)), tuple(messages))
        return ModelOutput(log_probs, log_alpha, values, new_state)


class CentralModel(Model):
    """Single network over all agents' observations with a joint softmax."""

    def __init__(self, config: TboneConfig):
        super().__init__(config)
        c = config
        rng = np.random.default_rng(c.seed)
        H, E = c.hidden, c.encoder_hidden
        joint = c.n_actions**c.n_agents
        self._add("enc_w1", _init_linear(rng, c.n_agents * c.obs_features, E))
        self._add("enc_b1", np.zeros(E))
        self._add("enc_w2", _init_linear(rng, E, E))
        self._add("enc_b2", np.zeros(E))
        self._add("gru_wx", _init_linear(rng, E, 3 * H))
        self._add("gru_bx", np.zeros(3 * H))
        self._add("gru_wh", _init_linear(rng, H, 3 * H))
        self._add("pi_w", _init_linear(rng, H, joint, scale=0.01))
        self._add("pi_b", np.zeros(joint))
        self._add("v_w", _init_linear(rng, H, 1, scale=0.1))
        self._add("v_b", np.zeros(1))

    @staticmethod
    def count_params(config: TboneConfig) -> int:
        c = config
        H, E = c.hidden, c.encoder_hidden
        joint = c.n_actions**c.n_agents
        return (c.n_agents * c.obs_features + 1) * E + (E + 1) * E + (E + 1) * 3 * H + H * 3 * H + (H + 1) * joint + H + 1

    def initial_state(self, batch: int) -> TboneState:
        return TboneState(Tensor(np.zeros((batch, 1, self.config.hidden), dtype=self.dtype)))

    def forward(self, obs: np.ndarray, headings: np.ndarray, state: TboneState) -> ModelOutput:
        c, p = self.config, self.params
        b = obs.shape[0]
        H = c.hidden
        x = Tensor(_features(obs, headings, c.heading_input).reshape(b, -1).astype(self.dtype))
        x = dm.relu(_linear(x, p["enc_w1"], p["enc_b1"]))
        x = dm.relu(_linear(x, p["enc_w2"], p["enc_b2"]))
        h = _gru(x, dm.reshape(state.hidden, (b, H)), p, H)
        log_probs = dm.log_softmax(_linear(h, p["pi_w"], p["pi_b"]), axis=-1)
        values = _linear(h, p["v_w"], p["v_b"])
        return ModelOutput(log_probs, None, values, TboneState(dm.reshape(h, (b, 1, H))))


def build_model(config: TboneConfig) -> Model:
    return CentralModel(config) if config.policy == "central" else TboneModel(config)


# -- differentiable joint tensors ----------------------------------------------


def assemble_joint_tensor(out: ModelOutput, n_agents: int) -> Tensor:
    """Joint tensor ``(B, A, ..., A)`` from a model output, on the tape."""
    if out.log_alpha is None and out.log_probs.ndim == 2:
        b, size = out.log_probs.shape
        a = round(size ** (1.0 / n_agents))
        return dm.reshape(dm.exp(out.log_probs), (b,) + (a,) * n_agents)
    probs = dm.exp(out.log_probs)  # (B, N, m, A)
    b, n, m, a = probs.shape
    joint = None
    for i in range(n):
        shape = [b, m] + [1] * n
        shape[2 + i] = a
        factor = dm.reshape(probs[:, i], tuple(shape))
        joint = factor if joint is None else dm.mul(joint, factor)
    if out.log_alpha is not None:
        joint = dm.mul(joint, dm.reshape(dm.exp(out.log_alpha), (b, m) + (1,) * n))
    return dm.tsum(joint, axis=1)


def agent_marginals(joint: Tensor) -> Tensor:
    """Per-agent marginals ``(B, N, A)`` of a batched joint tensor."""
    n = joint.ndim - 1
    parts = []
    for i in range(n):
        axes = tuple(1 + k for k in range(n) if k != i)
        parts.append(dm.reshape(dm.tsum(joint, axis=axes), (joint.shape[0], 1, joint.shape[1 + i])))
    return dm.concat(parts, axis=1)
