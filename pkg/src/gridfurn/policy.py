"""Joint action distributions for decentralized agents.

Three policy families are represented:

* :class:`MarginalPolicy` - one distribution per agent, sampled independently,
  so the joint is the outer product (rank one);
* :class:`SyncPolicy` - a mixture of ``m`` such products, sampled in two
  stages with a component index that all agents derive from a shared random
  stream;
* :class:`CentralPolicy` - an explicit joint tensor.

All arrays are plain numpy; the differentiable versions used in training live
in :mod:`gridfurn.nets`.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .actions import CoordinationTensor

__all__ = [
    "LOG_FLOOR",
    "MarginalPolicy",
    "SyncPolicy",
    "CentralPolicy",
    "SharedRandomStream",
    "StreamDesyncError",
    "assemble_joint",
    "sync_sample",
    "sync_sample_many",
    "sample_mixture",
    "counter_uniforms",
    "sample_joint",
    "invalid_prob",
    "best_rank_one",
    "product_of_marginals",
    "tvd",
    "joint_log_prob",
    "mixture_from_joint",
    "joint_to_csv",
    "joint_from_csv",
]

LOG_FLOOR = 1e-10
_TOL = 1e-9


def _check_simplex(p: np.ndarray, what: str, tol: float = _TOL) -> None:
    if np.any(p < 0):
        raise ValueError(f"{what} has negative entries")
    sums = p.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=tol, rtol=0):
        raise ValueError(f"{what} does not sum to 1 (sums={sums})")


@dataclass(frozen=True)
class MarginalPolicy:
    probs: np.ndarray  # (N, A)

    def __post_init__(self):
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))
        if self.probs.ndim != 2:
            raise ValueError("marginal probs must have shape (N, A)")
        _check_simplex(self.probs, "marginal policy")

    @property
    def n_agents(self) -> int:
        return self.probs.shape[0]


@dataclass(frozen=True)
class SyncPolicy:
    alpha: np.ndarray  # (m,)
    probs: np.ndarray  # (N, m, A)

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=np.float64))
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))
        if self.probs.ndim != 3 or self.probs.shape[1] != self.alpha.shape[0]:
            raise ValueError("sync policy needs alpha (m,) and probs (N, m, A)")
        if self.m < 1:
            raise ValueError("need at least one mixture component")
        _check_simplex(self.alpha, "mixing weights")
        _check_simplex(self.probs, "component policy")

    @property
    def m(self) -> int:
        return self.alpha.shape[0]

    @property
    def n_agents(self) -> int:
        return self.probs.shape[0]


@dataclass(frozen=True)
class CentralPolicy:
    joint: np.ndarray  # (A,) * N

    def __post_init__(self):
        object.__setattr__(self, "joint", np.asarray(self.joint, dtype=np.float64))
        if np.any(self.joint < 0) or abs(self.joint.sum() - 1.0) > _TOL:
            raise ValueError("central joint must be a probability tensor")

    @property
    def n_agents(self) -> int:
        return self.joint.ndim


Policy = Union[MarginalPolicy, SyncPolicy, CentralPolicy]


def _outer(vectors: Sequence[np.ndarray]) -> np.ndarray:
    out = vectors[0]
    for v in vectors[1:]:
        out = np.multiply.outer(out, v)
    return out


def assemble_joint(p: Policy) -> np.ndarray:
    """Dense joint tensor ``sum_j alpha_j * pi^1_j (x) ... (x) pi^N_j``."""
    if isinstance(p, CentralPolicy):
        return p.joint.copy()
    if isinstance(p, MarginalPolicy):
        return _outer(list(p.probs))
    if isinstance(p, SyncPolicy):
        n, m, a = p.probs.shape
        joint = np.zeros((a,) * n)
        for j in range(m):
            joint += p.alpha[j] * _outer([p.probs[i, j] for i in range(n)])
        return joint
    raise TypeError(f"not a policy: {type(p).__name__}")


# -- shared randomness ---------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(z: int) -> int:
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _key(seed: int, lane: int, index: int) -> int:
    return _splitmix64(_splitmix64(_splitmix64(seed & _MASK64) ^ lane) ^ (index & _MASK64))


def _splitmix64_np(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = z + np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def counter_uniforms(seed: int, lane: int, indices: np.ndarray) -> np.ndarray:
    """Vectorised twin of :meth:`SharedRandomStream.uniform_at` (bit-identical)."""
    base = np.uint64(_splitmix64(_splitmix64(seed & _MASK64) ^ lane))
    z = _splitmix64_np(base ^ np.asarray(indices, dtype=np.uint64))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


class StreamDesyncError(RuntimeError):
    pass


class SharedRandomStream:
    """Counter-based uniform generator.

    A value is a pure function of ``(seed, lane, index)``. Lane 0 is the
    shared lane that every agent reads identically; lane ``i + 1`` is agent
    ``i``'s private lane. Agents holding streams with equal seeds never need
    to exchange state to stay in step, provided they advance ``index``
    together (one increment per sampling round).
    """

    SHARED = 0

    def __init__(self, seed: int, index: int = 0):
        self.seed = int(seed)
        self.index = int(index)

    def uniform_at(self, lane: int, index: int) -> float:
        return (_key(self.seed, lane, index) >> 11) * (1.0 / (1 << 53))

    def shared_uniform(self) -> float:
        return self.uniform_at(self.SHARED, self.index)

    def private_uniform(self, agent: int) -> float:
        return self.uniform_at(agent + 1, self.index)

    def advance(self) -> None:
        self.index += 1

    def copy(self) -> "SharedRandomStream":
        return SharedRandomStream(self.seed, self.index)


def _categorical(u: float, probs: np.ndarray) -> int:
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(probs) - 1))


def _categorical_many(u: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Row-wise inverse-CDF sampling; ``probs`` is (n, k) or (k,)."""
    cdf = np.cumsum(probs, axis=-1)
    if cdf.ndim == 1:
        idx = np.searchsorted(cdf, u * cdf[-1], side="right")
    else:
        idx = (cdf <= (u * cdf[:, -1])[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[-1] - 1)


def sync_sample(
    p: Policy,
    streams: Sequence[SharedRandomStream],
    debug: bool = True,
) -> Tuple[Tuple[int, ...], int, np.ndarray]:
    """Two-stage decentralized sampling.

    Each agent ``i`` uses only ``streams[i]``: it reads the shared lane to
    pick the component ``j ~ alpha`` and its private lane to pick its action
    from ``pi^i_j``. Returns the multi-action, the component index and the
    per-agent log-probabilities ``log pi^i_j(a^i)``. Every stream is advanced.

    Marginal policies are treated as ``m = 1``. Central policies have no
    per-agent factorization; the joint index is drawn from the shared lane.
    """
    if isinstance(p, CentralPolicy):
        joint = p.joint.reshape(-1)
        flat = _categorical(streams[0].shared_uniform(), joint)
        for s in streams:
            s.advance()
        ma = tuple(int(i) for i in np.unravel_index(flat, p.joint.shape))
        return ma, 0, np.array([np.log(max(joint[flat], LOG_FLOOR))])
    if isinstance(p, MarginalPolicy):
        return sample_mixture(np.ones(1), p.probs[:, None, :], streams, debug)
    return sample_mixture(p.alpha, p.probs, streams, debug)


def sample_mixture(
    alpha: np.ndarray,
    probs: np.ndarray,
    streams: Sequence[SharedRandomStream],
    debug: bool = True,
) -> Tuple[Tuple[int, ...], int, np.ndarray]:
    """:func:`sync_sample` on raw arrays ``alpha (m,)`` and ``probs (N, m, A)``."""
    n = probs.shape[0]
    if len(streams) != n:
        raise ValueError(f"{len(streams)} streams for {n} agents")
    components = [_categorical(s.shared_uniform(), alpha) for s in streams]
    if debug and (len(set(components)) != 1 or len({s.index for s in streams}) != 1):
        raise StreamDesyncError(f"agents disagree on the component: {components}")
    actions = []
    logps = np.empty(n)
    for i, s in enumerate(streams):
        ji = components[i]
        a = _categorical(s.private_uniform(i), probs[i, ji])
        actions.append(a)
        logps[i] = np.log(max(probs[i, ji, a], LOG_FLOOR))
        s.advance()
    return tuple(actions), components[0], logps


def sync_sample_many(p: SyncPolicy, seed: int, n: int, start: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`sync_sample` over stream indices ``start .. start+n-1``.

    Each agent recomputes the component index from its own copy of the shared
    lane. Returns ``(actions (n, N), components (N, n))``; the component rows
    are per-agent so callers can check agreement.
    """
    idx = np.arange(start, start + n, dtype=np.uint64)
    comps = np.empty((p.n_agents, n), dtype=np.int64)
    actions = np.empty((n, p.n_agents), dtype=np.int64)
    for i in range(p.n_agents):
        # Agent i's local copy of the shared lane.
        local = counter_uniforms(seed, SharedRandomStream.SHARED, idx)
        comps[i] = _categorical_many(local, p.alpha)
        u = counter_uniforms(seed, i + 1, idx)
        actions[:, i] = _categorical_many(u, p.probs[i][comps[i]])
    return actions, comps


def sample_joint(joint: np.ndarray, u: float) -> Tuple[int, ...]:
    flat = _categorical(u, joint.reshape(-1))
    return tuple(int(i) for i in np.unravel_index(flat, joint.shape))


# -- coordination metrics ------------------------------------------------------


def invalid_prob(joint: np.ndarray, S: CoordinationTensor | np.ndarray) -> float:
    """Probability mass on uncoordinated multi-actions, ``<1 - S, Pi>``."""
    mask = S.mask if isinstance(S, CoordinationTensor) else np.asarray(S, dtype=bool)
    joint = np.asarray(joint)
    if joint.shape != mask.shape:
        raise ValueError(f"joint shape {joint.shape} does not match coordination tensor {mask.shape}")
    return float(joint[~mask].sum())


def product_of_marginals(joint: np.ndarray) -> np.ndarray:
    n = joint.ndim
    margs = [joint.sum(axis=tuple(k for k in range(n) if k != i)) for i in range(n)]
    return _outer(margs)


def _tv(a: np.ndarray, b: np.ndarray) -> float:
    return 0.5 * float(np.abs(a - b).sum())


def _best_factor(P: np.ndarray, q: np.ndarray) -> np.ndarray:
    """argmin over the simplex of ``sum_ij |P_ij - p_i q_j|`` for fixed ``q``.

    The objective separates into convex piecewise-linear functions of each
    ``p_i`` with breakpoints ``P_ij / q_j``. Starting from ``p = 0`` and
    spending the unit budget on segments in order of increasing slope gives
    the exact minimiser.
    """
    rows, cols = P.shape
    pos = q > 0
    qp = q[pos]
    Pq = P[:, pos]
    total = qp.sum()
    if Pq.shape[1] == 0:
        return np.full(rows, 1.0 / rows)
    bp = Pq / qp  # (rows, k)
    order = np.argsort(bp, axis=1)
    bps = np.take_along_axis(bp, order, axis=1)
    qs = qp[order]
    # Slope after passing the first k breakpoints: -total + 2 * sum(q of passed).
    passed = np.concatenate([np.zeros((rows, 1)), np.cumsum(qs, axis=1)], axis=1)
    slopes = -total + 2.0 * passed  # (rows, k+1)
    starts = np.concatenate([np.zeros((rows, 1)), bps], axis=1)
    ends = np.concatenate([bps, np.full((rows, 1), np.inf)], axis=1)
    lengths = ends - starts
    flat_order = np.argsort(slopes, axis=None, kind="stable")
    # Lengths beyond the unit budget behave like 1; this also removes the infinities.
    flat_len = np.minimum(lengths.reshape(-1)[flat_order], 1.0)
    flat_row = np.repeat(np.arange(rows), slopes.shape[1])[flat_order]
    spent_before = np.concatenate([[0.0], np.cumsum(flat_len)[:-1]])
    take = np.clip(1.0 - spent_before, 0.0, flat_len)
    p = np.bincount(flat_row, weights=take, minlength=rows)
    budget = 1.0 - p.sum()
    if budget > 1e-12:  # only reachable if every segment is empty
        p += budget / rows
    return p


def best_rank_one(
    joint: np.ndarray,
    restarts: int = 5,
    max_iter: int = 50,
    tol: float = 1e-6,
    seed: int = 0,
) -> Tuple[np.ndarray, float]:
    """Rank-one probability matrix ``p (x) q`` closest to ``joint`` in total variation.

    Alternates exact minimisation over ``p`` and ``q``. The first start is the
    product of the marginals; the remaining ``restarts`` start from random
    Dirichlet draws. Returns ``(p (x) q, tv)`` for the best start.
    """
    P = np.asarray(joint, dtype=np.float64)
    if P.ndim != 2:
        raise ValueError("best_rank_one supports two agents only")
    rng = np.random.default_rng(seed)
    best = product_of_marginals(P)
    best_tv = _tv(P, best)
    starts = [P.sum(axis=0)] + [rng.dirichlet(np.ones(P.shape[1])) for _ in range(restarts)]
    for q in starts:
        prev = np.inf
        for _ in range(max_iter):
            p = _best_factor(P, q)
            q = _best_factor(P.T, p)
            cur = _tv(P, np.outer(p, q))
            if prev - cur < tol:
                break
            prev = cur
        if cur < best_tv:
            best, best_tv = np.outer(p, q), cur
    return best, best_tv


def tvd(joint: np.ndarray, method: str = "optimize", **kwargs) -> float:
    """Total variation between a joint tensor and a rank-one approximation.

    ``method="optimize"`` uses :func:`best_rank_one` (two agents only);
    ``method="marginals"`` compares against the product of the marginals.
    """
    joint = np.asarray(joint, dtype=np.float64)
    if method == "marginals":
        return _tv(joint, product_of_marginals(joint))
    if method == "optimize":
        if joint.ndim != 2:
            raise ValueError("the optimizing TVD method supports two agents; use method='marginals'")
        return best_rank_one(joint, **kwargs)[1]
    raise ValueError(f"unknown TVD method {method!r}")


def joint_log_prob(p: Policy, ma: Sequence[int]) -> float:
    """``log Pi(ma)``; ``-inf`` for zero-probability multi-actions."""
    value = assemble_joint(p)[tuple(int(a) for a in ma)]
    return float(np.log(value)) if value > 0 else -np.inf


def mixture_from_joint(joint: np.ndarray) -> SyncPolicy:
    """Exact mixture-of-marginals decomposition of a two-agent joint.

    Component ``j`` puts agent 1 on action ``j`` and agent 2 on the
    conditional ``joint[j] / joint[j].sum()``; ``alpha`` is the row marginal.
    This uses ``m = A`` components.
    """
    P = np.asarray(joint, dtype=np.float64)
    if P.ndim != 2:
        raise ValueError("two-agent joints only")
    a = P.shape[0]
    alpha = P.sum(axis=1)
    first = np.eye(a)
    second = np.where(alpha[:, None] > 0, P / np.where(alpha > 0, alpha, 1.0)[:, None], 1.0 / P.shape[1])
    return SyncPolicy(alpha / alpha.sum(), np.stack([first, second]))


# -- serialization -------------------------------------------------------------


def joint_to_csv(joint: np.ndarray, labels: Optional[Sequence[str]] = None) -> str:
    """Rows are agent-1 actions, columns agent-2 actions."""
    joint = np.asarray(joint)
    if joint.ndim != 2:
        raise ValueError("CSV export supports two-agent joints")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if labels is not None:
        w.writerow([""] + list(labels))
    for i, row in enumerate(joint):
        prefix = [labels[i]] if labels is not None else []
        w.writerow(prefix + [repr(float(v)) for v in row])
    return buf.getvalue()


def joint_from_csv(text: str) -> np.ndarray:
    rows = list(csv.reader(io.StringIO(text)))
    if rows and rows[0] and rows[0][0] == "":
        rows = [r[1:] for r in rows[1:]]
    return np.array([[float(v) for v in r] for r in rows if r])
