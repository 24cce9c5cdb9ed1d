"""Two-player cooperative rock-paper-scissors against a best-responding adversary.

Both team members pick from {R, P, S}. If they disagree the team loses
(-1). If they agree, their common action plays standard rock-paper-scissors
against the adversary. The adversary sees the team's joint policy before
choosing, so a joint ``Pi`` is worth ``min_e E_Pi[payoff(., ., e)]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import diffmath as dm
from .diffmath import Tape, Tensor
from .policy import SyncPolicy, assemble_joint, sync_sample_many

__all__ = [
    "ACTIONS",
    "payoff",
    "payoff_tensor",
    "adversary_value",
    "best_response",
    "optimal_rank_one_search",
    "rank_one_optimum",
    "RpsRun",
    "run_rps_experiment",
    "point_mass_sync_policy",
]

ACTIONS = ("R", "P", "S")
_BEATS = {0: 2, 1: 0, 2: 1}  # R beats S, P beats R, S beats P


def _index(a) -> int:
    if isinstance(a, str):
        return ACTIONS.index(a.upper())
    return int(a)


def payoff(a1, a2, ae) -> int:
    """Team reward: -1 on disagreement, else the common action's RPS result vs ``ae``."""
    a1, a2, ae = _index(a1), _index(a2), _index(ae)
    if a1 != a2:
        return -1
    if a1 == ae:
        return 0
    return 1 if _BEATS[a1] == ae else -1


def payoff_tensor() -> np.ndarray:
    """``U[a1, a2, ae]`` for all 27 triples."""
    return np.array([[[payoff(a, b, e) for e in range(3)] for b in range(3)] for a in range(3)], dtype=np.float64)


_U = payoff_tensor()
# Diagonal outcome of the common action vs the adversary, u[a, e].
_DIAG = np.array([[_U[a, a, e] for e in range(3)] for a in range(3)])


def _check_joint(joint: np.ndarray) -> np.ndarray:
    joint = np.asarray(joint, dtype=np.float64)
    if joint.shape != (3, 3):
        raise ValueError(f"joint must be 3x3, got {joint.shape}")
    if np.any(joint < -1e-12) or abs(joint.sum() - 1.0) > 1e-9:
        raise ValueError("joint must be a probability matrix")
    return joint


def _expected_per_adversary(joint: np.ndarray) -> np.ndarray:
    return np.einsum("ab,abe->e", joint, _U)


def best_response(joint: np.ndarray) -> int:
    """Adversary action minimising the team's expected reward (lowest index on ties)."""
    return int(np.argmin(_expected_per_adversary(_check_joint(joint))))


def adversary_value(joint: np.ndarray) -> float:
    return float(_expected_per_adversary(_check_joint(joint)).min())


def rank_one_optimum() -> Tuple[np.ndarray, float]:
    """Closed-form optimal product policy and its value ``5 - 4 sqrt 2``."""
    r2 = math.sqrt(2.0)
    return np.array([2.0 - r2, 0.0, r2 - 1.0]), 5.0 - 4.0 * r2


# -- rank-one search ------------------------------------------------------------


def _simplex_grid(k: int) -> np.ndarray:
    i, j = np.meshgrid(np.arange(k + 1), np.arange(k + 1), indexing="ij")
    keep = i + j <= k
    i, j = i[keep], j[keep]
    return np.stack([i, j, k - i - j], axis=1) / k


def _inner_best(p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Exact ``max_q min_e f_e(p, q)`` for each row of ``p`` (shape ``(P, 3)``).

    For fixed ``p`` the value is ``sum_a p_a q_a (u[a, e] + 1) - 1``, a
    minimum of three linear functions of ``q``. Its maximum over the simplex
    sits at a simplex vertex, at a point on an edge where two of the linear
    functions cross, or at the interior point where all three agree, so we
    evaluate exactly those candidates.
    """
    P = p.shape[0]
    C = p[:, None, :] * (_DIAG.T[None, :, :] + 1.0)  # (P, e, a)
    cands = [np.broadcast_to(np.eye(3)[a], (P, 3)) for a in range(3)]
    for a, b in ((0, 1), (0, 2), (1, 2)):
        for e1, e2 in ((0, 1), (0, 2), (1, 2)):
            d = C[:, e1, :] - C[:, e2, :]
            denom = d[:, b] - d[:, a]
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(denom != 0, d[:, b] / denom, -1.0)
            t = np.where((t >= 0) & (t <= 1), t, np.nan)
            q = np.zeros((P, 3))
            q[:, a] = t
            q[:, b] = 1.0 - t
            cands.append(q)
    # Interior point: C_0 q = C_1 q = C_2 q, sum q = 1.
    A = np.zeros((P, 3, 3))
    A[:, 0] = C[:, 0] - C[:, 1]
    A[:, 1] = C[:, 0] - C[:, 2]
    A[:, 2] = 1.0
    rhs = np.broadcast_to(np.array([0.0, 0.0, 1.0]), (P, 3))
    det = np.linalg.det(A)
    ok = np.abs(det) > 1e-14
    q = np.full((P, 3), np.nan)
    if ok.any():
        q[ok] = np.linalg.solve(A[ok], rhs[ok][..., None])[..., 0]
    q[np.any(q < -1e-12, axis=1)] = np.nan
    cands.append(np.clip(q, 0.0, None))
    Q = np.stack(cands, axis=1)  # (P, K, 3)
    vals = np.einsum("pea,pka->pke", C, Q).min(axis=2) - 1.0
    vals = np.where(np.isnan(vals), -np.inf, vals)
    best = np.argmax(vals, axis=1)
    rows = np.arange(P)
    return Q[rows, best], vals[rows, best]


def _symmetric_values(p: np.ndarray) -> np.ndarray:
    C = p[:, None, :] * (_DIAG.T[None, :, :] + 1.0)
    return np.einsum("pea,pa->pe", C, p).min(axis=1) - 1.0


def optimal_rank_one_search(
    resolution: float = 1e-3,
    symmetric: bool = False,
    refine_rounds: int = 30,
) -> Tuple[np.ndarray, np.ndarray, float]:
    """Best product policy ``p (x) q`` against the adversary.

    Grid search over the 2-simplex for ``p`` (step ``resolution``) with the
    best ``q`` for each ``p`` computed exactly, followed by shrinking local
    grids around the incumbent. ``symmetric=True`` restricts to ``p = q``.
    Returns ``(p, q, value)``, cyclically relabeled so that ``p`` puts its
    largest probability on R.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    k = max(1, int(round(1.0 / resolution)))

    def evaluate(ps):
        if symmetric:
            return ps, _symmetric_values(ps)
        return _inner_best(ps)

    ps = _simplex_grid(k)
    qs, vals = evaluate(ps)
    i = int(np.argmax(vals))
    best_p, best_q, best_v = ps[i], qs[i], float(vals[i])
    step = 1.0 / k
    offsets = np.linspace(-2.0, 2.0, 9)
    for _ in range(refine_rounds):
        d0, d1 = np.meshgrid(offsets * step, offsets * step, indexing="ij")
        cand = best_p[None, :] + np.stack([d0.ravel(), d1.ravel(), -(d0 + d1).ravel()], axis=1)
        cand = cand[np.all(cand >= 0, axis=1)]
        cand = cand / cand.sum(axis=1, keepdims=True)
        qs, vals = evaluate(cand)
        i = int(np.argmax(vals))
        if vals[i] > best_v:
            best_p, best_q, best_v = cand[i], qs[i], float(vals[i])
        step /= 2.0
    # The game is invariant under relabeling R -> P -> S -> R, so optima come
    # in threes; report the one whose most likely action is R.
    shift = -int(np.argmax(best_p))
    return np.roll(best_p, shift), np.roll(best_q, shift), best_v


# -- learning -------------------------------------------------------------------


def point_mass_sync_policy(sharpness: float = 1.0) -> SyncPolicy:
    """Uniform mixture of the three agreeing point masses; ``sharpness < 1`` blurs them."""
    comp = np.full((3, 3), (1.0 - sharpness) / 2.0)
    np.fill_diagonal(comp, sharpness)
    return SyncPolicy(np.full(3, 1.0 / 3.0), np.stack([comp, comp]))


@dataclass
class RpsRun:
    policy_type: str
    m: int
    seed: int
    values: List[float] = field(default_factory=list)  # exact adversary value per iteration
    final_policy: Optional[SyncPolicy] = None

    def plateau(self, fraction: float = 0.1) -> float:
        """Mean value over the last ``fraction`` of iterations."""
        k = max(1, int(len(self.values) * fraction))
        return float(np.mean(self.values[-k:]))


def _policy_from(logits: np.ndarray, alpha_logits: np.ndarray) -> SyncPolicy:
    def softmax(x):
        z = np.exp(x - x.max(axis=-1, keepdims=True))
        return z / z.sum(axis=-1, keepdims=True)

    return SyncPolicy(softmax(alpha_logits), softmax(logits))


def run_rps_experiment(
    policy_type: str = "sync",
    m: int = 3,
    iterations: int = 2000,
    seed: int = 0,
    batch: int = 512,
    lr: float = 0.02,
    init: str = "random",
) -> RpsRun:
    """Train a directly parameterized team policy with the score-function estimator.

    Each iteration the adversary best-responds to the current joint, a batch
    of multi-actions is drawn by two-stage sampling, and an ADAM step follows
    ``(r - mean r) * grad log(alpha_j pi^1_j(a^1) pi^2_j(a^2))``. The exact
    adversary value of the policy is logged before each update.
    ``policy_type="marginal"`` forces ``m = 1``.
    """
    if policy_type not in ("sync", "marginal"):
        raise ValueError(f"unknown policy type {policy_type!r}")
    if policy_type == "marginal":
        m = 1
    rng = np.random.default_rng(seed)
    if init == "point-mass":
        if m != 3:
            raise ValueError("point-mass initialization needs m = 3")
        logits = np.log(np.stack([point_mass_sync_policy(0.999).probs[0]] * 2))
        alpha_logits = np.zeros(3)
    else:
        logits = rng.normal(0.0, 0.5, size=(2, m, 3))
        alpha_logits = rng.normal(0.0, 0.5, size=m)
    theta = dm.parameter(logits, name="logits")
    phi = dm.parameter(alpha_logits, name="alpha_logits")
    adam = dm.AdamState.like([theta.data, phi.data], lr=lr)
    run = RpsRun(policy_type, m, seed)
    for it in range(iterations):
        policy = _policy_from(theta.data, phi.data)
        joint = assemble_joint(policy)
        run.values.append(adversary_value(joint))
        e = best_response(joint)
        actions, comps = sync_sample_many(policy, seed, batch, start=it * batch)
        j = comps[0]
        r = _U[actions[:, 0], actions[:, 1], e]
        adv = r - r.mean()
        theta.zero_grad()
        phi.zero_grad()
        with Tape() as tape:
            log_pi = dm.log_softmax(theta, axis=-1)
            log_alpha = dm.log_softmax(phi, axis=-1)
            lp = dm.add(dm.take(log_pi, (np.zeros(batch, dtype=int), j, actions[:, 0])),
                        dm.take(log_pi, (np.ones(batch, dtype=int), j, actions[:, 1])))
            lp = dm.add(lp, dm.take(log_alpha, j))
            loss = dm.mul(dm.tsum(dm.mul(lp, adv)), -1.0 / batch)
            tape.backward(loss)
        grads = [theta.grad if theta.grad is not None else np.zeros_like(theta.data),
                 phi.grad if phi.grad is not None else np.zeros_like(phi.data)]
        dm.adam_step([theta.data, phi.data], grads, adam)
    policy = _policy_from(theta.data, phi.data)
    run.final_policy = policy
    run.values.append(adversary_value(assemble_joint(policy)))
    return run
