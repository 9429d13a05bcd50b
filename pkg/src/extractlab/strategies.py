"""Subset-selection strategies for choosing the next batch of thief samples to label.

Every ``select_*`` function maps a :class:`SelectionContext` to ``k`` distinct
entries of ``ctx.pool_indices``. None of them touch the secret oracle; they
only look at the substitute network and its predictions. Ties always go to
the candidate that comes first in the pool.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .nn import EPS_LOG, Network, input_jacobian, logits, softmax


class StrategyKind(str, Enum):
    RANDOM = "random"
    UNCERTAINTY = "uncertainty"
    KCENTER = "kcenter"
    ADVERSARIAL = "adversarial"
    ENSEMBLE = "ensemble"


DEEPFOOL_MAX_ITER = 50
DEEPFOOL_OVERSHOOT = 1.02
VANISHING_GRAD = 1e-12


@dataclass
class SelectionContext:
    substitute: Network
    pool_indices: np.ndarray
    pool_probs: np.ndarray
    center_probs: np.ndarray
    k: int
    rng_seed: int = 0

    def __post_init__(self):
        self.pool_indices = np.asarray(self.pool_indices, dtype=np.int64)
        self.pool_probs = np.atleast_2d(np.asarray(self.pool_probs, dtype=np.float64))
        self.center_probs = np.asarray(self.center_probs, dtype=np.float64).reshape(-1, self.pool_probs.shape[1])
        if len(self.pool_probs) != len(self.pool_indices):
            raise ValueError("pool_probs must have one row per pool index")
        if len(np.unique(self.pool_indices)) != len(self.pool_indices):
            raise ValueError("pool_indices must be distinct")
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.k > len(self.pool_indices):
            raise ValueError(f"cannot select k={self.k} from a pool of {len(self.pool_indices)}")


@dataclass
class DeepFoolResult:
    x_hat: np.ndarray
    alpha: float
    iterations_used: int
    flipped: bool


def entropy(p) -> np.ndarray | float:
    """Shannon entropy (nats) of one probability vector or of each row of a matrix."""
    p = np.asarray(p, dtype=np.float64)
    h = -np.sum(p * np.log(p + EPS_LOG), axis=-1)
    # the log floor pushes exact one-hots to about -1e-12
    h = np.maximum(h, 0.0)
    return float(h) if h.ndim == 0 else h


def _top_k_ascending(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort keeps pool order among equal scores
    return np.argsort(scores, kind="stable")[:k]


def select_random(ctx: SelectionContext) -> np.ndarray:
    rng = np.random.default_rng(ctx.rng_seed)
    pos = rng.choice(len(ctx.pool_indices), size=ctx.k, replace=False)
    return ctx.pool_indices[pos]


def select_uncertainty(ctx: SelectionContext) -> np.ndarray:
    h = entropy(ctx.pool_probs)
    return ctx.pool_indices[_top_k_ascending(-h, ctx.k)]


def _min_sq_dist(points: np.ndarray, centers: np.ndarray, block: int = 2_000_000) -> np.ndarray:
    """Squared L2 distance from every point to its nearest center, computed from explicit differences."""
    out = np.full(len(points), np.inf)
    dim = max(points.shape[1], 1)
    rows = max(1, int(np.sqrt(block / dim)))
    for i in range(0, len(points), rows):
        p = points[i:i + rows]
        best = out[i:i + rows]
        for j in range(0, len(centers), rows):
            diff = p[:, None, :] - centers[None, j:j + rows, :]
            best = np.minimum(best, np.sum(diff * diff, axis=-1).min(axis=1))
        out[i:i + rows] = best
    return out


def kcenter_select(candidates, centers, k: int, return_distances: bool = False):
    """Greedy max-min selection under squared L2.

    Returns positions into ``candidates``. Each pick is appended to the
    center set before the next step. With ``return_distances`` the min
    squared distance of each pick at the moment it was chosen is returned too.
    """
    cand = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    cent = np.asarray(centers, dtype=np.float64).reshape(-1, cand.shape[1])
    if len(cent) == 0:
        raise ValueError("k-center selection needs at least one existing center")
    if k > len(cand):
        raise ValueError(f"cannot pick k={k} from {len(cand)} candidates")

    min_dist = _min_sq_dist(cand, cent)
    available = np.ones(len(cand), dtype=bool)
    chosen, chosen_dist = [], []
    for _ in range(k):
        masked = np.where(available, min_dist, -np.inf)
        j = int(np.argmax(masked))
        chosen.append(j)
        chosen_dist.append(float(min_dist[j]))
        available[j] = False
        diff = cand - cand[j]
        min_dist = np.minimum(min_dist, np.sum(diff * diff, axis=-1))
    chosen = np.asarray(chosen, dtype=np.int64)
    if return_distances:
        return chosen, np.asarray(chosen_dist)
    return chosen


def select_kcenter(ctx: SelectionContext) -> np.ndarray:
    # new picks join the center set with their substitute probabilities,
    # since no secret label is available during selection
    return ctx.pool_indices[kcenter_select(ctx.pool_probs, ctx.center_probs, ctx.k)]


def _top1(net: Network, x: np.ndarray) -> np.ndarray:
    return softmax(logits(net, x)).argmax(axis=1)


def deepfool_batch(net: Network, samples, max_iter: int = DEEPFOOL_MAX_ITER,
                   overshoot: float = DEEPFOOL_OVERSHOOT, chunk: int = 512):
    """Multiclass DeepFool run independently on every row of ``samples``.

    Returns ``(x_hat, alpha, iterations_used, flipped)`` arrays. Rows whose
    linearized step has a vanishing gradient are reported as not flipped with
    ``alpha = inf``.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    if overshoot < 1:
        raise ValueError("overshoot must be >= 1")
    x0 = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n = len(x0)
    orig = _top1(net, x0) if n else np.zeros(0, dtype=np.int64)
    r_tot = np.zeros_like(x0)
    x_cur = x0.copy()
    iters = np.zeros(n, dtype=np.int64)
    flipped = np.zeros(n, dtype=bool)
    vanished = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)

    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        for s in range(0, idx.size, chunk):
            rows = idx[s:s + chunk]
            xr = x_cur[rows]
            lg = logits(net, xr)
            cur = softmax(lg).argmax(axis=1)
            done = cur != orig[rows]
            flipped[rows[done]] = True
            active[rows[done]] = False
            keep = ~done
            rows, xr, lg = rows[keep], xr[keep], lg[keep]
            if rows.size == 0:
                continue
            c = orig[rows]
            jac = input_jacobian(net, xr)
            ar = np.arange(rows.size)
            w = jac - jac[ar, c][:, None, :]
            f = lg - lg[ar, c][:, None]
            norm2 = np.sum(w * w, axis=2)
            norm = np.sqrt(norm2)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(norm >= VANISHING_GRAD, np.abs(f) / norm, np.inf)
            ratio[ar, c] = np.inf
            q = ratio.argmin(axis=1)
            dead = ~np.isfinite(ratio[ar, q])
            vanished[rows[dead]] = True
            active[rows[dead]] = False
            fq = np.abs(f[ar, q])
            # exactly on the boundary: the linear step is zero, nothing more to do
            stalled = ~dead & (fq == 0)
            active[rows[stalled]] = False
            go = ~dead & ~stalled
            rows, q, fq, ar2 = rows[go], q[go], fq[go], ar[go]
            step = (fq / norm2[ar2, q])[:, None] * w[ar2, q]
            r_tot[rows] += step
            x_cur[rows] = x0[rows] + overshoot * r_tot[rows]
            iters[rows] += 1

    # rows that used up max_iter (or stalled) still need their final label checked
    pending = np.flatnonzero(~flipped & ~vanished)
    if pending.size:
        flipped[pending] = _top1(net, x_cur[pending]) != orig[pending]
    x_hat = x0 + overshoot * r_tot
    alpha = np.sum((x0 - x_hat) ** 2, axis=1)
    alpha[vanished] = np.inf
    return x_hat, alpha, iters, flipped


def deepfool(net: Network, x, max_iter: int = DEEPFOOL_MAX_ITER,
             overshoot: float = DEEPFOOL_OVERSHOOT) -> DeepFoolResult:
    x_hat, alpha, iters, flipped = deepfool_batch(net, np.asarray(x, dtype=np.float64).reshape(1, -1),
                                                  max_iter, overshoot)
    return DeepFoolResult(x_hat[0], float(alpha[0]), int(iters[0]), bool(flipped[0]))


def dfal_scores(net: Network, samples, max_iter: int = DEEPFOOL_MAX_ITER,
                overshoot: float = DEEPFOOL_OVERSHOOT) -> np.ndarray:
    """Perturbation size per sample, with +inf for samples DeepFool could not flip."""
    _, alpha, _, flipped = deepfool_batch(net, samples, max_iter, overshoot)
    return np.where(flipped, alpha, np.inf)


def _check_samples(ctx: SelectionContext, pool_samples) -> np.ndarray:
    x = np.atleast_2d(np.asarray(pool_samples, dtype=np.float64))
    if len(x) != len(ctx.pool_indices):
        raise ValueError("pool_samples must have one row per pool index")
    return x


def select_dfal(ctx: SelectionContext, pool_samples, max_iter: int = DEEPFOOL_MAX_ITER,
                overshoot: float = DEEPFOOL_OVERSHOOT) -> np.ndarray:
    scores = dfal_scores(ctx.substitute, _check_samples(ctx, pool_samples), max_iter, overshoot)
    return ctx.pool_indices[_top_k_ascending(scores, ctx.k)]


def select_ensemble(ctx: SelectionContext, pool_samples, rho: Optional[int] = None,
                    max_iter: int = DEEPFOOL_MAX_ITER, overshoot: float = DEEPFOOL_OVERSHOOT) -> np.ndarray:
    """DeepFool pre-filter down to ``rho`` candidates, then k-center picks ``k`` of them."""
    x = _check_samples(ctx, pool_samples)
    rho_eff = len(x) if rho is None else min(int(rho), len(x))
    if ctx.k > rho_eff:
        raise ValueError(f"k={ctx.k} exceeds the effective rho={rho_eff}")
    if rho_eff == len(x):
        shortlist = np.arange(len(x))
    else:
        scores = dfal_scores(ctx.substitute, x, max_iter, overshoot)
        shortlist = np.sort(_top_k_ascending(scores, rho_eff))
    picks = kcenter_select(ctx.pool_probs[shortlist], ctx.center_probs, ctx.k)
    return ctx.pool_indices[shortlist[picks]]


def select(kind: StrategyKind | str, ctx: SelectionContext, pool_samples=None, rho: Optional[int] = None,
           max_iter: int = DEEPFOOL_MAX_ITER, overshoot: float = DEEPFOOL_OVERSHOOT) -> np.ndarray:
    kind = StrategyKind(kind)
    if kind is StrategyKind.RANDOM:
        return select_random(ctx)
    if kind is StrategyKind.UNCERTAINTY:
        return select_uncertainty(ctx)
    if kind is StrategyKind.KCENTER:
        return select_kcenter(ctx)
    if pool_samples is None:
        raise ValueError(f"strategy {kind.value} needs the pool samples")
    if kind is StrategyKind.ADVERSARIAL:
        return select_dfal(ctx, pool_samples, max_iter, overshoot)
    return select_ensemble(ctx, pool_samples, rho, max_iter, overshoot)
