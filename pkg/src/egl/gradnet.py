"""Mean-gradient estimation from sampled values.

The closed-form estimate solves the pairwise least-squares problem
``min_g sum_{i != j} |(x_j - x_i) . g - (y_j - y_i)|^2``; the neural estimate
minimises the same residuals with ``g`` replaced by a network evaluated at
the pair's first point (optionally dithered inside a small ball).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from egl.core import ExplorationBatch, ReplayBuffer, pair_index_arrays
from egl.nn import Adam, Network

RANK_RTOL = 1e-10


class NotPoised(ValueError):
    """The pairwise difference vectors do not span the space."""


class EmptyBuffer(ValueError):
    pass


@dataclass(frozen=True)
class PairLossConfig:
    epsilon: float = 0.1
    perturbation_p: float = 0.0
    minibatch_pairs: int = 1024
    n_minibatches: int = 60
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.perturbation_p < 0:
            raise ValueError("perturbation_p must be non-negative")
        if self.perturbation_p > 0 and self.perturbation_p >= self.epsilon:
            raise ValueError("perturbation_p must be smaller than epsilon")


@dataclass(frozen=True)
class LsSolution:
    g_mse: np.ndarray | None
    design_rank: int
    residual: float


def difference_system(x, y=None):
    """Stacked rows ``x_j - x_i`` (and targets ``y_j - y_i``) over all
    ordered pairs i != j."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    ii, jj = pair_index_arrays([len(x)])
    dx = x[jj] - x[ii]
    if y is None:
        return dx
    y = np.asarray(y, dtype=float)
    return dx, y[jj] - y[ii]


def _rank(a: np.ndarray) -> int:
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.sum(s > RANK_RTOL * s[0]))


def is_poised(points, center=None) -> bool:
    """True when the pairwise differences of ``points`` have full rank.

    ``center`` is accepted for symmetry with the sampling API; the rank does
    not depend on it.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if len(pts) < 2:
        return False
    return _rank(difference_system(pts)) == pts.shape[1]


def ls_mean_gradient(batch: ExplorationBatch | tuple, method: str = "svd") -> LsSolution:
    """Closed-form mean-gradient of one evaluated batch.

    ``batch`` may be an :class:`ExplorationBatch` or an ``(x, y)`` tuple.
    ``method`` picks the solver ("svd" via lstsq, or "qr").
    """
    if isinstance(batch, ExplorationBatch):
        x, y = batch.x, batch.y
    else:
        x, y = batch
    dx, dy = difference_system(x, y)
    n = dx.shape[1]
    rank = _rank(dx)
    if rank < n:
        raise NotPoised(f"difference matrix has rank {rank} < {n}")
    if method == "svd":
        g = np.linalg.lstsq(dx, dy, rcond=None)[0]
    elif method == "qr":
        q, r = np.linalg.qr(dx)
        g = np.linalg.solve(r, q.T @ dy)
    else:
        raise ValueError(f"unknown method {method!r}")
    res = dx @ g - dy
    return LsSolution(g, rank, float(res @ res))


def pair_loss(g_values, dx, dy) -> float:
    """Mean squared pair residual for given model outputs."""
    r = np.einsum("bn,bn->b", dx, g_values) - dy
    return float(np.mean(r * r))


def sample_ball(rng: np.random.Generator, count: int, dim: int, radius: float) -> np.ndarray:
    """Uniform samples in the L2 ball (normalised Gaussian times radius * U^(1/n))."""
    d = rng.standard_normal((count, dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.uniform(size=(count, 1)) ** (1.0 / dim)
    return d * r


def pair_loss_terms(model: Network, xi, dx, dy, p: float = 0.0, rng: np.random.Generator | None = None):
    """Loss and parameter gradients on a minibatch of pairs.

    ``xi`` are the reference points, ``dx = x_j - x_i`` and ``dy = y_j - y_i``.
    With ``p > 0`` the model is evaluated at ``xi`` plus uniform noise in the
    p-ball.
    """
    xi = np.atleast_2d(xi)
    if p > 0:
        if rng is None:
            raise ValueError("a generator is needed for perturbed loss")
        xi = xi + sample_ball(rng, len(xi), xi.shape[1], p)
    g = model.forward(xi)
    r = np.einsum("bn,bn->b", dx, g) - dy
    loss = float(np.mean(r * r))
    upstream = (2.0 / len(r)) * r[:, None] * dx
    grads, _ = model.backward(upstream.astype(model.dtype, copy=False))
    return loss, grads


class PairSampler:
    """Draws ordered within-batch pairs uniformly with replacement, or
    enumerates all of them when they fit in one minibatch."""

    def __init__(self, sizes, minibatch: int):
        self.sizes = np.asarray(sizes, dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)[:-1]])
        pairs = self.sizes * (self.sizes - 1)
        self.total = int(pairs.sum())
        self.minibatch = minibatch
        self.exhaustive = self.total <= minibatch
        if self.total == 0:
            raise EmptyBuffer("no within-batch pairs available")
        if self.exhaustive:
            self._all = pair_index_arrays(self.sizes)
        self.prob = pairs / pairs.sum()

    def sample(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if self.exhaustive:
            return self._all
        b = rng.choice(len(self.sizes), size=self.minibatch, p=self.prob)
        s = self.sizes[b]
        i = np.floor(rng.uniform(size=self.minibatch) * s).astype(np.int64)
        j = np.floor(rng.uniform(size=self.minibatch) * (s - 1)).astype(np.int64)
        j += j >= i
        off = self.offsets[b]
        return off + i, off + j


def train_gradient_model(model: Network, rb: ReplayBuffer, cfg: PairLossConfig, rng: np.random.Generator,
                         optimizer: Adam | None = None, *, y_map: Callable | None = None,
                         n_minibatches: int | None = None) -> Network:
    """Warm-started Adam training of ``model`` on within-batch pairs.

    ``y_map`` transforms stored values before differencing (the output
    mapping); ``optimizer`` carries Adam state across calls.
    """
    if len(rb) == 0 or rb.n_points == 0:
        raise EmptyBuffer("replay buffer is empty")
    x = rb.all_x()
    y = rb.all_y()
    if y_map is not None:
        y = y_map(y)
    sampler = PairSampler([len(b) for b in rb], cfg.minibatch_pairs)
    opt = optimizer if optimizer is not None else Adam(model.params, lr=cfg.learning_rate)
    xm = x.astype(model.dtype)
    for _ in range(cfg.n_minibatches if n_minibatches is None else n_minibatches):
        ii, jj = sampler.sample(rng)
        _, grads = pair_loss_terms(model, xm[ii], xm[jj] - xm[ii], y[jj] - y[ii],
                                   cfg.perturbation_p, rng)
        opt.step(grads)
    return model


def fd_gradient_oracle(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g
