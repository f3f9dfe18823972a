"""Descent loops: practical EGL, its indirect (value-model) twin IGL, and the
convergent variant with sufficient-decrease schedules.

EGL and IGL share one loop (:func:`_trust_region_descent`) and differ only in
the surrogate: EGL learns the gradient directly from value differences, IGL
fits values and differentiates the fit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from egl.core import (STREAM_EXPLORE, STREAM_INIT, STREAM_MINIBATCH, STREAM_WARMUP, ExplorationBatch,
                      ReplayBuffer, Rng, RunRecord, config_hash)
from egl.gradnet import NotPoised, PairLossConfig, ls_mean_gradient, sample_ball, train_gradient_model
from egl.mappings import InputMap, OutputMap, TrustRegion, shrink_trust_region
from egl.nn import Adam, Network
from egl.objectives import BudgetedObjective, BudgetExhausted

EXPLORE_MODES = ("ball", "cone", "half_half")
CONE_TRIES = 100


class ZeroGradient(ValueError):
    pass


@dataclass(frozen=True)
class EglConfig:
    """Hyperparameters of the practical loop (defaults: the COCO setup).

    ``epsilon=None`` means ``0.1 * sqrt(n)``. ``perturbation_p`` is the
    dither radius as a fraction of the current exploration radius.
    """

    m: int = 64
    warmup_factor: int = 5
    budget: int = 150_000
    alpha: float = 1e-2
    epsilon: float | None = None
    gamma_alpha: float = 0.9
    gamma_epsilon: float = 0.97
    n_max: int = 10
    n_min: int = 40
    replay_L: int = 32
    explore_mode: str = "ball"
    phi: float = 2 * math.pi / 3
    perturbation_p: float = 0.0
    minibatch: int = 1024
    n_minibatches: int = 60
    lr: float = 1e-3
    om_lr: float = 0.1
    width: int = 64
    n_blocks: int = 2
    activation: str = "relu"
    spline: bool = True
    n_splines: int = 8
    dtype: str = "float64"
    step_clip: float = 10.0
    trust_region: bool = True
    output_map: bool = True

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("m must be at least 2")
        for name in ("gamma_alpha", "gamma_epsilon"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.explore_mode not in EXPLORE_MODES:
            raise ValueError(f"explore_mode must be one of {EXPLORE_MODES}")
        if not 0 < self.phi < math.pi:
            raise ValueError("phi must lie in (0, pi)")
        if not 0 <= self.perturbation_p < 1:
            raise ValueError("perturbation_p is a fraction of epsilon in [0, 1)")

    def initial_epsilon(self, n: int) -> float:
        return self.epsilon if self.epsilon is not None else 0.1 * math.sqrt(n)

    def warmup_evaluations(self) -> int:
        """Evaluations spent before the first exploration batch (x0 included)."""
        return 1 + self.warmup_factor * self.m


@dataclass(frozen=True)
class ConvergentEglConfig:
    alpha: float = 0.1
    epsilon: float = 0.1
    gamma_alpha: float = 0.9
    gamma_epsilon: float = 0.97
    epsilon_bar: float = 1e-3
    m: int | None = None  # samples per step; None -> 2n
    sufficient_decrease: float = 2.25
    n_minibatches: int = 200

    def __post_init__(self):
        if self.epsilon_bar <= 0 or self.alpha <= 0 or self.epsilon <= 0:
            raise ValueError("alpha, epsilon and epsilon_bar must be positive")
        for name in ("gamma_alpha", "gamma_epsilon"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")


# --- exploration ------------------------------------------------------------

def explore_ball(center, eps: float, m: int, rng: np.random.Generator) -> ExplorationBatch:
    """m points ``center + eps * U[-1, 1]^n`` (a box in the infinity norm)."""
    center = np.asarray(center, dtype=float)
    u = rng.uniform(-1.0, 1.0, size=(m, len(center)))
    return ExplorationBatch(center + eps * u, center, eps, ("box",) * m)


def _cone_axis(g_prev) -> np.ndarray:
    g = np.asarray(g_prev, dtype=float)
    norm = np.linalg.norm(g)
    if not norm > 0 or not np.isfinite(norm):
        raise ZeroGradient("cone exploration needs a non-zero previous gradient")
    return -g / norm


def explore_cone(center, eps: float, m: int, g_prev, phi: float, rng: np.random.Generator) -> ExplorationBatch:
    """Uniform points in the intersection of the eps-ball and the cone of full
    aperture ``phi`` around ``-g_prev``.

    Each point is found by rejection from the ball; after ``CONE_TRIES``
    misses the direction is drawn inside the cone explicitly.
    """
    center = np.asarray(center, dtype=float)
    axis = _cone_axis(g_prev)
    n = len(center)
    cos_half = math.cos(phi / 2)
    cand = sample_ball(rng, m * CONE_TRIES, n, eps).reshape(m, CONE_TRIES, n)
    norms = np.linalg.norm(cand, axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        cosines = (cand @ axis) / norms
    ok = cosines >= cos_half
    pts = np.empty((m, n))
    for i in range(m):
        hits = np.flatnonzero(ok[i])
        if hits.size:
            pts[i] = cand[i, hits[0]]
        else:
            pts[i] = _cone_fallback(axis, cos_half, eps, rng)
    return ExplorationBatch(center + pts, center, eps, ("cone",) * m)


def _cone_fallback(axis, cos_half, eps, rng) -> np.ndarray:
    n = len(axis)
    r = eps * rng.uniform() ** (1.0 / n)
    if n == 1:
        return axis * r
    perp = rng.standard_normal(n)
    perp -= (perp @ axis) * axis
    perp /= np.linalg.norm(perp)
    c = rng.uniform(cos_half, 1.0)
    return r * (c * axis + math.sqrt(max(0.0, 1 - c * c)) * perp)


def explore_half_half(center, eps: float, m: int, g_prev, phi: float, rng: np.random.Generator) -> ExplorationBatch:
    """ceil(m/2) cone points then floor(m/2) box points; all box points when
    there is no usable previous gradient."""
    try:
        _cone_axis(g_prev)
    except ZeroGradient:
        return explore_ball(center, eps, m, rng)
    cone = explore_cone(center, eps, (m + 1) // 2, g_prev, phi, rng)
    ball = explore_ball(center, eps, m // 2, rng)
    return ExplorationBatch(np.concatenate([cone.x, ball.x]), cone.center, eps, cone.modes + ball.modes)


def explore(mode: str, center, eps, m, rng, g_prev=None, phi=2 * math.pi / 3) -> ExplorationBatch:
    if mode == "ball" or g_prev is None:
        return explore_ball(center, eps, m, rng)
    if mode == "cone":
        try:
            return explore_cone(center, eps, m, g_prev, phi, rng)
        except ZeroGradient:
            return explore_ball(center, eps, m, rng)
    return explore_half_half(center, eps, m, g_prev, phi, rng)


# --- surrogates -----------------------------------------------------------------

def _network(cfg: EglConfig, n: int, n_out: int, rng) -> Network:
    return Network(n, n_out, width=cfg.width, n_blocks=cfg.n_blocks, activation=cfg.activation,
                   spline=cfg.spline, n_splines=cfg.n_splines, rng=rng, dtype=np.dtype(cfg.dtype))


class GradientSurrogate:
    """EGL: a network g(x) trained on pairwise value differences."""

    def __init__(self, cfg: EglConfig, n: int, rng: np.random.Generator):
        self.cfg = cfg
        self.net = _network(cfg, n, n, rng)
        self.adam = Adam(self.net.params, lr=cfg.lr)

    def train(self, rb: ReplayBuffer, y_map, eps: float, rng, n_steps: int) -> None:
        pcfg = PairLossConfig(epsilon=eps, perturbation_p=self.cfg.perturbation_p * eps,
                              minibatch_pairs=self.cfg.minibatch, n_minibatches=n_steps,
                              learning_rate=self.cfg.lr)
        train_gradient_model(self.net, rb, pcfg, rng, self.adam, y_map=y_map)

    def direction(self, xt) -> np.ndarray:
        return np.asarray(self.net.forward(xt), dtype=float)


class ValueSurrogate:
    """IGL: a scalar network f(x) fitted to values; the descent direction is
    its input gradient."""

    def __init__(self, cfg: EglConfig, n: int, rng: np.random.Generator):
        self.cfg = cfg
        self.net = _network(cfg, n, 1, rng)
        self.adam = Adam(self.net.params, lr=cfg.lr)

    def train(self, rb: ReplayBuffer, y_map, eps: float, rng, n_steps: int) -> None:
        x = rb.all_x().astype(self.net.dtype)
        y = rb.all_y()
        if y_map is not None:
            y = y_map(y)
        for _ in range(n_steps):
            if len(y) <= self.cfg.minibatch:
                xb, yb = x, y
            else:
                idx = rng.integers(0, len(y), size=self.cfg.minibatch)
                xb, yb = x[idx], y[idx]
            r = self.net.forward(xb)[:, 0] - yb
            grads, _ = self.net.backward(((2.0 / len(r)) * r)[:, None])
            self.adam.step(grads)

    def direction(self, xt) -> np.ndarray:
        return np.asarray(self.net.input_gradient(xt), dtype=float)


def value_model_loss(net: Network, x, y) -> float:
    r = net.forward(x)[:, 0] - np.asarray(y)
    return float(np.mean(r * r))


# --- practical loop ---------------------------------------------------------------

@dataclass
class _Counters:
    tr_shrink: int = 0
    step_clip: int = 0
    input_clamp: int = 0
    descent_steps: int = 0
    log: list = field(default_factory=list)


def _remap(rb: ReplayBuffer, old: InputMap, new: InputMap) -> None:
    """Re-express stored batches in the new map's coordinates, dropping points
    that fall outside the new region."""
    out = []
    for b in rb:
        raw = old.inverse(b.x)
        keep = new.region.contains(raw)
        if keep.sum() < 2:
            continue
        center = new.forward(old.inverse(b.center))
        modes = tuple(md for md, k in zip(b.modes, keep) if k)
        out.append(ExplorationBatch(new.forward(raw[keep]), center, b.epsilon, modes, b.y[keep]))
    rb.replace(out)


def _evaluate_mapped(obj: BudgetedObjective, h: InputMap, batch: ExplorationBatch, counters: _Counters):
    raw = h.inverse(batch.x)
    counters.input_clamp += int(np.any(h.clamped(raw), axis=1).sum())
    y = obj.evaluate_batch(raw)
    # store the coordinates of what was actually evaluated
    return ExplorationBatch(h.forward(raw), batch.center, batch.epsilon, batch.modes, y)


def _trust_region_descent(cfg: EglConfig, obj: BudgetedObjective, x0, seed: int,
                          make_surrogate: Callable, tag: str) -> RunRecord:
    n = obj.dim
    rng = Rng(seed)
    r_explore = rng.stream(STREAM_EXPLORE)
    r_warm = rng.stream(STREAM_WARMUP)
    r_train = rng.stream(STREAM_MINIBATCH)
    surrogate = make_surrogate(cfg, n, rng.stream(STREAM_INIT))
    counters = _Counters()
    chash = config_hash({"optimizer": tag, **asdict(cfg)})

    tr = TrustRegion(obj.lower, obj.upper)
    h = InputMap(tr)
    eps = cfg.initial_epsilon(n)
    rb = ReplayBuffer(cfg.replay_L)
    om = OutputMap(om_lr=cfg.om_lr)
    x0 = np.asarray(x0, dtype=float)

    def y_map(y):
        return om.forward(y) if cfg.output_map else y

    try:
        obj.evaluate(x0)
        xt = h.forward(x0)
        for _ in range(cfg.warmup_factor):
            rb.push(_evaluate_mapped(obj, h, explore_ball(xt, eps, cfg.m, r_warm), counters))
        if len(rb):
            om = om.fit(rb.all_y())
            surrogate.train(rb, y_map, eps, r_train, cfg.n_minibatches * cfg.warmup_factor)
        history = [obj.trace()[0]]
        bad = 0
        steps_in_region = 0
        while True:
            g_prev = surrogate.direction(xt) if cfg.explore_mode != "ball" and len(rb) else None
            batch = explore(cfg.explore_mode, xt, eps, cfg.m, r_explore, g_prev, cfg.phi)
            rb.push(_evaluate_mapped(obj, h, batch, counters))
            om = om.fit(rb.all_y())
            surrogate.train(rb, y_map, eps, r_train, cfg.n_minibatches)

            g = surrogate.direction(xt)
            xt_next = xt - cfg.alpha * g
            if np.any(np.abs(xt_next) > cfg.step_clip):
                counters.step_clip += 1
                xt_next = np.clip(xt_next, -cfg.step_clip, cfg.step_clip)
            x_next = h.inverse(xt_next)
            y_next = obj.evaluate(x_next)
            counters.descent_steps += 1
            xt = h.forward(x_next)

            reference = float(np.mean(history[-cfg.n_max:]))
            bad = bad + 1 if y_next > reference else 0
            history.append(y_next)
            steps_in_region += 1

            if cfg.trust_region and bad >= cfg.n_max and steps_in_region >= cfg.n_min:
                new_tr = shrink_trust_region(tr, obj.x_best, cfg.gamma_alpha, obj.lower, obj.upper)
                new_h = InputMap(new_tr)
                _remap(rb, h, new_h)
                tr, h = new_tr, new_h
                eps *= cfg.gamma_epsilon
                xt = h.forward(obj.x_best)
                history = [obj.y_best]
                bad = 0
                steps_in_region = 0
                counters.tr_shrink += 1
                counters.log.append({"event": "tr_shrink", "t": obj.used, "generation": tr.generation,
                                     "width": tr.width.tolist(), "epsilon": eps})
    except BudgetExhausted:
        pass
    rec = obj.record(seed, chash)
    rec.info.update({
        "tr_shrinks": counters.tr_shrink,
        "step_clips": counters.step_clip,
        "input_clamps": counters.input_clamp,
        "descent_steps": counters.descent_steps,
        "epsilon_final": eps,
    })
    rec.events.extend(counters.log)
    return rec


def run_egl(cfg: EglConfig, obj: BudgetedObjective, x0, seed: int = 0) -> RunRecord:
    """Practical EGL: explore around the candidate, refit the output map,
    retrain the gradient network on the replay buffer, step, and shrink the
    trust region after persistent non-improvement."""
    return _trust_region_descent(cfg, obj, x0, seed, GradientSurrogate, "egl")


def run_igl(cfg: EglConfig, obj: BudgetedObjective, x0, seed: int = 0) -> RunRecord:
    """Same loop as :func:`run_egl` with a value network in place of the
    gradient network."""
    return _trust_region_descent(cfg, obj, x0, seed, ValueSurrogate, "igl")


# --- convergent variant -----------------------------------------------------

def ls_gradient_source(obj: BudgetedObjective, x, fx, eps, m, rng, lower, upper) -> np.ndarray:
    """Fresh ball samples around x plus x itself; closed-form mean-gradient."""
    n = len(x)
    for _ in range(10):
        pts = np.clip(x + sample_ball(rng, m, n, eps), lower, upper)
        ys = obj.evaluate_batch(pts)
        try:
            return ls_mean_gradient((np.vstack([x, pts]), np.concatenate([[fx], ys]))).g_mse
        except NotPoised:
            continue
    raise NotPoised("could not draw a poised batch")


def run_convergent_egl(cfg: ConvergentEglConfig, obj: BudgetedObjective, x0, seed: int = 0,
                       grad_source: str = "ls") -> RunRecord:
    """Gradient descent on the mean-gradient with a sufficient-decrease test.

    Every step is taken; when it fails to lower f by ``2.25 eps^2 / alpha``,
    alpha shrinks by gamma_alpha and eps by gamma_alpha * gamma_epsilon. The
    loop runs while eps > epsilon_bar. ``grad_source`` is ``"ls"`` (closed
    form on each fresh batch) or ``"model"`` (a small network trained on the
    batch pairs).
    """
    if grad_source not in ("ls", "model"):
        raise ValueError("grad_source must be 'ls' or 'model'")
    n = obj.dim
    rng = Rng(seed)
    r_explore = rng.stream(STREAM_EXPLORE)
    r_train = rng.stream(STREAM_MINIBATCH)
    m = cfg.m if cfg.m is not None else 2 * n
    alpha, eps = cfg.alpha, cfg.epsilon
    x = np.asarray(x0, dtype=float)
    tests = []
    net = None
    chash = config_hash({"optimizer": "convergent_egl", "grad_source": grad_source, **asdict(cfg)})
    try:
        fx = obj.evaluate(x)
        while eps > cfg.epsilon_bar:
            if grad_source == "ls":
                g = ls_gradient_source(obj, x, fx, eps, m, r_explore, obj.lower, obj.upper)
            else:
                if net is None:
                    net = Network(n, n, width=32, n_blocks=1, activation="tanh", spline=False,
                                  rng=rng.stream(STREAM_INIT))
                    adam = Adam(net.params, lr=1e-2)
                pts = np.clip(x + sample_ball(r_explore, m, n, eps), obj.lower, obj.upper)
                ys = obj.evaluate_batch(pts)
                # the model sees coordinates relative to x in units of eps
                scaled = ReplayBuffer(1)
                scaled.push(ExplorationBatch((np.vstack([x, pts]) - x) / eps, np.zeros(n), 1.0,
                                             ("ball",) * (m + 1), np.concatenate([[fx], ys]) / eps))
                train_gradient_model(net, scaled, PairLossConfig(epsilon=1.0, minibatch_pairs=4096,
                                                                 n_minibatches=cfg.n_minibatches),
                                     r_train, adam)
                g = np.asarray(net.forward(np.zeros(n)), dtype=float)
            x_next = np.clip(x - alpha * g, obj.lower, obj.upper)
            f_next = obj.evaluate(x_next)
            threshold = fx - cfg.sufficient_decrease * eps * eps / alpha
            passed = bool(f_next <= threshold)
            tests.append({"f_prev": fx, "f_next": f_next, "epsilon": eps, "alpha": alpha,
                          "threshold": threshold, "passed": passed})
            x, fx = x_next, f_next
            if not passed:
                alpha *= cfg.gamma_alpha
                eps *= cfg.gamma_alpha * cfg.gamma_epsilon
    except BudgetExhausted:
        pass
    rec = obj.record(seed, chash, tests)
    rec.info.update({"x_final": x, "f_final": fx if obj.used else float("nan"),
                     "epsilon_final": eps, "alpha_final": alpha})
    return rec
