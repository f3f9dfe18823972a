"""Benchmark functions with known optima and a budget-enforcing evaluator.

Families follow the BBOB naming but are simplified re-implementations: each
instance applies a random shift ``x_opt`` in [-4, 4]^n and, for the
non-separable families, a random rotation. All optima have value 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from egl.core import RunRecord

BOUNDARY_SLACK = 1e-9


class BudgetExhausted(Exception):
    """Raised when an evaluation is requested after the budget is spent."""


class OutOfBounds(ValueError):
    pass


@dataclass(frozen=True)
class Objective:
    name: str
    dim: int
    lower: np.ndarray
    upper: np.ndarray
    fn: Callable[[np.ndarray], float]
    x_star: np.ndarray | None = None
    y_star: float | None = None
    rotation: np.ndarray | None = None

    def __call__(self, x) -> float:
        return float(self.fn(np.asarray(x, dtype=float)))

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.lower, self.upper

    def clamp(self, x) -> np.ndarray:
        """Clip points that overshoot the box by rounding; reject the rest."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"expected a vector of length {self.dim}, got shape {x.shape}")
        if np.any(x < self.lower - BOUNDARY_SLACK) or np.any(x > self.upper + BOUNDARY_SLACK):
            raise OutOfBounds(f"point outside the search box: {x}")
        return np.clip(x, self.lower, self.upper)


class BudgetedObjective:
    """Counts every evaluation, records the trace, and stops at ``budget``."""

    def __init__(self, inner: Objective, budget: int):
        if budget < 1:
            raise ValueError("budget must be positive")
        self.inner = inner
        self.budget = int(budget)
        self.used = 0
        self._y: list[float] = []
        self._best_x: np.ndarray | None = None
        self._best_y = np.inf
        self.clamp_events = 0

    @property
    def dim(self) -> int:
        return self.inner.dim

    @property
    def lower(self) -> np.ndarray:
        return self.inner.lower

    @property
    def upper(self) -> np.ndarray:
        return self.inner.upper

    @property
    def remaining(self) -> int:
        return self.budget - self.used

    @property
    def x_best(self) -> np.ndarray | None:
        return None if self._best_x is None else self._best_x.copy()

    @property
    def y_best(self) -> float:
        return self._best_y

    def evaluate(self, x) -> float:
        if self.used >= self.budget:
            raise BudgetExhausted(f"budget of {self.budget} evaluations spent")
        xc = self.inner.clamp(x)
        if not np.array_equal(xc, np.asarray(x, dtype=float)):
            self.clamp_events += 1
        y = self.inner(xc)
        if not np.isfinite(y):
            raise FloatingPointError(f"{self.inner.name} returned {y} at {xc}")
        self.used += 1
        self._y.append(y)
        if y < self._best_y:
            self._best_y = y
            self._best_x = xc.copy()
        return y

    def evaluate_batch(self, xs) -> np.ndarray:
        """Evaluate rows in order; on running out, the evaluated prefix stays
        in the trace and ``BudgetExhausted`` carries it as ``.partial``."""
        xs = np.atleast_2d(xs)
        out = np.empty(len(xs))
        for i, x in enumerate(xs):
            try:
                out[i] = self.evaluate(x)
            except BudgetExhausted as exc:
                exc.partial = out[:i].copy()
                raise
        return out

    def trace(self) -> np.ndarray:
        return np.asarray(self._y, dtype=float)

    def record(self, seed: int, config_hash: str = "", events=None) -> RunRecord:
        y = self.trace()
        x_best = self._best_x if self._best_x is not None else np.full(self.dim, np.nan)
        return RunRecord(
            t=np.arange(1, len(y) + 1, dtype=np.int64),
            y=y,
            x_best=x_best.copy(),
            y_best=float(self._best_y),
            evaluations_used=self.used,
            seed=int(seed),
            config_hash=config_hash,
            events=list(events or []),
        )


def evaluate(bo: BudgetedObjective, x) -> float:
    return bo.evaluate(x)


# --- base functions of the transformed variable z -------------------------

def _conditioning(n: int, exponent: float) -> np.ndarray:
    if n == 1:
        return np.ones(1)
    return 10.0 ** (exponent * np.arange(n) / (n - 1))


def _sphere(z):
    return float(z @ z)


def _ellipsoid(z):
    return float(_conditioning(len(z), 6.0) @ (z * z))


def _rastrigin(z):
    return float(10.0 * len(z) + np.sum(z * z - 10.0 * np.cos(2 * np.pi * z)))


def _rosenbrock(z):
    # z is already offset so the minimum sits at z = 1.
    if len(z) == 1:
        return float((z[0] - 1.0) ** 2)
    return float(np.sum(100.0 * (z[:-1] ** 2 - z[1:]) ** 2 + (z[:-1] - 1.0) ** 2))


def _step_ellipsoid(z):
    # Plateaus: each rotated coordinate snaps to the nearest multiple of 0.5.
    zq = np.round(2.0 * z) / 2.0
    return float(_conditioning(len(z), 2.0) @ (zq * zq))


def _sharp_ridge(z):
    return float(z[0] ** 2 + 100.0 * np.sqrt(np.sum(z[1:] ** 2)))


def _schaffer_f7(z):
    s = np.sqrt(z[:-1] ** 2 + z[1:] ** 2)
    terms = np.sqrt(s) + np.sqrt(s) * np.sin(50.0 * s ** 0.2) ** 2
    return float((np.mean(terms)) ** 2)


def _griewank_rosenbrock(z):
    s = 100.0 * (z[:-1] ** 2 - z[1:]) ** 2 + (z[:-1] - 1.0) ** 2
    return float(10.0 * np.mean(s / 4000.0 - np.cos(s)) + 10.0)


@dataclass(frozen=True)
class _Family:
    base: Callable[[np.ndarray], float]
    rotated: bool
    min_dim: int = 1
    # z = scale(n) * R (x - x_opt) + offset
    offset: float = 0.0
    scale: Callable[[int], float] = field(default=lambda n: 1.0)


def _rosen_scale(n: int) -> float:
    return max(1.0, np.sqrt(n) / 8.0)


FAMILIES: dict[str, _Family] = {
    "sphere": _Family(_sphere, rotated=False),
    "ellipsoid": _Family(_ellipsoid, rotated=True),
    "rastrigin": _Family(_rastrigin, rotated=False),
    "rosenbrock": _Family(_rosenbrock, rotated=False, offset=1.0, scale=_rosen_scale),
    "step_ellipsoid": _Family(_step_ellipsoid, rotated=True),
    "sharp_ridge": _Family(_sharp_ridge, rotated=True),
    "schaffer_f7": _Family(_schaffer_f7, rotated=True, min_dim=2),
    "griewank_rosenbrock": _Family(_griewank_rosenbrock, rotated=True, min_dim=2,
                                   offset=1.0, scale=_rosen_scale),
}


def random_rotation(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _transformed(family: _Family, x_opt: np.ndarray, rot: np.ndarray | None):
    n = len(x_opt)
    c = family.scale(n)

    def fn(x: np.ndarray) -> float:
        d = x - x_opt
        if rot is not None:
            d = rot @ d
        return family.base(c * d + family.offset)

    return fn


def make_benchmark(name: str, dim: int, instance_seed: int = 0, *, rotate: bool | None = None,
                   lower: float = -5.0, upper: float = 5.0) -> Objective:
    """Instantiate a benchmark family.

    ``rotate`` overrides the family default (used to compare a rotated
    instance against its axis-aligned twin with the same shift).
    """
    try:
        family = FAMILIES[name]
    except KeyError:
        raise ValueError(f"unknown benchmark {name!r}; choose from {sorted(FAMILIES)}") from None
    if dim < family.min_dim:
        raise ValueError(f"{name} needs dim >= {family.min_dim}")
    rng = np.random.default_rng([int(instance_seed), dim, sorted(FAMILIES).index(name)])
    x_opt = rng.uniform(-4.0, 4.0, size=dim)
    rot_matrix = random_rotation(dim, rng)
    use_rot = family.rotated if rotate is None else rotate
    rot = rot_matrix if use_rot else None
    return Objective(
        name=name,
        dim=dim,
        lower=np.full(dim, float(lower)),
        upper=np.full(dim, float(upper)),
        fn=_transformed(family, x_opt, rot),
        x_star=x_opt,
        y_star=0.0,
        rotation=rot,
    )


def make_1d(obj2d: Objective) -> Objective:
    """f_1d(x) = f_2d(x, x) on the diagonal of a 2-D problem."""
    if obj2d.dim != 2:
        raise ValueError("make_1d needs a 2-D objective")
    lo = max(obj2d.lower[0], obj2d.lower[1])
    hi = min(obj2d.upper[0], obj2d.upper[1])
    fn2 = obj2d.fn
    return Objective(
        name=f"{obj2d.name}_1d",
        dim=1,
        lower=np.array([lo]),
        upper=np.array([hi]),
        fn=lambda x: fn2(np.array([x[0], x[0]])),
    )


def parse_problem(spec: str) -> Objective:
    """Build an objective from ``name:dim:seed`` (seed optional, default 0)."""
    parts = spec.strip().split(":")
    if not 2 <= len(parts) <= 3:
        raise ValueError(f"problem must look like name:dim[:seed], got {spec!r}")
    seed = int(parts[2]) if len(parts) == 3 else 0
    return make_benchmark(parts[0], int(parts[1]), seed)
