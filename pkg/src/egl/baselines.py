"""Classical derivative-free baselines on the same budgeted interface."""

from __future__ import annotations

import numpy as np

from egl.core import STREAM_BASELINE, Rng, RunRecord, config_hash
from egl.objectives import BudgetedObjective, BudgetExhausted

REFLECT, EXPAND, CONTRACT, SHRINK = 1.0, 2.0, 0.5, 0.5


class Simplex:
    """n+1 vertices kept sorted by value."""

    def __init__(self, vertices, values):
        self.x = np.asarray(vertices, dtype=float)
        self.f = np.asarray(values, dtype=float)
        self.sort()

    def sort(self) -> None:
        order = np.argsort(self.f, kind="stable")
        self.x, self.f = self.x[order], self.f[order]

    def replace_worst(self, x, fx) -> None:
        self.x[-1], self.f[-1] = x, fx
        self.sort()


def nelder_mead(obj: BudgetedObjective, x0, scale: float | None = None, seed: int = 0) -> RunRecord:
    """Textbook Nelder-Mead (reflect 1, expand 2, contract 0.5, shrink 0.5)
    run until the budget is spent. Trial points are projected onto the box.

    ``scale`` is the initial axis step (default 5% of the box width).
    """
    lo, hi = obj.lower, obj.upper
    n = obj.dim
    x0 = np.asarray(x0, dtype=float)
    steps = 0.05 * (hi - lo) if scale is None else np.full(n, float(scale))
    chash = config_hash({"optimizer": "nelder_mead", "scale": scale})

    def f(x):
        return obj.evaluate(np.clip(x, lo, hi))

    try:
        verts = [x0]
        for i in range(n):
            v = x0.copy()
            v[i] += steps[i]
            if v[i] > hi[i]:
                v[i] = x0[i] - steps[i]
            verts.append(v)
        vals = [f(v) for v in verts]
        s = Simplex(np.clip(verts, lo, hi), vals)
        while True:
            centroid = s.x[:-1].mean(axis=0)
            worst = s.x[-1]
            xr = np.clip(centroid + REFLECT * (centroid - worst), lo, hi)
            fr = f(xr)
            if fr < s.f[0]:
                xe = np.clip(centroid + EXPAND * (xr - centroid), lo, hi)
                fe = f(xe)
                s.replace_worst(*((xe, fe) if fe < fr else (xr, fr)))
            elif fr < s.f[-2]:
                s.replace_worst(xr, fr)
            else:
                if fr < s.f[-1]:
                    xc = np.clip(centroid + CONTRACT * (xr - centroid), lo, hi)
                    fc = f(xc)
                    accept = fc <= fr
                else:
                    xc = np.clip(centroid + CONTRACT * (worst - centroid), lo, hi)
                    fc = f(xc)
                    accept = fc < s.f[-1]
                if accept:
                    s.replace_worst(xc, fc)
                else:
                    best = s.x[0]
                    for i in range(1, n + 1):
                        s.x[i] = best + SHRINK * (s.x[i] - best)
                        s.f[i] = f(s.x[i])
                    s.sort()
    except BudgetExhausted:
        pass
    return obj.record(seed, chash)


def random_search(obj: BudgetedObjective, budget: int | None = None, seed: int = 0) -> RunRecord:
    """Uniform samples over the box until ``budget`` (default: all that
    remains) is used."""
    rng = Rng(seed).stream(STREAM_BASELINE)
    count = obj.remaining if budget is None else min(int(budget), obj.remaining)
    if count < 1:
        raise ValueError("random search needs at least one evaluation")
    xs = rng.uniform(obj.lower, obj.upper, size=(count, obj.dim))
    try:
        for x in xs:
            obj.evaluate(x)
    except BudgetExhausted:
        pass
    return obj.record(seed, config_hash({"optimizer": "random_search"}))
