"""Input and output mappings used to keep surrogate training well scaled.

Inputs: a trust-region box is mapped linearly onto [-1, 1] and then expanded
by ``arctanh``. Outputs: robust scaling by the running 0.1/0.9 quantiles,
followed by a log squash of the tails.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

CLAMP_DELTA = 1e-6
DEGENERATE_SPAN = 1e-12


def squash(x):
    """Identity on [-1, 1), logarithmic beyond."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(x < -1.0, -np.log(-x) - 1.0, np.where(x >= 1.0, np.log(x) + 1.0, x))
    return out if out.ndim else float(out)


def unsquash(z):
    z = np.asarray(z, dtype=float)
    out = np.where(z < -1.0, -np.exp(-z - 1.0), np.where(z >= 1.0, np.exp(z - 1.0), z))
    return out if out.ndim else float(out)


def squash_derivative(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.where(np.abs(x) > 1.0, 1.0 / np.abs(x), 1.0)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class TrustRegion:
    lower: np.ndarray
    upper: np.ndarray
    generation: int = 0

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("trust region needs lower < upper in every dimension")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x)
        return np.all((x >= self.lower) & (x <= self.upper), axis=-1)


@dataclass(frozen=True)
class InputMap:
    region: TrustRegion
    clamp_delta: float = CLAMP_DELTA

    @property
    def a(self) -> np.ndarray:
        return 2.0 / self.region.width

    @property
    def b(self) -> np.ndarray:
        r = self.region
        return -(r.upper + r.lower) / r.width

    def _linear(self, x):
        lim = 1.0 - self.clamp_delta
        return np.clip(self.a * np.asarray(x, dtype=float) + self.b, -lim, lim)

    def forward(self, x) -> np.ndarray:
        return np.arctanh(self._linear(x))

    def inverse(self, xt) -> np.ndarray:
        x = (np.tanh(np.asarray(xt, dtype=float)) - self.b) / self.a
        return np.clip(x, self.region.lower, self.region.upper)

    def derivative(self, x) -> np.ndarray:
        """d forward / dx per coordinate."""
        u = self._linear(x)
        return self.a / (1.0 - u * u)

    def clamped(self, x) -> np.ndarray:
        lim = 1.0 - self.clamp_delta
        return np.abs(self.a * np.asarray(x, dtype=float) + self.b) > lim


def input_forward(h: InputMap, x) -> np.ndarray:
    return h.forward(x)


def input_inverse(h: InputMap, xt) -> np.ndarray:
    return h.inverse(xt)


@dataclass(frozen=True)
class OutputMap:
    q_low: float = -1.0
    q_high: float = 1.0
    om_lr: float = 0.1
    fitted: bool = False

    @property
    def span(self) -> float:
        return self.q_high - self.q_low

    def fit(self, recent_y) -> OutputMap:
        y = np.asarray(recent_y, dtype=float)
        if y.size == 0:
            raise ValueError("need at least one value to fit the output map")
        lo, hi = np.quantile(y, [0.1, 0.9])
        if self.fitted:
            lo = (1 - self.om_lr) * self.q_low + self.om_lr * lo
            hi = (1 - self.om_lr) * self.q_high + self.om_lr * hi
        if hi - lo < DEGENERATE_SPAN:
            mid = 0.5 * (lo + hi)
            lo, hi = mid - 0.5, mid + 0.5
        return replace(self, q_low=float(lo), q_high=float(hi), fitted=True)

    def linear(self, y):
        return 2.0 * (np.asarray(y, dtype=float) - self.q_low) / self.span - 1.0

    def forward(self, y):
        return squash(self.linear(y))

    def inverse(self, yt):
        return self.q_low + (unsquash(yt) + 1.0) * self.span / 2.0

    def derivative(self, y):
        return squash_derivative(self.linear(y)) * 2.0 / self.span


def fit_output_map(om: OutputMap, recent_y) -> OutputMap:
    return om.fit(recent_y)


def output_forward(om: OutputMap, y):
    return om.forward(y)


def recover_gradient(g_mapped, h: InputMap | None, om: OutputMap | None, x, y=None) -> np.ndarray:
    """Raw-space gradient from one estimated in mapped coordinates.

    Chain rule through both maps: ``g_i = (dh_i/dx_i)(x) * g_mapped_i /
    (dr/dy)(y)``. ``y`` is the value level at which the output map's slope is
    taken (normally the incumbent best). ``None`` maps are identities.
    """
    g = np.asarray(g_mapped, dtype=float)
    if h is not None:
        g = g * h.derivative(x)
    if om is not None:
        if y is None:
            raise ValueError("output-map slope needs a reference value y")
        g = g / om.derivative(y)
    return g


def shrink_trust_region(tr: TrustRegion, x_best, gamma: float, lower, upper) -> TrustRegion:
    """Scale every side by ``gamma`` around ``x_best``; boxes poking out of
    the global bounds are shifted inward (then clipped if still too wide)."""
    if not 0 < gamma <= 1:
        raise ValueError("gamma must be in (0, 1]")
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    half = 0.5 * gamma * tr.width
    x_best = np.asarray(x_best, dtype=float)
    lo, hi = x_best - half, x_best + half
    shift = np.maximum(lower - lo, 0.0) - np.maximum(hi - upper, 0.0)
    lo, hi = lo + shift, hi + shift
    lo, hi = np.maximum(lo, lower), np.minimum(hi, upper)
    return TrustRegion(lo, hi, tr.generation + 1)
