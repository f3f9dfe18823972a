"""Small numpy network stack: piecewise-linear spline embedding, dense and
residual layers, manual backpropagation, and Adam.

A :class:`Network` maps a batch ``(B, n_in)`` to ``(B, n_out)``. ``backward``
returns gradients for every parameter and for the input, so the same object
serves as a gradient model (``n_out = n``) and as a value model
(``n_out = 1``) whose input gradient is the descent direction.
"""

from __future__ import annotations

import numpy as np

ACTIVATIONS = ("relu", "tanh", "linear")


def spline_eval(theta, knots, x):
    """Continuous piecewise-linear interpolation through ``(knots, theta)``.

    Outside the knot range the end segments are extended linearly.
    """
    theta = np.asarray(theta, dtype=float)
    knots = np.asarray(knots, dtype=float)
    if np.any(np.diff(knots) <= 0):
        raise ValueError("knots must be strictly increasing")
    x = np.asarray(x, dtype=float)
    i = np.clip(np.searchsorted(knots, x, side="right"), 1, len(knots) - 1)
    t0, t1 = knots[i - 1], knots[i]
    w = (x - t0) / (t1 - t0)
    out = theta[i - 1] + (theta[i] - theta[i - 1]) * w
    return out if out.ndim else float(out)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class SplineEmbedding:
    """``e`` learnable splines per input coordinate on equally spaced knots,
    average-pooled over the coordinates.

    Parameters live in the owning network's dict under ``"spline"`` with
    shape ``(n, k, e)``.
    """

    def __init__(self, n_in: int, n_splines: int = 8, n_knots: int = 21, lo: float = -1.0, hi: float = 1.0):
        self.n_in = n_in
        self.e = n_splines
        self.k = n_knots
        self.knots = np.linspace(lo, hi, n_knots)
        self.lo = lo
        self.step = (hi - lo) / (n_knots - 1)

    def init(self, dtype) -> np.ndarray:
        return np.zeros((self.n_in, self.k, self.e), dtype=dtype)

    def forward(self, theta: np.ndarray, x: np.ndarray):
        u = (x - self.lo) / self.step
        idx = np.clip(np.floor(u).astype(np.int64), 0, self.k - 2)
        w = (u - idx)[..., None]
        cols = np.arange(self.n_in)
        left = theta[cols, idx]          # (B, n, e)
        right = theta[cols, idx + 1]
        s = left + w * (right - left)
        return s.mean(axis=1), (idx, w, left, right)

    def backward(self, theta: np.ndarray, cache, grad_out: np.ndarray):
        idx, w, left, right = cache
        B = idx.shape[0]
        ds = np.broadcast_to(grad_out[:, None, :] / self.n_in, (B, self.n_in, self.e))
        flat = (np.arange(self.n_in) * self.k + idx).ravel()
        g_right = (ds * w).reshape(-1, self.e)
        g_left = ds.reshape(-1, self.e) - g_right
        size = self.n_in * self.k
        grad = np.empty((size, self.e), dtype=theta.dtype)
        for c in range(self.e):
            grad[:, c] = (np.bincount(flat, g_left[:, c], minlength=size)
                          + np.bincount(flat + 1, g_right[:, c], minlength=size + 1)[:size])
        grad_x = np.einsum("bne,bne->bn", ds, right - left) / self.step
        return grad.reshape(theta.shape), grad_x


class Network:
    """Dense network ``x -> [spline(x), x] -> hidden -> linear + bias``.

    ``width = 0`` removes the hidden layers entirely (a single affine map).
    With ``residual`` each block is ``h <- act(h + W2 act(W1 h + b1) + b2)``;
    without it the block is two plain dense layers.
    """

    def __init__(self, n_in: int, n_out: int, *, width: int = 64, n_blocks: int = 2,
                 activation: str = "relu", residual: bool = True, spline: bool = True,
                 n_splines: int = 8, n_knots: int = 21, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.width, self.n_blocks = width, n_blocks if width else 0
        self.activation = activation
        self.residual = residual
        self.dtype = np.dtype(dtype)
        self.embedding = SplineEmbedding(n_in, n_splines, n_knots) if spline else None
        self.params: dict[str, np.ndarray] = {}
        feat = n_in + (n_splines if spline else 0)
        if self.embedding is not None:
            self.params["spline"] = self.embedding.init(self.dtype)
        if width:
            self._dense("in", feat, width, rng)
            for b in range(self.n_blocks):
                self._dense(f"blk{b}a", width, width, rng)
                self._dense(f"blk{b}b", width, width, rng)
            self._dense("out", width, n_out, rng)
        else:
            self._dense("out", feat, n_out, rng)
        self._cache = None

    def _dense(self, name: str, fan_in: int, fan_out: int, rng):
        self.params[f"{name}.W"] = glorot(rng, fan_in, fan_out, self.dtype)
        self.params[f"{name}.b"] = np.zeros(fan_out, dtype=self.dtype)

    # -- activations ----------------------------------------------------------
    def _act(self, z):
        if self.activation == "relu":
            return np.maximum(z, 0)
        if self.activation == "tanh":
            return np.tanh(z)
        return z

    def _act_grad(self, a, g):
        # derivative expressed through the activation output a
        if self.activation == "relu":
            return g * (a > 0)
        if self.activation == "tanh":
            return g * (1 - a * a)
        return g

    # -- passes ---------------------------------------------------------------
    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.n_in:
            raise ValueError(f"expected input dim {self.n_in}, got {x.shape[1]}")
        p = self.params
        cache = {"x": x, "single": single}
        if self.embedding is not None:
            s, cache["emb"] = self.embedding.forward(p["spline"], x)
            h = np.concatenate([s, x], axis=1)
        else:
            h = x
        cache["feat"] = h
        if self.width:
            h = self._act(h @ p["in.W"] + p["in.b"])
            cache["h_in"] = h
            for b in range(self.n_blocks):
                a1 = self._act(h @ p[f"blk{b}a.W"] + p[f"blk{b}a.b"])
                z2 = a1 @ p[f"blk{b}b.W"] + p[f"blk{b}b.b"]
                h = self._act(h + z2) if self.residual else self._act(z2)
                cache[f"a1_{b}"] = a1
                cache[f"h_{b}"] = h
        cache["h_last"] = h
        out = h @ p["out.W"] + p["out.b"]
        self._cache = cache
        return out[0] if single else out

    __call__ = forward

    def backward(self, grad_out) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Backpropagate ``grad_out`` (d loss / d output) through the last
        forward pass. Returns (parameter gradients, input gradient)."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        c = self._cache
        p = self.params
        g = np.atleast_2d(np.asarray(grad_out, dtype=self.dtype))
        grads: dict[str, np.ndarray] = {}
        h = c["h_last"]
        grads["out.W"] = h.T @ g
        grads["out.b"] = g.sum(axis=0)
        g = g @ p["out.W"].T
        if self.width:
            for b in reversed(range(self.n_blocks)):
                hb = c[f"h_{b}"]
                h_prev = c[f"h_{b - 1}"] if b > 0 else c["h_in"]
                gz = self._act_grad(hb, g)
                a1 = c[f"a1_{b}"]
                grads[f"blk{b}b.W"] = a1.T @ gz
                grads[f"blk{b}b.b"] = gz.sum(axis=0)
                ga1 = self._act_grad(a1, gz @ p[f"blk{b}b.W"].T)
                grads[f"blk{b}a.W"] = h_prev.T @ ga1
                grads[f"blk{b}a.b"] = ga1.sum(axis=0)
                g = ga1 @ p[f"blk{b}a.W"].T
                if self.residual:
                    g = g + gz
            gin = self._act_grad(c["h_in"], g)
            grads["in.W"] = c["feat"].T @ gin
            grads["in.b"] = gin.sum(axis=0)
            g = gin @ p["in.W"].T
        if self.embedding is not None:
            e = self.embedding.e
            grads["spline"], gx_spline = self.embedding.backward(p["spline"], c["emb"], g[:, :e])
            gx = g[:, e:] + gx_spline
        else:
            gx = g
        if c["single"]:
            gx = gx[0]
        return grads, gx

    def backward_params(self, x, upstream) -> dict[str, np.ndarray]:
        self.forward(x)
        return self.backward(upstream)[0]

    def input_gradient(self, x, direction=None) -> np.ndarray:
        """Gradient of ``direction . f(x)`` with respect to x (``direction``
        defaults to ones, i.e. the plain gradient of a scalar output)."""
        x = np.asarray(x, dtype=self.dtype)
        out = self.forward(x)
        d = np.ones_like(out) if direction is None else np.broadcast_to(direction, out.shape)
        return self.backward(d)[1]

    # -- parameter helpers ------------------------------------------------------
    def get_flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def copy(self) -> Network:
        clone = object.__new__(Network)
        clone.__dict__.update(self.__dict__)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        clone._cache = None
        return clone


def backward_params(net: Network, x, upstream_grad) -> dict[str, np.ndarray]:
    return net.backward_params(x, upstream_grad)


def backward_input(net: Network, x, direction=None) -> np.ndarray:
    return net.input_gradient(x, direction)


class Adam:
    """Adam with bias correction over a dict of parameter arrays (updated in
    place)."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        eps_t = self.eps * np.sqrt(1 - b2 ** self.t)
        for k, g in grads.items():
            if g.shape != self.params[k].shape:
                raise ValueError(f"gradient shape mismatch for {k}")
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            self.params[k] -= lr_t * m / (np.sqrt(v) + eps_t)


def adam_step(state: Adam, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    state.step(grads)
    return state.params
