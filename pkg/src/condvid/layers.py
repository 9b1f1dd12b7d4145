"""Hand-written neural net primitives with explicit forward/backward passes.

There is no autograd tape: every layer caches what its own backward needs
during forward, and backward() must be called at most once per forward in
exact reverse order.  Parameters are plain numpy arrays registered by name so
optimizers and checkpoints can walk them; gradients accumulate into
``module.grads[name]``.
"""

from __future__ import annotations

import numpy as np

from .numerics import SeededRng, gaussian_noise, softmax_lastdim


def sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu(x):
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


class Module:
    """Minimal parameter container with named children."""

    def __init__(self):
        self._param_names = []
        self._child_names = []
        self.grads = {}

    def add_param(self, name, arr):
        setattr(self, name, arr)
        self._param_names.append(name)

    def add_child(self, name, mod):
        setattr(self, name, mod)
        self._child_names.append(name)
        return mod

    def named_params(self, prefix=""):
        for n in self._param_names:
            yield (prefix + n, self, n)
        for c in self._child_names:
            yield from getattr(self, c).named_params(prefix + c + ".")

    def param_arrays(self):
        return [(path, getattr(m, n)) for path, m, n in self.named_params()]

    def zero_grad(self):
        self.grads = {}
        for c in self._child_names:
            getattr(self, c).zero_grad()

    def _acc(self, name, g):
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = g

    def grad_arrays(self):
        out = {}
        for path, m, n in self.named_params():
            out[path] = m.grads.get(n)
        return out

    def astype(self, dtype):
        for _, m, n in self.named_params():
            setattr(m, n, getattr(m, n).astype(dtype))
        return self

    def load_state(self, state: dict):
        for path, m, n in self.named_params():
            if path not in state:
                raise KeyError(f"missing parameter {path}")
            cur = getattr(m, n)
            arr = state[path]
            if arr.shape != cur.shape:
                raise ValueError(f"shape mismatch for {path}: {arr.shape} vs {cur.shape}")
            setattr(m, n, arr.astype(cur.dtype))

    def state(self) -> dict:
        return {path: arr.copy() for path, arr in self.param_arrays()}


class Conv2d(Module):
    def __init__(self, cin, cout, k=3, stride=1, bias=True, init="he",
                 rng: SeededRng | None = None, dtype=np.float32):
        super().__init__()
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.pad = (k - 1) // 2
        if init == "zero":
            w = np.zeros((cout, cin, k, k), dtype=dtype)
        else:
            std = np.sqrt(2.0 / (cin * k * k))
            w = gaussian_noise((cout, cin, k, k), rng, dtype) * dtype(std)
        self.add_param("w", w)
        self.has_bias = bias
        if bias:
            self.add_param("b", np.zeros(cout, dtype=dtype))

    def forward(self, x):
        N, C, H, W = x.shape
        s, p, k = self.stride, self.pad, self.k
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        win = win[:, :, ::s, ::s]
        Ho, Wo = win.shape[2], win.shape[3]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, C * k * k)
        out = cols @ self.w.reshape(self.cout, -1).T
        if self.has_bias:
            out += self.b
        self._cache = (cols, x.shape, Ho, Wo)
        return np.ascontiguousarray(out.reshape(N, Ho, Wo, self.cout).transpose(0, 3, 1, 2))

    def backward(self, dout):
        cols, xshape, Ho, Wo = self._cache
        N, C, H, W = xshape
        s, p, k = self.stride, self.pad, self.k
        dmat = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, self.cout)
        self._acc("w", (dmat.T @ cols).reshape(self.w.shape))
        if self.has_bias:
            self._acc("b", dmat.sum(axis=0))
        dcols = (dmat @ self.w.reshape(self.cout, -1)).reshape(N, Ho, Wo, C, k, k)
        dxp = np.zeros((N, C, H + 2 * p, W + 2 * p), dtype=dout.dtype)
        for ky in range(k):
            for kx in range(k):
                dxp[:, :, ky:ky + s * Ho:s, kx:kx + s * Wo:s] += \
                    dcols[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + H, p:p + W] if p else dxp


class GroupNorm(Module):
    def __init__(self, channels, groups=4, eps=1e-5, dtype=np.float32):
        super().__init__()
        if channels % groups:
            raise ValueError(f"channels {channels} not divisible by groups {groups}")
        self.groups, self.eps = groups, eps
        self.add_param("gamma", np.ones(channels, dtype=dtype))
        self.add_param("beta", np.zeros(channels, dtype=dtype))

    def forward(self, x):
        N, C, H, W = x.shape
        g = self.groups
        xr = x.reshape(N, g, -1)
        mu = xr.mean(axis=2, keepdims=True)
        var = xr.var(axis=2, keepdims=True)
        inv = 1.0 / np.sqrt(var + np.asarray(self.eps, dtype=x.dtype))
        xhat = ((xr - mu) * inv).reshape(N, C, H, W)
        self._cache = (xhat, inv, x.shape)
        return xhat * self.gamma[None, :, None, None] + self.beta[None, :, None, None]

    def backward(self, dout):
        xhat, inv, xshape = self._cache
        N, C, H, W = xshape
        g = self.groups
        self._acc("gamma", (dout * xhat).sum(axis=(0, 2, 3)))
        self._acc("beta", dout.sum(axis=(0, 2, 3)))
        dxhat = (dout * self.gamma[None, :, None, None]).reshape(N, g, -1)
        xh = xhat.reshape(N, g, -1)
        m = dxhat.shape[2]
        s1 = dxhat.sum(axis=2, keepdims=True)
        s2 = (dxhat * xh).sum(axis=2, keepdims=True)
        dx = (inv / m) * (m * dxhat - s1 - xh * s2)
        return dx.reshape(N, C, H, W)


class Linear(Module):
    def __init__(self, din, dout, bias=True, scale=None, rng=None, dtype=np.float32, init="normal"):
        super().__init__()
        self.din, self.dout = din, dout
        if init == "zero":
            w = np.zeros((din, dout), dtype=dtype)
        else:
            std = scale if scale is not None else np.sqrt(1.0 / din)
            w = gaussian_noise((din, dout), rng, dtype) * dtype(std)
        self.add_param("w", w)
        self.has_bias = bias
        if bias:
            self.add_param("b", np.zeros(dout, dtype=dtype))

    def forward(self, x):
        self._cache = x
        y = x @ self.w
        if self.has_bias:
            y += self.b
        return y

    def backward(self, dout):
        x = self._cache
        xf = x.reshape(-1, self.din)
        df = dout.reshape(-1, self.dout)
        self._acc("w", xf.T @ df)
        if self.has_bias:
            self._acc("b", df.sum(axis=0))
        return (df @ self.w.T).reshape(x.shape)


class SiLU(Module):
    def forward(self, x):
        self._cache = x
        return silu(x)

    def backward(self, dout):
        return dout * silu_grad(self._cache)


def softmax_backward(dp, p):
    return (dp - (dp * p).sum(axis=-1, keepdims=True)) * p


def upsample_nearest2x(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample_nearest2x_backward(dout):
    N, C, H2, W2 = dout.shape
    return dout.reshape(N, C, H2 // 2, 2, W2 // 2, 2).sum(axis=(3, 5))


def timestep_embedding(t, dim: int, dtype=np.float32):
    """Sinusoidal embedding of integer timesteps; t scalar or (N,)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)
