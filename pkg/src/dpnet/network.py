"""A small convolutional network with hand-written backpropagation.

Three 3x3 convolutions with zero "same" padding, 1 -> 16 -> 16 -> 2
channels, leaky ReLU (slope 0.1) after the first two.  Output channel 0 is
U_theta(z), channel 1 is V_theta(z); both share the trunk.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LEAK = 0.1
LAYERS = (("w1", "b1"), ("w2", "b2"), ("w3", "b3"))


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, H, W, C * 9) patches of the zero-padded input."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # B, C, H, W, 3, 3
    b, c, h, w = x.shape
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, h, w, c * 9)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    cols = _im2col(x)
    out = cols @ w.reshape(w.shape[0], -1).T + b  # B, H, W, Cout
    return out.transpose(0, 3, 1, 2)


def conv2d_backward(x: np.ndarray, w: np.ndarray, gout: np.ndarray, need_input: bool = True):
    """Gradients of a stride-1, pad-1 3x3 convolution wrt input, weights and bias."""
    cols = _im2col(x)
    cout = w.shape[0]
    g = gout.transpose(0, 2, 3, 1).reshape(-1, cout)
    gw = (g.T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
    gb = g.sum(axis=0)
    gx = None
    if need_input:
        w_flip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gx = conv2d(gout, w_flip, np.zeros(w.shape[1]))
    return gx, gw, gb


def leaky(x):
    return np.where(x > 0, x, LEAK * x)


def leaky_grad(x):
    return np.where(x > 0, 1.0, LEAK)


@dataclass
class NetParams:
    """Weights ``w1, b1, w2, b2, w3, b3`` of the two-stream convnet."""

    arrays: dict

    @classmethod
    def init(cls, seed: int = 0, channels: int = 16) -> "NetParams":
        """He (fan-in) initialisation, zero biases."""
        rng = np.random.default_rng(seed)
        shapes = [(channels, 1), (channels, channels), (2, channels)]
        arrays = {}
        for (wn, bn), (cout, cin) in zip(LAYERS, shapes):
            std = np.sqrt(2.0 / (cin * 9))
            arrays[wn] = std * rng.standard_normal((cout, cin, 3, 3))
            arrays[bn] = np.zeros(cout)
        return cls(arrays)

    @classmethod
    def zeros_like(cls, other: "NetParams") -> "NetParams":
        return cls({k: np.zeros_like(v) for k, v in other.arrays.items()})

    def copy(self) -> "NetParams":
        return NetParams({k: v.copy() for k, v in self.arrays.items()})

    def names(self):
        return [n for pair in LAYERS for n in pair]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[n].ravel() for n in self.names()])

    def with_flat(self, vec: np.ndarray) -> "NetParams":
        out, i = {}, 0
        for n in self.names():
            a = self.arrays[n]
            out[n] = vec[i:i + a.size].reshape(a.shape).copy()
            i += a.size
        return NetParams(out)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def lipschitz_bound(self, stream: int | None = None) -> float:
        """Upper bound on the Lipschitz constant of the network (or one output stream).

        Each 3x3 convolution is a sum of nine shifted channel mixings, so its
        norm is at most the sum of the spectral norms of the nine tap
        matrices.  Leaky ReLU is 1-Lipschitz.
        """
        bound = 1.0
        for wn, _ in LAYERS:
            w = self.arrays[wn]
            if wn == "w3" and stream is not None:
                w = w[stream:stream + 1]
            bound *= sum(np.linalg.norm(w[:, :, i, j], 2) for i in range(3) for j in range(3))
        return float(bound)


def net_forward(params: NetParams, z: np.ndarray, keep: bool = False):
    """Evaluate both streams on a batch ``z`` of shape (B, N, N) or a single (N, N) image.

    Returns ``(u, v)`` with the same leading shape as ``z``; with ``keep`` a
    cache for :func:`net_backward` is returned as a third item.
    """
    single = z.ndim == 2
    x0 = (z[None] if single else z)[:, None].astype(np.float64)
    p = params.arrays
    h1 = conv2d(x0, p["w1"], p["b1"])
    a1 = leaky(h1)
    h2 = conv2d(a1, p["w2"], p["b2"])
    a2 = leaky(h2)
    out = conv2d(a2, p["w3"], p["b3"])
    u, v = out[:, 0], out[:, 1]
    if single:
        u, v = u[0], v[0]
    if keep:
        return u, v, (x0, h1, a1, h2, a2, single)
    return u, v


def net_backward(params: NetParams, cache, gu: np.ndarray, gv: np.ndarray) -> NetParams:
    """Parameter gradient given the gradients wrt the two output streams."""
    x0, h1, a1, h2, a2, single = cache
    if single:
        gu, gv = gu[None], gv[None]
    gout = np.stack([gu, gv], axis=1)
    p = params.arrays
    g2, gw3, gb3 = conv2d_backward(a2, p["w3"], gout)
    g2 = g2 * leaky_grad(h2)
    g1, gw2, gb2 = conv2d_backward(a1, p["w2"], g2)
    g1 = g1 * leaky_grad(h1)
    _, gw1, gb1 = conv2d_backward(x0, p["w1"], g1, need_input=False)
    return NetParams({"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2, "w3": gw3, "b3": gb3})


class Adam:
    """Adam with the usual moment constants (0.9, 0.999) and eps = 1e-8."""

    def __init__(self, params: NetParams, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = NetParams.zeros_like(params).arrays
        self.v = NetParams.zeros_like(params).arrays
        self.t = 0

    def step(self, params: NetParams, grads: NetParams) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.arrays.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params.arrays[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
