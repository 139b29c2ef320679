"""Numpy layers with hand-written backward passes.

Forward functions return ``(output, cache)``; backward functions take the
upstream gradient and the cache, accumulate parameter gradients in place into
the supplied gradient views, and return the input gradient.
"""

from __future__ import annotations

import math

import numpy as np

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_MASKED = -1e30


def _rows(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def linear(x, W, b):
    return x @ W + b, x


def linear_backward(dy, x, W, gW, gb):
    gW += _rows(x).T @ _rows(dy)
    gb += _rows(dy).sum(axis=0)
    return dy @ W.T


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xh = xc * rstd
    return xh * g + b, (xh, rstd)


def layer_norm_backward(dy, cache, g, gg, gb):
    xh, rstd = cache
    gg += _rows(dy * xh).sum(axis=0)
    gb += _rows(dy).sum(axis=0)
    dxh = dy * g
    return rstd * (dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).mean(axis=-1, keepdims=True))


def gelu(x):
    """Tanh approximation of GELU."""
    th = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
    return 0.5 * x * (1.0 + th), (x, th)


def gelu_backward(dy, cache):
    x, th = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)


def softmax(s, mask=None):
    if mask is not None:
        s = np.where(mask, s, _MASKED)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def attention(xq, xkv, p: dict, heads: int, key_mask=None):
    """Multi-head attention. ``p`` holds Wq, bq, Wk, bk, Wv, bv, Wo, bo.

    ``key_mask`` is a boolean ``(B, m)`` array; False keys get zero weight.
    Returns the output and a cache that also exposes the attention weights as ``cache["attn"]``.
    """
    B, n, d = xq.shape
    m = xkv.shape[1]
    dh = d // heads
    q = (xq @ p["Wq"] + p["bq"]).reshape(B, n, heads, dh).transpose(0, 2, 1, 3)
    k = (xkv @ p["Wk"] + p["bk"]).reshape(B, m, heads, dh).transpose(0, 2, 1, 3)
    v = (xkv @ p["Wv"] + p["bv"]).reshape(B, m, heads, dh).transpose(0, 2, 1, 3)
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
    mask = None if key_mask is None else key_mask[:, None, None, :]
    a = softmax(scores, mask)
    o = (a @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
    out = o @ p["Wo"] + p["bo"]
    return out, {"xq": xq, "xkv": xkv, "q": q, "k": k, "v": v, "attn": a, "o": o}


def attention_backward(dout, cache, p: dict, g: dict, heads: int):
    """Returns ``(dxq, dxkv)``."""
    xq, xkv, q, k, v, a, o = (cache[key] for key in ("xq", "xkv", "q", "k", "v", "attn", "o"))
    B, n, d = xq.shape
    m = xkv.shape[1]
    dh = d // heads
    do = linear_backward(dout, o, p["Wo"], g["Wo"], g["bo"])
    do = do.reshape(B, n, heads, dh).transpose(0, 2, 1, 3)
    da = do @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dq = dq.transpose(0, 2, 1, 3).reshape(B, n, d)
    dk = dk.transpose(0, 2, 1, 3).reshape(B, m, d)
    dv = dv.transpose(0, 2, 1, 3).reshape(B, m, d)
    dxq = linear_backward(dq, xq, p["Wq"], g["Wq"], g["bq"])
    dxkv = linear_backward(dk, xkv, p["Wk"], g["Wk"], g["bk"])
    dxkv += linear_backward(dv, xkv, p["Wv"], g["Wv"], g["bv"])
    return dxq, dxkv


class ParamLayout:
    """Named views into one flat float64 vector, in a fixed declaration order."""

    def __init__(self):
        self.entries: dict[str, tuple[int, tuple[int, ...]]] = {}
        self.size = 0

    def add(self, name: str, *shape: int) -> None:
        if name in self.entries:
            raise KeyError(f"duplicate parameter {name}")
        self.entries[name] = (self.size, tuple(shape))
        self.size += int(np.prod(shape))

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        if flat.shape != (self.size,):
            raise ValueError(f"flat vector has shape {flat.shape}, layout needs ({self.size},)")
        return {name: flat[off:off + int(np.prod(shape))].reshape(shape)
                for name, (off, shape) in self.entries.items()}

    def group(self, views: dict, prefix: str) -> dict:
        """Sub-dict of ``views`` under ``prefix.`` with the prefix stripped."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in views.items() if k.startswith(prefix + ".")}


class Adam:
    """Adaptive-moment updates on a flat parameter vector."""

    def __init__(self, size: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        params -= lr * mhat / (np.sqrt(vhat) + self.eps)
