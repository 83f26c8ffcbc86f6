"""Small neural building blocks shared by the three trainable models."""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .tensor import Tensor


class ParamBag:
    """Ordered name -> parameter registry backing checkpoint round-trips."""

    def __init__(self):
        self._params = {}

    def add(self, name, data, dtype):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = tz.parameter(np.asarray(data, dtype=dtype), name=name)
        self._params[name] = p
        return p

    def params(self):
        return list(self._params.values())

    def named(self):
        return dict(self._params)

    def load(self, arrays, prefix=""):
        for name, p in self._params.items():
            key = prefix + name
            if key not in arrays:
                raise KeyError(f"checkpoint is missing tensor {key!r}")
            arr = arrays[key]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise ValueError(
                    f"tensor {key!r} has shape {arr.shape}, expected {p.data.shape}"
                )
            p.data = arr.astype(p.data.dtype, copy=True)

    def dump(self, prefix=""):
        return {prefix + name: p.data.copy() for name, p in self._params.items()}


def he_init(rng, fan_in, shape, dtype):
    return (rng.standard_normal(size=shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def glorot_init(rng, fan_in, fan_out, shape, dtype):
    return (rng.standard_normal(size=shape) * np.sqrt(2.0 / (fan_in + fan_out))).astype(dtype)


class Linear:
    def __init__(self, bag, rng, name, fan_in, fan_out, dtype, init="glorot"):
        if init == "he":
            w = he_init(rng, fan_in, (fan_in, fan_out), dtype)
        elif init == "small":
            w = (rng.standard_normal(size=(fan_in, fan_out)) * 0.01).astype(dtype)
        else:
            w = glorot_init(rng, fan_in, fan_out, (fan_in, fan_out), dtype)
        self.w = bag.add(f"{name}.w", w, dtype)
        self.b = bag.add(f"{name}.b", np.zeros(fan_out), dtype)

    def __call__(self, x):
        return tz.matmul(x, self.w) + self.b


class LayerNorm:
    def __init__(self, bag, name, dim, dtype, eps=1e-5):
        self.g = bag.add(f"{name}.g", np.ones(dim), dtype)
        self.b = bag.add(f"{name}.b", np.zeros(dim), dtype)
        self.eps = eps

    def __call__(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / tz.sqrt(var + self.eps) * self.g + self.b


class AttentionBlock:
    """Pre-norm single-head self-attention followed by a two-layer feed-forward."""

    def __init__(self, bag, rng, name, width, dtype, ffn_mult=2):
        self.ln1 = LayerNorm(bag, f"{name}.ln1", width, dtype)
        self.wq = Linear(bag, rng, f"{name}.wq", width, width, dtype)
        self.wk = Linear(bag, rng, f"{name}.wk", width, width, dtype)
        self.wv = Linear(bag, rng, f"{name}.wv", width, width, dtype)
        self.wo = Linear(bag, rng, f"{name}.wo", width, width, dtype)
        self.ln2 = LayerNorm(bag, f"{name}.ln2", width, dtype)
        self.f1 = Linear(bag, rng, f"{name}.f1", width, ffn_mult * width, dtype, init="he")
        self.f2 = Linear(bag, rng, f"{name}.f2", ffn_mult * width, width, dtype)
        self.scale = 1.0 / np.sqrt(width)

    def __call__(self, x):
        h = self.ln1(x)
        q, k, v = self.wq(h), self.wk(h), self.wv(h)
        scores = tz.matmul(q, tz.swapaxes(k, -1, -2)) * self.scale
        ctx = tz.matmul(tz.softmax(scores, axis=-1), v)
        x = x + self.wo(ctx)
        h = self.ln2(x)
        return x + self.f2(tz.relu(self.f1(h)))


def sinusoidal_positions(length, width, dtype):
    """Fixed transformer position signal, shape (length, width)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / max(half, 1))
    ang = pos * freqs[None, :]
    enc = np.zeros((length, width), dtype=np.float64)
    enc[:, :half] = np.sin(ang)
    enc[:, half : 2 * half] = np.cos(ang)
    return enc.astype(dtype)


def timestep_embedding(t, width, dtype):
    """Cosine/sine embedding of integer diffusion steps, shape (B, width)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)[:, None]
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / max(half, 1))
    ang = t * freqs[None, :]
    emb = np.zeros((t.shape[0], width), dtype=np.float64)
    emb[:, :half] = np.cos(ang)
    emb[:, half : 2 * half] = np.sin(ang)
    return emb.astype(dtype)


def conv1d(x, w, b, length):
    """Same-padded 1-D convolution as a sum of shifted matmuls.

    x: (B, L, Cin) tensor; w: (k, Cin, Cout) parameter; b: (Cout,) parameter.
    Built entirely from differentiable primitives so input gradients of the
    critic stay twice-differentiable.
    """
    k = w.shape[0]
    pad = k // 2
    B = x.shape[0]
    cin = x.shape[2]
    zeros_front = tz.constant(np.zeros((B, pad, cin), dtype=x.data.dtype))
    zeros_back = tz.constant(np.zeros((B, k - 1 - pad, cin), dtype=x.data.dtype))
    xp = tz.concat([zeros_front, x, zeros_back], axis=1)
    out = None
    for o in range(k):
        term = tz.matmul(xp[:, o : o + length, :], w[o])
        out = term if out is None else out + term
    return out + b


def mix_condition(cond, null_vector, dropped):
    """Per-row select between a condition embedding and the learned null row.

    ``dropped`` is a float column (B, 1) of exact zeros/ones, so undropped rows
    give the null vector an exactly zero gradient and vice versa.
    """
    return cond * (1.0 - dropped) + null_vector * dropped
