"""Adam with bias correction, gradient clipping, and seeded Gaussian draws."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import DEFAULT_DTYPE, Tensor


class AdamState:
    """First/second moment accumulators for an ordered parameter list."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def state_arrays(self):
        """Serializable snapshot (step count plus moment arrays)."""
        out = {"adam.step": np.asarray([float(self.step)], dtype=np.float64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{i}"] = m.copy()
            out[f"adam.v.{i}"] = v.copy()
        return out

    @classmethod
    def from_arrays(cls, params, arrays, beta1=0.9, beta2=0.999, eps=1e-8):
        state = cls(params, beta1=beta1, beta2=beta2, eps=eps)
        state.step = int(arrays["adam.step"][0])
        for i in range(len(state.m)):
            state.m[i] = arrays[f"adam.m.{i}"].astype(state.m[i].dtype, copy=True)
            state.v[i] = arrays[f"adam.v.{i}"].astype(state.v[i].dtype, copy=True)
        return state


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("parameter/gradient/state lists differ in length")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        ga = g.data if isinstance(g, Tensor) else np.asarray(g)
        if ga.shape != p.data.shape:
            raise ShapeError(
                f"gradient shape {ga.shape} does not match parameter {p.data.shape}"
            )
        np.multiply(m, b1, out=m)
        m += (1.0 - b1) * ga
        np.multiply(v, b2, out=v)
        v += (1.0 - b2) * ga * ga
        update = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype, copy=False)


def clip_global_norm(grads, max_norm):
    """Scale the gradient list so its joint L2 norm is at most ``max_norm``."""
    arrays = [g.data if isinstance(g, Tensor) else np.asarray(g) for g in grads]
    total = float(np.sqrt(sum(float((a.astype(np.float64) ** 2).sum()) for a in arrays)))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        arrays = [a * scale for a in arrays]
    return arrays, total


def new_rng(seed):
    """The package-wide named generator: PCG64 behind numpy's Generator."""
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed, n):
    """Independent child streams derived from one seed."""
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]


def sample_gaussian(shape, seed=None, rng=None, dtype=DEFAULT_DTYPE):
    """I.i.d. standard normal tensor; identical seed gives identical bytes."""
    if rng is None:
        rng = new_rng(seed)
    return Tensor(rng.standard_normal(size=shape).astype(dtype))
