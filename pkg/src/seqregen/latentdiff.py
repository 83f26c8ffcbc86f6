"""Conditional denoising diffusion over latent representations.

The denoiser is trained to predict the clean representation directly from a
noised one, a timestep, and a multi-hot label vector. The label conditioning
is randomly dropped during training (classifier-free guidance), replaced by a
learned null vector rather than a zero label, since the all-zero label is a
legal input. Sampling runs the ancestral recursion with the posterior mean
rebuilt from the clean-latent prediction at every step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .checkpoint import CheckpointContainer
from .errors import ShapeError, TrainingDiverged, ValidationError
from .layers import (
    AttentionBlock,
    LayerNorm,
    Linear,
    ParamBag,
    mix_condition,
    sinusoidal_positions,
    timestep_embedding,
)
from .optim import AdamState, adam_step, clip_global_norm, new_rng
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise constants, index 0 holding step t=1."""

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValidationError("schedule needs at least one step")
        if not ((betas > 0.0).all() and (betas < 1.0).all()):
            raise ValidationError("every step noise level must lie in (0, 1)")
        object.__setattr__(self, "betas", betas)

    @property
    def T(self):
        return int(self.betas.size)

    @property
    def alphas(self):
        return 1.0 - self.betas

    @property
    def alpha_bars(self):
        return np.cumprod(self.alphas)

    def alpha_bar(self, t):
        """Cumulative signal fraction; t may be an int or an int array, t=0 -> 1."""
        bars = np.concatenate([[1.0], self.alpha_bars])
        t = np.asarray(t)
        if (t < 0).any() or (t > self.T).any():
            raise ValidationError(f"step index out of range 0..{self.T}")
        return bars[t]


def make_schedule(T, kind="linear", beta_start=1e-4, beta_end=0.02):
    """Build a noise schedule of ``T`` steps, ``kind`` linear or cosine."""
    if T < 1:
        raise ValidationError(f"schedule length must be >= 1, got {T}")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1.0 + s) * math.pi / 2.0) ** 2
        bars = f / f[0]
        betas = np.clip(1.0 - bars[1:] / bars[:-1], 1e-8, 0.999)
    else:
        raise ValidationError(f"unknown schedule kind {kind!r}")
    sched = NoiseSchedule(betas)
    bars = sched.alpha_bars
    if not (np.diff(bars) < 0.0).all():
        raise ValidationError("schedule is not strictly decreasing in signal fraction")
    return sched


def forward_diffuse(r, t, eps, schedule):
    """Noised latent at step t: sqrt(a_bar_t) * r + sqrt(1 - a_bar_t) * eps."""
    r = np.asarray(r)
    eps = np.asarray(eps)
    if r.shape != eps.shape:
        raise ShapeError(f"latent {r.shape} vs noise {eps.shape}")
    t = np.asarray(t)
    if (t < 1).any() or (t > schedule.T).any():
        raise ValidationError(f"step index out of range 1..{schedule.T}")
    bar = schedule.alpha_bar(t)
    if t.ndim:
        bar = bar.reshape((-1,) + (1,) * (r.ndim - 1))
    return (np.sqrt(bar) * r + np.sqrt(1.0 - bar) * eps).astype(r.dtype)


# ------------------------------------------------------------------ denoiser


@dataclass
class DenoiserConfig:
    rep_dim: int
    n_labels: int
    width: int = 64
    blocks: int = 2
    n_tokens: int = 4
    ffn_mult: int = 2
    dtype: type = np.float32

    def __post_init__(self):
        if self.rep_dim % self.n_tokens:
            raise ValidationError(
                f"representation width {self.rep_dim} is not divisible by "
                f"{self.n_tokens} tokens"
            )


class DenoiserModel:
    """Self-attention denoiser over a short token view of the representation.

    The representation is split into ``n_tokens`` chunks, each projected to the
    working width; timestep and condition embeddings are added to every token.
    """

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.bag = ParamBag()
        dt = cfg.dtype
        chunk = cfg.rep_dim // cfg.n_tokens
        self.token_in = Linear(self.bag, rng, "token_in", chunk, cfg.width, dt)
        self.pos = tz.constant(sinusoidal_positions(cfg.n_tokens, cfg.width, dt))
        self.time_proj = Linear(self.bag, rng, "time_proj", cfg.width, cfg.width, dt)
        self.cond_proj = Linear(self.bag, rng, "cond_proj", cfg.n_labels, cfg.width, dt)
        self.null_cond = self.bag.add(
            "null_cond", rng.standard_normal(cfg.width) * 0.02, dt
        )
        self.blocks = [
            AttentionBlock(self.bag, rng, f"block{i}", cfg.width, dt, cfg.ffn_mult)
            for i in range(cfg.blocks)
        ]
        self.out_norm = LayerNorm(self.bag, "out_norm", cfg.width, dt)
        self.token_out = Linear(self.bag, rng, "token_out", cfg.width, chunk, dt, init="small")

    def params(self):
        return self.bag.params()

    def forward(self, r_t, t, y, dropped):
        """Predict the clean latent.

        r_t: (B, m) noised latents; t: (B,) integer steps; y: (B, d) labels;
        dropped: (B, 1) float mask, 1.0 where the condition is replaced by the
        learned null vector.
        """
        cfg = self.cfg
        if not isinstance(r_t, Tensor):
            r_t = tz.constant(np.asarray(r_t, dtype=cfg.dtype))
        if r_t.ndim != 2 or r_t.shape[1] != cfg.rep_dim:
            raise ShapeError(f"expected latents of shape (B, {cfg.rep_dim}), got {r_t.shape}")
        if not isinstance(y, Tensor):
            y = tz.constant(np.asarray(y, dtype=cfg.dtype))
        if y.ndim != 2 or y.shape != (r_t.shape[0], cfg.n_labels):
            raise ShapeError(
                f"expected labels of shape ({r_t.shape[0]}, {cfg.n_labels}), got {y.shape}"
            )
        if not isinstance(dropped, Tensor):
            dropped = tz.constant(np.asarray(dropped, dtype=cfg.dtype).reshape(-1, 1))
        B = r_t.shape[0]
        k = cfg.n_tokens

        h = self.token_in(r_t.reshape(B, k, cfg.rep_dim // k)) + self.pos
        temb = self.time_proj(tz.constant(timestep_embedding(t, cfg.width, cfg.dtype)))
        cond = mix_condition(self.cond_proj(y), self.null_cond, dropped)
        h = h + (temb + cond).reshape(B, 1, cfg.width)
        for block in self.blocks:
            h = block(h)
        h = self.out_norm(h)
        return self.token_out(h).reshape(B, cfg.rep_dim)

    def to_container(self, schedule, norm_mean, norm_std, extra_metadata=None):
        tensors = self.bag.dump(prefix="denoiser.")
        tensors["schedule.betas"] = np.asarray(schedule.betas, dtype=np.float64)
        tensors["norm.mean"] = np.asarray(norm_mean, dtype=np.float32)
        tensors["norm.std"] = np.asarray(norm_std, dtype=np.float32)
        meta = {
            "kind": "diffusion",
            "rep_dim": str(self.cfg.rep_dim),
            "n_labels": str(self.cfg.n_labels),
            "width": str(self.cfg.width),
            "blocks": str(self.cfg.blocks),
            "n_tokens": str(self.cfg.n_tokens),
            "ffn_mult": str(self.cfg.ffn_mult),
        }
        if extra_metadata:
            meta.update(extra_metadata)
        return CheckpointContainer(tensors, meta)

    @classmethod
    def from_container(cls, container):
        meta = container.metadata
        if meta.get("kind") != "diffusion":
            raise ValidationError(
                f"checkpoint kind {meta.get('kind')!r} is not a diffusion model"
            )
        cfg = DenoiserConfig(
            rep_dim=int(meta["rep_dim"]),
            n_labels=int(meta["n_labels"]),
            width=int(meta["width"]),
            blocks=int(meta["blocks"]),
            n_tokens=int(meta["n_tokens"]),
            ffn_mult=int(meta["ffn_mult"]),
        )
        model = cls(cfg, new_rng(0))
        weights = {k: v for k, v in container.tensors.items() if k.startswith("denoiser.")}
        model.bag.load(weights, prefix="denoiser.")
        schedule = NoiseSchedule(container.tensors["schedule.betas"])
        mean = container.tensors["norm.mean"].astype(np.float32)
        std = container.tensors["norm.std"].astype(np.float32)
        return model, schedule, mean, std


# ------------------------------------------------------------------ training


def condition_dropout_mask(batch_size, p_uncond, rng):
    """(B, 1) float mask, 1.0 marking samples whose condition is dropped."""
    if not 0.0 <= p_uncond < 1.0:
        raise ValidationError(f"condition dropout must lie in [0, 1), got {p_uncond}")
    return (rng.random(batch_size) < p_uncond).astype(np.float32).reshape(-1, 1)


def diff_loss(model, reps, labels, schedule, p_uncond, rng, t=None, eps=None, dropped=None):
    """Mean over the batch of the squared distance to the clean latent.

    Draw order when not supplied: steps t, then noise, then the dropout mask,
    so a fixed generator state reproduces the loss exactly. The overrides
    exist for oracle tests.
    """
    reps = np.asarray(reps)
    if reps.ndim != 2 or reps.shape[0] == 0:
        raise ValidationError(f"need a non-empty (B, m) latent batch, got {reps.shape}")
    B = reps.shape[0]
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=B)
    if eps is None:
        eps = rng.standard_normal(reps.shape).astype(reps.dtype)
    if dropped is None:
        dropped = condition_dropout_mask(B, p_uncond, rng)
    r_t = forward_diffuse(reps, t, eps, schedule)
    pred = model.forward(r_t, t, labels, dropped)
    diff = pred - tz.constant(np.asarray(reps, dtype=pred.data.dtype))
    return (diff * diff).sum(axis=1).mean()


def train_diffusion(
    reps,
    labels,
    T=100,
    kind="linear",
    width=64,
    blocks=2,
    n_tokens=4,
    p_uncond=0.1,
    lr=1e-3,
    batch=64,
    epochs=200,
    seed=0,
    clip_norm=1.0,
):
    """Train the denoiser on aligned (N, m) latents and (N, d) labels.

    Latents are standardized per coordinate before training; the statistics
    ride along in the checkpoint and sampling undoes them. Returns a
    checkpoint container with the weights, the schedule, and the loss curve
    endpoints in its metadata.
    """
    reps = np.asarray(reps, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.float32)
    if reps.ndim != 2 or labels.ndim != 2 or reps.shape[0] != labels.shape[0]:
        raise ValidationError(
            f"latents {reps.shape} and labels {labels.shape} must align on axis 0"
        )
    if reps.shape[0] == 0:
        raise ValidationError("cannot train on an empty latent set")
    schedule = make_schedule(T, kind)
    rng = new_rng(seed)
    cfg = DenoiserConfig(
        rep_dim=reps.shape[1], n_labels=labels.shape[1], width=width,
        blocks=blocks, n_tokens=n_tokens,
    )
    model = DenoiserModel(cfg, rng)

    mean = reps.mean(axis=0)
    std = reps.std(axis=0) + 1e-6
    z = (reps - mean) / std

    params = model.params()
    state = AdamState(params, beta1=0.9, beta2=0.999)
    n = reps.shape[0]
    first_loss = None
    last_loss = float("nan")
    for epoch in range(epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        steps = 0
        for start in range(0, n, batch):
            idx = perm[start : start + batch]
            with Tape() as tape:
                loss = diff_loss(model, z[idx], labels[idx], schedule, p_uncond, rng)
            lv = loss.item()
            if not np.isfinite(lv):
                raise TrainingDiverged(f"diffusion loss became non-finite at epoch {epoch}")
            if first_loss is None:
                first_loss = lv
            gmap = backward(loss, tape)
            grads, _ = clip_global_norm([gmap[p] for p in params], clip_norm)
            adam_step(params, grads, state, lr)
            epoch_loss += lv
            steps += 1
        last_loss = epoch_loss / max(steps, 1)
        if epoch == 0 or (epoch + 1) % 20 == 0 or epoch == epochs - 1:
            log.info("diffusion epoch %d/%d loss=%.5f", epoch + 1, epochs, last_loss)

    meta = {
        "T": str(T),
        "schedule": kind,
        "p_uncond": repr(p_uncond),
        "lr": repr(lr),
        "batch": str(batch),
        "epochs": str(epochs),
        "seed": str(seed),
        "clip_norm": repr(clip_norm),
        "loss_first": repr(first_loss if first_loss is not None else float("nan")),
        "loss_last": repr(last_loss),
    }
    return model.to_container(schedule, mean, std, meta)


# ------------------------------------------------------------------ sampling


def ancestral_sample(predict, schedule, n, dim, rng, w=0.0, dtype=np.float32):
    """Run the reverse recursion from pure noise down to a clean latent.

    ``predict(r_t, t, dropped)`` maps an (n, dim) array, an (n,) step array,
    and a dropped flag to the clean-latent prediction. At every step the
    guided prediction is (1+w)*cond - w*uncond; the posterior mean is formed
    from it, with fresh noise at every step except the last.
    """
    if w < 0:
        raise ValidationError(f"guidance weight must be >= 0, got {w}")
    betas = schedule.betas
    alphas = schedule.alphas
    bars = schedule.alpha_bars
    r = rng.standard_normal((n, dim)).astype(dtype)
    for t in range(schedule.T, 0, -1):
        t_arr = np.full(n, t, dtype=np.int64)
        cond = np.asarray(predict(r, t_arr, False), dtype=np.float64)
        uncond = np.asarray(predict(r, t_arr, True), dtype=np.float64)
        r_hat = (1.0 + w) * cond - w * uncond
        beta_t = betas[t - 1]
        alpha_t = alphas[t - 1]
        bar_t = bars[t - 1]
        bar_prev = bars[t - 2] if t > 1 else 1.0
        mu = (
            (math.sqrt(bar_prev) * beta_t / (1.0 - bar_t)) * r_hat
            + (math.sqrt(alpha_t) * (1.0 - bar_prev) / (1.0 - bar_t)) * r
        )
        if t > 1:
            var = (1.0 - bar_prev) / (1.0 - bar_t) * beta_t
            noise = rng.standard_normal((n, dim))
            r = (mu + math.sqrt(var) * noise).astype(dtype)
        else:
            r = mu.astype(dtype)
    return r


def sample_representation(source, y, n=1, w=0.0, seed=0):
    """Draw latent representations for a label vector.

    ``source`` is a trained checkpoint container or a (model, schedule, mean,
    std) tuple from :meth:`DenoiserModel.from_container`. Returns an (n, m)
    float32 array in the original (de-standardized) latent scale.
    """
    if isinstance(source, CheckpointContainer):
        model, schedule, mean, std = DenoiserModel.from_container(source)
    else:
        model, schedule, mean, std = source
    y = np.asarray(y, dtype=np.float32).reshape(-1)
    if y.shape[0] != model.cfg.n_labels:
        raise ShapeError(f"label width {y.shape[0]}, model expects {model.cfg.n_labels}")
    Y = np.broadcast_to(y, (n, y.shape[0]))
    rng = new_rng(seed)

    def predict(r_t, t, dropped_flag):
        flag = 1.0 if dropped_flag else 0.0
        mask = np.full((r_t.shape[0], 1), flag, dtype=np.float32)
        return model.forward(r_t.astype(np.float32), t, Y, mask).data

    z = ancestral_sample(predict, schedule, n, model.cfg.rep_dim, rng, w=w)
    return (z * std + mean).astype(np.float32)
