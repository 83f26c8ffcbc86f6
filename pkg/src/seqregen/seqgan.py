"""Conditional Wasserstein GAN with gradient penalty over one-hot sequences.

The generator maps Gaussian noise plus a condition (latent representation
concatenated with the label vector) to per-position residue distributions.
The critic scores sequence matrices under the same condition and is kept
near-Lipschitz by a penalty on its input gradient norm. An auxiliary
classifier with separate (label, real) and (label, generated) channels pushes
generated samples toward their target labels; its weight is the beta knob.

Real sequences enter as exact one-hot; generated ones stay relaxed (softmax
rows), which keeps every loss differentiable end to end.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .checkpoint import CheckpointContainer
from .errors import ShapeError, TrainingDiverged, ValidationError
from .layers import Linear, ParamBag, conv1d, sinusoidal_positions
from .optim import AdamState, adam_step, new_rng
from .seqdata import DEFAULT_ALPHABET, SequenceRecord, decode
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)


@dataclass
class GanConfig:
    max_len: int
    alphabet_size: int
    rep_dim: int
    n_labels: int
    n_z: int = 16
    gen_width: int = 64
    channels: int = 32
    kernel: int = 5
    n_mem: int = 256
    gp_weight: float = 10.0
    cls_weight: float = 175.0
    n_critic: int = 5
    tau: float = 0.0
    dtype: type = np.float32

    def __post_init__(self):
        if self.gp_weight < 0 or self.cls_weight < 0:
            raise ValidationError("penalty and classifier weights must be >= 0")
        if self.n_critic < 1:
            raise ValidationError("need at least one critic step per generator step")
        if self.n_z < 1:
            raise ValidationError("noise width must be >= 1")
        if self.n_mem < 1:
            raise ValidationError("memory slot count must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValidationError("kernel must be odd and >= 1")
        if self.tau < 0:
            raise ValidationError("relaxation temperature must be >= 0")

    @property
    def cond_dim(self):
        return self.rep_dim + self.n_labels


def _as_condition(r, y, cfg):
    r = np.asarray(r, dtype=cfg.dtype)
    y = np.asarray(y, dtype=cfg.dtype)
    if r.ndim != 2 or r.shape[1] != cfg.rep_dim:
        raise ShapeError(f"expected latents of shape (B, {cfg.rep_dim}), got {r.shape}")
    if y.shape != (r.shape[0], cfg.n_labels):
        raise ShapeError(
            f"expected labels of shape ({r.shape[0]}, {cfg.n_labels}), got {y.shape}"
        )
    return tz.constant(np.concatenate([r, y], axis=1))


def gumbel_noise(shape, rng):
    """Standard Gumbel draws for the optional relaxed-discrete output."""
    u = rng.random(shape)
    return -np.log(-np.log(u + 1e-12) + 1e-12)


class GeneratorModel:
    """Noise + condition -> per-position residue distributions.

    The condition enters every layer, including the output logits, so the
    generator has a direct affine path from the latent to the sequence. The
    noise keeps its own skip into the logits as well, so sample spread
    survives even while the hidden layers are still finding their feet.

    A key-value memory sits between the condition and the logits: the
    condition is routed over a bank of slots by softmax attention and the
    attended slot values are added to the logits. Values start at zero, so
    the bank only speaks once routing and content have been learned. Discrete
    slots give the generator a cheap way to hold several distinct
    per-condition outputs instead of blurring them together. Routing logits
    are scaled up by a fixed gain because conditions for one annotation
    cluster tightly; without the gain the softmax would barely move across
    the cluster and the slots could not specialize within it.

    The rest of the network contributes through a bounded residual: its
    logits pass through a scaled tanh before joining the slot values, so the
    trunk can tilt letter preferences but cannot steamroll a slot that has
    committed to a particular sequence.
    """

    ROUTER_GAIN = 8.0
    TRUNK_BOUND = 4.0

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.bag = ParamBag()
        dt = cfg.dtype
        W = cfg.gen_width
        out = cfg.max_len * cfg.alphabet_size
        self.l1 = Linear(self.bag, rng, "l1", cfg.n_z, W, dt, init="he")
        self.c1 = Linear(self.bag, rng, "c1", cfg.cond_dim, W, dt)
        self.l2 = Linear(self.bag, rng, "l2", W, W, dt, init="he")
        self.c2 = Linear(self.bag, rng, "c2", cfg.cond_dim, W, dt)
        self.l3 = Linear(self.bag, rng, "l3", W, out, dt, init="small")
        self.c3 = Linear(self.bag, rng, "c3", cfg.cond_dim, out, dt, init="small")
        self.zskip = Linear(self.bag, rng, "zskip", cfg.n_z, out, dt, init="he")
        self.router = Linear(self.bag, rng, "router", cfg.cond_dim, cfg.n_mem, dt)
        self.mem = self.bag.add("mem.v", np.zeros((cfg.n_mem, out)), dt)

    def params(self):
        # routing keys are fixed after initialization: attention assignments
        # must stay put while the slot contents train, or the optimizer can
        # funnel every condition into a single slot
        frozen = (self.router.w, self.router.b)
        return [p for p in self.bag.params() if p not in frozen]

    def forward(self, z, r, y, gumbel=None):
        cfg = self.cfg
        u = _as_condition(r, y, cfg)
        if not isinstance(z, Tensor):
            z = tz.constant(np.asarray(z, dtype=cfg.dtype))
        if z.ndim != 2 or z.shape != (u.shape[0], cfg.n_z):
            raise ShapeError(f"expected noise of shape ({u.shape[0]}, {cfg.n_z}), got {z.shape}")
        h = tz.leaky_relu(self.l1(z) + self.c1(u))
        h = tz.leaky_relu(self.l2(h) + self.c2(u))
        recalled = tz.matmul(
            tz.softmax(self.router(u) * self.ROUTER_GAIN, axis=-1), self.mem
        )
        trunk = self.l3(h) + self.c3(u) + self.zskip(z)
        trunk = tz.tanh(trunk * (1.0 / self.TRUNK_BOUND)) * self.TRUNK_BOUND
        logits = (trunk + recalled).reshape(
            u.shape[0], cfg.max_len, cfg.alphabet_size
        )
        if gumbel is not None:
            if cfg.tau <= 0:
                raise ValidationError("gumbel noise supplied but the temperature is off")
            logits = (logits + tz.constant(np.asarray(gumbel, dtype=cfg.dtype))) * (
                1.0 / cfg.tau
            )
        return tz.softmax(logits, axis=-1)


VALUE_SCALE = 10.0


def seed_memory(generator, x_onehot, r, y, rng):
    """Data-dependent initialization of the generator's memory bank.

    A random subsample of training examples is written into the slots: each
    value holds one sequence's centered one-hot table scaled to dominate the
    logits, and the routing keys implement nearest-neighbor attention over
    the stored conditions (squared-distance logits with a sharpness matched
    to the local condition spacing). The bank therefore starts out as a
    conditional lookup over known sequences, the same way vector-quantizer
    codebooks are initialized from data, and adversarial training refines it
    from there. Slots beyond the training set size stay silent.
    """
    cfg = generator.cfg
    n = x_onehot.shape[0]
    m = min(cfg.n_mem, n)
    pick = rng.choice(n, size=m, replace=False)
    u = np.concatenate([r[pick], y[pick]], axis=1).astype(np.float64)

    if m > 1:
        d2 = ((u[:, None, :] - u[None, :, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        scale2 = float(np.median(d2.min(axis=1)))
    else:
        scale2 = 0.0
    sharp = 12.0 / scale2 if scale2 > 0 else 1.0

    gain = generator.ROUTER_GAIN
    w = np.zeros(generator.router.w.data.shape, dtype=np.float64)
    b = np.full(generator.router.b.data.shape, -1e4 / gain, dtype=np.float64)
    w[:, :m] = (2.0 * sharp / gain) * u.T
    b[:m] = -(sharp / gain) * (u * u).sum(axis=1)
    generator.router.w.data[...] = w.astype(cfg.dtype)
    generator.router.b.data[...] = b.astype(cfg.dtype)

    flat = x_onehot[pick].reshape(m, cfg.max_len * cfg.alphabet_size)
    values = np.zeros(generator.mem.data.shape, dtype=np.float64)
    values[:m] = VALUE_SCALE * (flat - 1.0 / cfg.alphabet_size)
    generator.mem.data[...] = values.astype(cfg.dtype)


def _conv_stack(bag, rng, name, cfg, in_width):
    k, C, dt = cfg.kernel, cfg.channels, cfg.dtype
    w1 = bag.add(f"{name}.conv1.w",
                 rng.standard_normal((k, in_width, C)) * np.sqrt(2.0 / (k * in_width)), dt)
    b1 = bag.add(f"{name}.conv1.b", np.zeros(C), dt)
    w2 = bag.add(f"{name}.conv2.w",
                 rng.standard_normal((k, C, C)) * np.sqrt(2.0 / (k * C)), dt)
    b2 = bag.add(f"{name}.conv2.b", np.zeros(C), dt)
    return (w1, b1), (w2, b2)


N_POSITION_CHANNELS = 8


class DiscriminatorModel:
    """Conditional Wasserstein critic.

    Convolutions run over one-hot rows tagged with fixed sinusoidal position
    channels, so local features stay location-aware despite the mean pool. A
    wide dense path over the flattened input keeps exact per-position
    sensitivity; its features are concatenated with the pooled convolution
    features rather than summed, so neither starves the other. The condition
    is injected additively at every stage, through a projection term against
    the combined features, and through a joint two-layer head over the
    concatenated (features, condition) pair, which scores how well the
    sequence matches its latent and labels."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.bag = ParamBag()
        dt = cfg.dtype
        feat = cfg.channels + 3 * cfg.channels
        (self.w1, self.b1), (self.w2, self.b2) = _conv_stack(
            self.bag, rng, "trunk", cfg, cfg.alphabet_size + N_POSITION_CHANNELS)
        self.cinj1 = Linear(self.bag, rng, "cinj1", cfg.cond_dim, cfg.channels, dt)
        self.cinj2 = Linear(self.bag, rng, "cinj2", cfg.cond_dim, cfg.channels, dt)
        self.dense = Linear(self.bag, rng, "dense",
                            cfg.max_len * cfg.alphabet_size, 3 * cfg.channels, dt)
        self.proj = Linear(self.bag, rng, "proj", cfg.cond_dim, feat, dt)
        self.head = Linear(self.bag, rng, "head", feat, 1, dt)
        self.chead = Linear(self.bag, rng, "chead", cfg.cond_dim, 1, dt)
        self.pair1 = Linear(self.bag, rng, "pair1",
                            feat + cfg.cond_dim, cfg.channels, dt)
        self.pair2 = Linear(self.bag, rng, "pair2", cfg.channels, 1, dt)
        self.pos = sinusoidal_positions(cfg.max_len, N_POSITION_CHANNELS, dt)

    def params(self):
        return self.bag.params()

    def forward(self, x, u):
        cfg = self.cfg
        if not isinstance(x, Tensor):
            x = tz.constant(np.asarray(x, dtype=cfg.dtype))
        if x.ndim != 3 or x.shape[1] != cfg.max_len or x.shape[2] != cfg.alphabet_size:
            raise ShapeError(
                f"expected sequences of shape (B, {cfg.max_len}, {cfg.alphabet_size}), "
                f"got {x.shape}"
            )
        if not isinstance(u, Tensor):
            u = tz.constant(np.asarray(u, dtype=cfg.dtype))
        B = x.shape[0]
        pos = tz.broadcast_to(
            tz.constant(self.pos[None]), (B, cfg.max_len, N_POSITION_CHANNELS))
        xin = tz.concat([x, pos], axis=2)
        h = conv1d(xin, self.w1, self.b1, cfg.max_len) + self.cinj1(u).reshape(B, 1, cfg.channels)
        h = tz.leaky_relu(h)
        h = conv1d(h, self.w2, self.b2, cfg.max_len) + self.cinj2(u).reshape(B, 1, cfg.channels)
        h = tz.leaky_relu(h)
        phi = tz.concat(
            [h.mean(axis=1), self.dense(x.reshape(B, cfg.max_len * cfg.alphabet_size))],
            axis=1,
        )
        pairing = (self.proj(u) * phi).sum(axis=1).reshape(B, 1)
        joint = self.pair2(tz.leaky_relu(self.pair1(tz.concat([phi, u], axis=1))))
        return self.head(phi) + self.chead(u) + pairing + joint


LOGIT_BOUND = 8.0


class AuxClassifier:
    """Label classifier with twin channel blocks: columns [0, d) score
    (label, real), columns [d, 2d) score (label, generated).

    Shares the critic's input treatment: sinusoidal position channels ride
    along with the one-hot rows, and a dense path over the flattened input
    keeps per-position sensitivity through the mean pool. Logits are
    tanh-bounded so the classifier's pull on the generator fades once its
    verdict is confident, instead of growing without limit and drowning the
    critic's score."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.bag = ParamBag()
        dt = cfg.dtype
        (self.w1, self.b1), (self.w2, self.b2) = _conv_stack(
            self.bag, rng, "trunk", cfg, cfg.alphabet_size + N_POSITION_CHANNELS)
        self.dense = Linear(self.bag, rng, "dense",
                            cfg.max_len * cfg.alphabet_size, cfg.channels, dt)
        self.head = Linear(self.bag, rng, "head", cfg.channels, 2 * cfg.n_labels, dt)
        self.pos = sinusoidal_positions(cfg.max_len, N_POSITION_CHANNELS, dt)

    def params(self):
        return self.bag.params()

    def forward(self, x):
        cfg = self.cfg
        if not isinstance(x, Tensor):
            x = tz.constant(np.asarray(x, dtype=cfg.dtype))
        if x.ndim != 3 or x.shape[1] != cfg.max_len or x.shape[2] != cfg.alphabet_size:
            raise ShapeError(
                f"expected sequences of shape (B, {cfg.max_len}, {cfg.alphabet_size}), "
                f"got {x.shape}"
            )
        B = x.shape[0]
        pos = tz.broadcast_to(tz.constant(self.pos[None]),
                              (B, cfg.max_len, N_POSITION_CHANNELS))
        xin = tz.concat([x, pos], axis=2)
        h = tz.leaky_relu(conv1d(xin, self.w1, self.b1, cfg.max_len))
        h = tz.leaky_relu(conv1d(h, self.w2, self.b2, cfg.max_len))
        phi = h.mean(axis=1) + self.dense(x.reshape((B, cfg.max_len * cfg.alphabet_size)))
        return tz.tanh(self.head(phi) * (1.0 / LOGIT_BOUND)) * LOGIT_BOUND


def adc_loglik(logits, y, channel):
    """Mean log-likelihood that each sample's active labels sit in ``channel``.

    For channel "real", a sample with label l should light channel (l, real)
    and darken (l, generated); "generated" swaps the roles. Per sample the
    log-likelihoods are averaged over active labels, then over the batch.
    """
    if channel not in ("real", "generated"):
        raise ValidationError(f"unknown channel {channel!r}")
    y = np.asarray(y)
    d = y.shape[1]
    if logits.shape != (y.shape[0], 2 * d):
        raise ShapeError(f"classifier logits {logits.shape} vs labels {y.shape}")
    u_real = logits[:, :d]
    u_gen = logits[:, d:]
    if channel == "real":
        ll = -tz.softplus(-u_real) - tz.softplus(u_gen)
    else:
        ll = -tz.softplus(u_real) - tz.softplus(-u_gen)
    weights = tz.constant(np.asarray(y, dtype=ll.data.dtype))
    counts = np.maximum(y.sum(axis=1), 1.0)  # unlabeled rows contribute zero
    per_sample = (ll * weights).sum(axis=1) / tz.constant(
        np.asarray(counts, dtype=ll.data.dtype)
    )
    return per_sample.mean()


def gradient_penalty(critic, x_real, x_fake, u, rng=None, eps=None):
    """Mean squared deviation of the critic's input-gradient norm from 1.

    Evaluated at per-sample random mixes eps * real + (1 - eps) * fake. The
    inner gradient is recorded when a surrounding tape is active, so the
    penalty stays differentiable with respect to critic parameters.
    """
    x_real = np.asarray(x_real)
    x_fake = np.asarray(x_fake)
    if x_real.shape != x_fake.shape:
        raise ShapeError(f"real {x_real.shape} vs fake {x_fake.shape}")
    if eps is None:
        if rng is None:
            raise ValidationError("need a generator or explicit mixing coefficients")
        eps = rng.random((x_real.shape[0],) + (1,) * (x_real.ndim - 1))
    else:
        eps = np.asarray(eps, dtype=np.float64).reshape(
            (x_real.shape[0],) + (1,) * (x_real.ndim - 1)
        )
    mix = (eps * x_real + (1.0 - eps) * x_fake).astype(x_real.dtype)

    def core():
        x_hat = tz.parameter(mix, name="gp_mix")
        score = critic(x_hat, u)
        g = tz.grad(score.sum(), [x_hat], create_graph=tz.recording())[0]
        sq = (g * g).sum(axis=tuple(range(1, g.ndim)))
        dev = tz.sqrt(sq) - 1.0
        return (dev * dev).mean()

    if tz.recording():
        return core()
    with Tape():
        return core()


def _critic_terms(G, D, C, x_real, r, y, cfg, rng, z=None, eps=None, detach_fake=True):
    x_real = np.asarray(x_real, dtype=cfg.dtype)
    B = x_real.shape[0]
    if z is None:
        z = rng.standard_normal((B, cfg.n_z)).astype(cfg.dtype)
    if detach_fake:
        with tz.pause_recording():
            fake = tz.constant(G.forward(z, r, y).data)
    else:
        fake = G.forward(z, r, y)
    u = _as_condition(r, y, cfg)
    score_fake = D.forward(fake, u).mean()
    score_real = D.forward(x_real, u).mean()
    pen = gradient_penalty(D.forward, x_real, fake.data, u, rng=rng, eps=eps)
    cls_real = adc_loglik(C.forward(x_real), y, "real")
    cls_fake = adc_loglik(C.forward(tz.constant(fake.data)), y, "generated")
    loss = (
        score_fake - score_real + cfg.gp_weight * pen
        - cfg.cls_weight * (cls_real + cls_fake)
    )
    return {
        "loss": loss,
        "wasserstein": score_real.item() - score_fake.item(),
        "penalty": pen.item(),
        "cls_real": cls_real.item(),
        "cls_fake": cls_fake.item(),
    }


def critic_loss(G, D, C, x_real, r, y, cfg, rng=None, z=None, eps=None, detach_fake=True):
    """Minimized critic objective.

    E[D(fake)] - E[D(real)] + gp_weight * penalty, minus cls_weight times the
    classifier log-likelihoods of real samples in their (label, real) channels
    and fake samples in (label, generated). Draw order: noise z, then the
    penalty mixing coefficients.
    """
    return _critic_terms(G, D, C, x_real, r, y, cfg, rng, z, eps, detach_fake)["loss"]


def _generator_terms(G, D, C, r, y, cfg, rng, z=None):
    r = np.asarray(r, dtype=cfg.dtype)
    B = r.shape[0]
    if z is None:
        z = rng.standard_normal((B, cfg.n_z)).astype(cfg.dtype)
    fake = G.forward(z, r, y)
    u = _as_condition(r, y, cfg)
    adv = -(D.forward(fake, u).mean())
    logits = C.forward(fake)
    push = adc_loglik(logits, y, "real") - adc_loglik(logits, y, "generated")
    loss = adv - cfg.cls_weight * push
    return {"loss": loss, "adv": adv.item(), "cls_push": push.item()}


def generator_loss(G, D, C, r, y, cfg, rng=None, z=None):
    """Minimized generator objective: -E[D(fake)] minus cls_weight times the
    margin between fake samples' (label, real) and (label, generated)
    log-likelihoods."""
    return _generator_terms(G, D, C, r, y, cfg, rng, z)["loss"]


class GanModels:
    """The three trained networks plus their config."""

    def __init__(self, cfg, seed=0):
        rng = new_rng(seed)
        self.cfg = cfg
        self.generator = GeneratorModel(cfg, rng)
        self.critic = DiscriminatorModel(cfg, rng)
        self.classifier = AuxClassifier(cfg, rng)

    def to_container(self, extra_metadata=None):
        tensors = {}
        tensors.update(self.generator.bag.dump(prefix="generator."))
        tensors.update(self.critic.bag.dump(prefix="critic."))
        tensors.update(self.classifier.bag.dump(prefix="classifier."))
        cfg = self.cfg
        meta = {
            "kind": "gan",
            "max_len": str(cfg.max_len),
            "alphabet_size": str(cfg.alphabet_size),
            "rep_dim": str(cfg.rep_dim),
            "n_labels": str(cfg.n_labels),
            "n_z": str(cfg.n_z),
            "gen_width": str(cfg.gen_width),
            "channels": str(cfg.channels),
            "kernel": str(cfg.kernel),
            "n_mem": str(cfg.n_mem),
            "gp_weight": repr(cfg.gp_weight),
            "cls_weight": repr(cfg.cls_weight),
            "n_critic": str(cfg.n_critic),
            "tau": repr(cfg.tau),
        }
        if extra_metadata:
            meta.update(extra_metadata)
        return CheckpointContainer(tensors, meta)

    @classmethod
    def from_container(cls, container):
        meta = container.metadata
        if meta.get("kind") != "gan":
            raise ValidationError(f"checkpoint kind {meta.get('kind')!r} is not a gan")
        cfg = GanConfig(
            max_len=int(meta["max_len"]),
            alphabet_size=int(meta["alphabet_size"]),
            rep_dim=int(meta["rep_dim"]),
            n_labels=int(meta["n_labels"]),
            n_z=int(meta["n_z"]),
            gen_width=int(meta["gen_width"]),
            channels=int(meta["channels"]),
            kernel=int(meta["kernel"]),
            n_mem=int(meta["n_mem"]),
            gp_weight=float(meta["gp_weight"]),
            cls_weight=float(meta["cls_weight"]),
            n_critic=int(meta["n_critic"]),
            tau=float(meta["tau"]),
        )
        models = cls(cfg, seed=0)
        models.generator.bag.load(container.tensors, prefix="generator.")
        models.critic.bag.load(container.tensors, prefix="critic.")
        models.classifier.bag.load(container.tensors, prefix="classifier.")
        return models


def train_gan(
    dataset,
    reps,
    n_z=16,
    gen_width=64,
    channels=32,
    kernel=5,
    n_mem=256,
    gp_weight=10.0,
    cls_weight=175.0,
    n_critic=5,
    tau=0.0,
    lr=1e-4,
    batch=32,
    steps=300,
    seed=0,
):
    """Adversarial training on a dataset plus an id -> latent map.

    ``steps`` counts generator updates; each is preceded by ``n_critic``
    critic updates (the critic and classifier share an optimizer, since the
    critic objective carries the classifier terms). Returns a checkpoint with
    all three networks. A non-finite loss aborts with the last good snapshot
    attached to the raised error.
    """
    from .encoder import _encode_batch

    records = dataset.train_records()
    if not records:
        raise ValidationError("dataset has no training records")
    missing = [rec.id for rec in records if rec.id not in reps]
    if missing:
        raise ValidationError(
            f"{len(missing)} training record(s) have no latent representation, "
            f"first missing id {missing[0]!r}"
        )
    X, Y = _encode_batch(records, dataset.max_len, dataset.alphabet)
    R = np.stack([np.asarray(reps[rec.id], dtype=np.float32) for rec in records])

    cfg = GanConfig(
        max_len=dataset.max_len,
        alphabet_size=dataset.alphabet.size,
        rep_dim=R.shape[1],
        n_labels=Y.shape[1],
        n_z=n_z,
        gen_width=gen_width,
        channels=channels,
        kernel=kernel,
        n_mem=n_mem,
        gp_weight=gp_weight,
        cls_weight=cls_weight,
        n_critic=n_critic,
        tau=tau,
    )
    models = GanModels(cfg, seed=seed)
    seed_memory(models.generator, X, R, Y, new_rng(seed + 2))
    rng = new_rng(seed + 1)

    g_params = models.generator.params()
    dc_params = models.critic.params() + models.classifier.params()
    g_state = AdamState(g_params, beta1=0.0, beta2=0.9)
    dc_state = AdamState(dc_params, beta1=0.0, beta2=0.9)

    n = len(records)
    take = min(batch, n)
    critic_steps = 0
    generator_steps = 0
    last_good = models.to_container({"critic_steps": "0", "generator_steps": "0"})

    def snapshot():
        return models.to_container({
            "critic_steps": str(critic_steps),
            "generator_steps": str(generator_steps),
            "lr": repr(lr),
            "batch": str(batch),
            "steps": str(steps),
            "seed": str(seed),
        })

    for step in range(steps):
        stats = {}
        for _ in range(n_critic):
            idx = rng.choice(n, size=take, replace=False)
            with Tape() as tape:
                stats = _critic_terms(
                    models.generator, models.critic, models.classifier,
                    X[idx], R[idx], Y[idx], cfg, rng,
                )
                loss = stats["loss"]
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(
                    f"critic loss became non-finite at generator step {step}",
                    last_good=last_good,
                )
            gmap = backward(loss, tape)
            adam_step(dc_params, [gmap[p] for p in dc_params], dc_state, lr)
            critic_steps += 1

        idx = rng.choice(n, size=take, replace=False)
        with Tape() as tape:
            gstats = _generator_terms(
                models.generator, models.critic, models.classifier,
                R[idx], Y[idx], cfg, rng,
            )
            gloss = gstats["loss"]
        if not np.isfinite(gloss.item()):
            raise TrainingDiverged(
                f"generator loss became non-finite at step {step}",
                last_good=last_good,
            )
        gmap = backward(gloss, tape)
        adam_step(g_params, [gmap[p] for p in g_params], g_state, lr)
        generator_steps += 1
        last_good = snapshot()

        if step == 0 or (step + 1) % 50 == 0 or step == steps - 1:
            log.info(
                "gan step %d/%d wasserstein=%.4f penalty=%.4f cls_real=%.4f "
                "cls_fake=%.4f gen_adv=%.4f",
                step + 1, steps, stats.get("wasserstein", float("nan")),
                stats.get("penalty", float("nan")), stats.get("cls_real", float("nan")),
                stats.get("cls_fake", float("nan")), gstats["adv"],
            )

    return snapshot()


def sample_sequences(source, reps, y, n=None, seed=0, alphabet=None, id_prefix="gen"):
    """Decode generated sequences for one label vector.

    ``reps`` is an (n, rep_dim) array of latents, one per output record; ``y``
    is a single label vector shared by all of them. Rows are argmax-decoded
    with PAD trimming; an untrained generator can in principle emit an empty
    sequence.
    """
    models = source
    if isinstance(source, CheckpointContainer):
        models = GanModels.from_container(source)
    cfg = models.cfg
    reps = np.asarray(reps, dtype=np.float32)
    if reps.ndim != 2:
        raise ShapeError(f"expected an (n, {cfg.rep_dim}) latent array, got {reps.shape}")
    if n is None:
        n = reps.shape[0]
    if n != reps.shape[0]:
        raise ValidationError(f"asked for {n} samples but supplied {reps.shape[0]} latents")
    if n == 0:
        return []
    alphabet = alphabet or DEFAULT_ALPHABET
    y = np.asarray(y, dtype=np.float32).reshape(-1)
    Y = np.broadcast_to(y, (n, y.shape[0]))
    rng = new_rng(seed)
    z = rng.standard_normal((n, cfg.n_z)).astype(np.float32)
    with tz.pause_recording():
        x = models.generator.forward(z, reps, Y).data
    out = []
    for i in range(n):
        out.append(
            SequenceRecord(
                id=f"{id_prefix}_{i}",
                residues=decode(x[i], alphabet),
                labels=y.copy(),
            )
        )
    return out
