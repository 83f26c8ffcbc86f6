"""Supervised annotation classifier whose penultimate activations are the
latent representation used by the rest of the pipeline.

One-hot residue matrices pass through a symbol embedding with fixed position
signals, a short stack of self-attention blocks, a mean-pool over positions,
and one residual block. The residual-block output is the representation; a
linear head on top produces per-label logits.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .checkpoint import CheckpointContainer
from .errors import ShapeError, TrainingDiverged, ValidationError
from .layers import AttentionBlock, Linear, ParamBag, sinusoidal_positions
from .optim import AdamState, adam_step, new_rng
from .seqdata import encode_one_hot
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    max_len: int
    alphabet_size: int
    n_labels: int
    rep_dim: int = 64
    width: int = 64
    blocks: int = 2
    ffn_mult: int = 2
    dtype: type = np.float32


class EncoderModel:
    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.bag = ParamBag()
        dt = cfg.dtype
        self.embed = Linear(self.bag, rng, "embed", cfg.alphabet_size, cfg.width, dt)
        self.pos = tz.constant(sinusoidal_positions(cfg.max_len, cfg.width, dt))
        self.blocks = [
            AttentionBlock(self.bag, rng, f"block{i}", cfg.width, dt, cfg.ffn_mult)
            for i in range(cfg.blocks)
        ]
        self.proj = Linear(self.bag, rng, "proj", cfg.width, cfg.rep_dim, dt)
        self.res1 = Linear(self.bag, rng, "res1", cfg.rep_dim, cfg.rep_dim, dt, init="he")
        self.res2 = Linear(self.bag, rng, "res2", cfg.rep_dim, cfg.rep_dim, dt)
        self.head = Linear(self.bag, rng, "head", cfg.rep_dim, cfg.n_labels, dt)

    def params(self):
        return self.bag.params()

    def backbone_params(self):
        head = {id(self.head.w), id(self.head.b)}
        return [p for p in self.bag.params() if id(p) not in head]

    def forward(self, x):
        """x: (B, L, A) one-hot array or tensor -> (logits (B, d), rep (B, m))."""
        if not isinstance(x, Tensor):
            x = tz.constant(np.asarray(x, dtype=self.cfg.dtype))
        if x.ndim != 3 or x.shape[1] != self.cfg.max_len or x.shape[2] != self.cfg.alphabet_size:
            raise ShapeError(
                f"expected input of shape (B, {self.cfg.max_len}, {self.cfg.alphabet_size}), "
                f"got {x.shape}"
            )
        h = self.embed(x) + self.pos
        for block in self.blocks:
            h = block(h)
        pooled = h.mean(axis=1)
        u = self.proj(pooled)
        rep = u + self.res2(tz.relu(self.res1(u)))
        logits = self.head(rep)
        return logits, rep

    # --- persistence ---------------------------------------------------------

    def to_container(self, extra_metadata=None):
        meta = {
            "kind": "encoder",
            "max_len": str(self.cfg.max_len),
            "alphabet_size": str(self.cfg.alphabet_size),
            "n_labels": str(self.cfg.n_labels),
            "rep_dim": str(self.cfg.rep_dim),
            "width": str(self.cfg.width),
            "blocks": str(self.cfg.blocks),
            "ffn_mult": str(self.cfg.ffn_mult),
        }
        if extra_metadata:
            meta.update(extra_metadata)
        return CheckpointContainer(self.bag.dump(prefix="encoder."), meta)

    @classmethod
    def from_container(cls, container):
        meta = container.metadata
        if meta.get("kind") != "encoder":
            raise ValidationError(f"checkpoint kind {meta.get('kind')!r} is not an encoder")
        cfg = EncoderConfig(
            max_len=int(meta["max_len"]),
            alphabet_size=int(meta["alphabet_size"]),
            n_labels=int(meta["n_labels"]),
            rep_dim=int(meta["rep_dim"]),
            width=int(meta["width"]),
            blocks=int(meta["blocks"]),
            ffn_mult=int(meta["ffn_mult"]),
        )
        model = cls(cfg, new_rng(0))
        model.bag.load(container.tensors, prefix="encoder.")
        return model


def ce_loss(logits, targets):
    """Mean over records and labels of per-label binary cross-entropy.

    ``logits`` are pre-sigmoid scores; computed as softplus(x) - x*y, which
    stays finite for logits like +/-30.
    """
    if not isinstance(targets, Tensor):
        targets = tz.constant(np.asarray(targets, dtype=logits.data.dtype))
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {targets.shape}")
    return (tz.softplus(logits) - logits * targets).mean()


def micro_accuracy(logits, targets):
    pred = (np.asarray(logits) > 0.0).astype(np.float32)
    return float((pred == np.asarray(targets)).mean())


def _encode_batch(records, max_len, alphabet):
    X = np.stack([encode_one_hot(r, max_len, alphabet).matrix for r in records])
    Y = np.stack([np.asarray(r.labels, dtype=np.float32) for r in records])
    return X, Y


def train_encoder(
    dataset,
    rep_dim=64,
    width=64,
    blocks=2,
    lr=1e-3,
    batch=64,
    epochs=20,
    seed=0,
    freeze_backbone=False,
):
    """Train the classifier; returns a checkpoint container.

    ``epochs=0`` returns the freshly initialized weights. A non-finite loss
    aborts with :class:`TrainingDiverged`.
    """
    if dataset.vocab is None:
        raise ValidationError("dataset has no label vocabulary")
    rng = new_rng(seed)
    cfg = EncoderConfig(
        max_len=dataset.max_len,
        alphabet_size=dataset.alphabet.size,
        n_labels=dataset.vocab.size,
        rep_dim=rep_dim,
        width=width,
        blocks=blocks,
    )
    model = EncoderModel(cfg, rng)
    train = dataset.train_records()
    val = dataset.val_records()
    if not train:
        raise ValidationError("dataset has no training records")
    X, Y = _encode_batch(train, dataset.max_len, dataset.alphabet)
    Xv, Yv = (None, None)
    if val:
        Xv, Yv = _encode_batch(val, dataset.max_len, dataset.alphabet)

    if freeze_backbone:
        # only the representation-forming tail and the head train
        params = [
            model.proj.w, model.proj.b, model.res1.w, model.res1.b,
            model.res2.w, model.res2.b, model.head.w, model.head.b,
        ]
    else:
        params = model.params()
    state = AdamState(params, beta1=0.9, beta2=0.999)

    val_acc = float("nan")
    n = len(train)
    for epoch in range(epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        steps = 0
        for start in range(0, n, batch):
            idx = perm[start : start + batch]
            with Tape() as tape:
                logits, _ = model.forward(X[idx])
                loss = ce_loss(logits, Y[idx])
            lv = loss.item()
            if not np.isfinite(lv):
                raise TrainingDiverged(f"encoder loss became non-finite at epoch {epoch}")
            gmap = backward(loss, tape)
            adam_step(params, [gmap[p] for p in params], state, lr)
            epoch_loss += lv
            steps += 1
        msg = f"encoder epoch {epoch + 1}/{epochs} train_loss={epoch_loss / max(steps, 1):.4f}"
        if val:
            vl, va = _validate(model, Xv, Yv, batch)
            val_acc = va
            msg += f" val_loss={vl:.4f} val_micro_acc={va:.4f}"
        log.info(msg)

    if val and epochs == 0:
        _, val_acc = _validate(model, Xv, Yv, batch)
    meta = {
        "vocab": ";".join(dataset.vocab.terms),
        "alphabet": dataset.alphabet.symbols,
        "lr": repr(lr),
        "batch": str(batch),
        "epochs": str(epochs),
        "seed": str(seed),
        "val_micro_accuracy": repr(val_acc),
    }
    return model.to_container(meta)


def _validate(model, Xv, Yv, batch):
    losses = []
    accs = []
    counts = []
    for start in range(0, len(Xv), batch):
        logits, _ = model.forward(Xv[start : start + batch])
        losses.append(ce_loss(logits, Yv[start : start + batch]).item())
        accs.append(micro_accuracy(logits.data, Yv[start : start + batch]))
        counts.append(len(Xv[start : start + batch]))
    w = np.asarray(counts, dtype=np.float64)
    return float(np.average(losses, weights=w)), float(np.average(accs, weights=w))


def embed_dataset(model, records, pad_to=None, batch=64, alphabet=None):
    """Representations for records, optionally zero-padded to ``pad_to`` entries.

    Returns an ordered id -> vector dict (float32).
    """
    from .seqdata import DEFAULT_ALPHABET

    m = model.cfg.rep_dim
    if pad_to is None:
        pad_to = m
    if pad_to < m:
        raise ShapeError(f"pad_to={pad_to} is smaller than the representation width {m}")
    alpha = alphabet or DEFAULT_ALPHABET
    out = {}
    for start in range(0, len(records), batch):
        chunk = records[start : start + batch]
        X = np.stack([encode_one_hot(r, model.cfg.max_len, alpha).matrix for r in chunk])
        _, rep = model.forward(X)
        for rec, vec in zip(chunk, rep.data):
            out[rec.id] = pad_representation(vec, pad_to)
    return out


def pad_representation(vec, pad_to):
    vec = np.asarray(vec, dtype=np.float32)
    if pad_to < vec.shape[0]:
        raise ShapeError(f"pad_to={pad_to} is smaller than the vector width {vec.shape[0]}")
    if pad_to == vec.shape[0]:
        return vec.copy()
    out = np.zeros(pad_to, dtype=np.float32)
    out[: vec.shape[0]] = vec
    return out


def load_external_embeddings(source):
    """Read an id -> vector map from a checkpoint container (path or object).

    All vectors must share one width; returns (dict, width).
    """
    container = source
    if not isinstance(container, CheckpointContainer):
        container = CheckpointContainer.load(source)
    out = {}
    width = None
    for name, arr in container.tensors.items():
        vec = np.asarray(arr, dtype=np.float32).reshape(-1)
        if width is None:
            width = vec.shape[0]
        elif vec.shape[0] != width:
            raise ShapeError(
                f"embedding {name!r} has width {vec.shape[0]}, expected {width}"
            )
        out[name] = vec
    if not out:
        raise ValidationError("embedding container holds no tensors")
    return out, width
