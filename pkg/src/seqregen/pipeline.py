"""Dataset directory persistence, run manifests, and two-step sampling.

A dataset directory holds train.fasta, val.fasta, labels.tsv, vocab.txt and
meta.json. Every CLI run records a manifest (command, config echo, input and
output digests, seed, wall time) next to its main artifact. Conditional
generation composes the two trained stages: for each requested sample a
latent representation is drawn from the label first, then a sequence is
decoded from (representation, label); sequence-space data is never consulted
while producing the representation.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile

import numpy as np

from .checkpoint import CheckpointContainer
from .encoder import pad_representation
from .errors import ValidationError
from .latentdiff import DenoiserModel, sample_representation
from .seqdata import (
    Dataset,
    LabelVocabulary,
    SequenceRecord,
    parse_fasta,
    parse_labels,
    write_fasta,
)
from .seqgan import GanModels, sample_sequences

log = logging.getLogger(__name__)

DATASET_FILES = ("train.fasta", "val.fasta", "labels.tsv", "vocab.txt", "meta.json")


def atomic_write_text(path, text):
    """Write UTF-8 text via a temp file and rename, so readers never see
    a partial file."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def digest_paths(paths):
    """Map every file (directories are walked, sorted) to its sha256."""
    out = {}
    for path in paths:
        if os.path.isdir(path):
            names = sorted(
                os.path.join(root, name)
                for root, _, files in os.walk(path)
                for name in files
            )
            for name in names:
                out[str(name)] = sha256_file(name)
        else:
            out[str(path)] = sha256_file(path)
    return out


def write_manifest(path, command, config, inputs, outputs, seed, wall_time_s):
    """Record a finished run: what ran, on which inputs, producing what."""
    manifest = {
        "command": command,
        "config": config,
        "inputs": digest_paths(inputs),
        "seed": seed,
        "wall_time_s": wall_time_s,
        "outputs": digest_paths(outputs),
    }
    atomic_write_text(path, json.dumps(manifest, indent=2) + "\n")
    return manifest


def _labels_tsv(records, vocab):
    lines = []
    for rec in records:
        terms = vocab.terms_of(rec.labels) if rec.labels is not None else []
        lines.append(f"{rec.id}\t{';'.join(terms)}")
    return "\n".join(lines) + "\n"


def save_dataset(dataset, out_dir):
    """Write the dataset directory layout; returns the file paths."""
    if dataset.vocab is None:
        raise ValidationError("dataset has no label vocabulary, cannot save")
    os.makedirs(out_dir, exist_ok=True)
    train = dataset.train_records()
    val = dataset.val_records()
    meta = {
        "max_len": dataset.max_len,
        "n_train": len(train),
        "n_val": len(val),
    }
    contents = {
        "train.fasta": write_fasta(train) if train else "",
        "val.fasta": write_fasta(val) if val else "",
        "labels.tsv": _labels_tsv(train + val, dataset.vocab),
        "vocab.txt": dataset.vocab.to_text(),
        "meta.json": json.dumps(meta, indent=2) + "\n",
    }
    paths = []
    for name, text in contents.items():
        path = os.path.join(out_dir, name)
        atomic_write_text(path, text)
        paths.append(path)
    return paths


def _read(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    except OSError as e:
        raise ValidationError(f"cannot read {path}: {e}") from None


def load_dataset(path):
    """Rebuild a Dataset from a directory written by save_dataset."""
    for name in DATASET_FILES:
        if not os.path.exists(os.path.join(path, name)):
            raise ValidationError(f"dataset directory {path} is missing {name}")
    vocab = LabelVocabulary.from_text(_read(os.path.join(path, "vocab.txt")))
    label_map = parse_labels(_read(os.path.join(path, "labels.tsv")), vocab)
    meta = json.loads(_read(os.path.join(path, "meta.json")))

    def load_split(name):
        text = _read(os.path.join(path, name))
        if not text.strip():
            return []
        records = parse_fasta(text)
        for rec in records:
            if rec.id not in label_map:
                raise ValidationError(
                    f"{name}: record {rec.id!r} has no row in labels.tsv"
                )
            rec.labels = label_map[rec.id]
        return records

    train = load_split("train.fasta")
    val = load_split("val.fasta")
    return Dataset(
        records=train + val,
        train_indices=list(range(len(train))),
        val_indices=list(range(len(train), len(train) + len(val))),
        vocab=vocab,
        max_len=int(meta["max_len"]),
    )


def embeddings_container(rep_map, extra_metadata=None):
    """Pack an id -> vector map into a checkpoint container."""
    if not rep_map:
        raise ValidationError("no representations to save")
    widths = {np.asarray(v).reshape(-1).shape[0] for v in rep_map.values()}
    if len(widths) != 1:
        raise ValidationError(f"representations have mixed widths {sorted(widths)}")
    metadata = {
        "kind": "embeddings",
        "width": str(widths.pop()),
        "count": str(len(rep_map)),
    }
    metadata.update(extra_metadata or {})
    tensors = {
        rid: np.asarray(vec, dtype=np.float32).reshape(-1)
        for rid, vec in rep_map.items()
    }
    return CheckpointContainer(tensors, metadata)


def labels_from_description(description):
    """Extract term names from a 'labels=a;b' token; None when absent."""
    for token in description.split():
        if token.startswith("labels="):
            return [t for t in token[len("labels=") :].split(";") if t]
    return None


def _load_diffusion(source):
    if isinstance(source, (str, os.PathLike)):
        source = CheckpointContainer.load(source)
    if isinstance(source, CheckpointContainer):
        return DenoiserModel.from_container(source)
    return source


def _load_gan(source):
    if isinstance(source, (str, os.PathLike)):
        source = CheckpointContainer.load(source)
    if isinstance(source, CheckpointContainer):
        return GanModels.from_container(source)
    return source


def two_stage_sample(y, n, diffusion, gan, w=0.0, seed=0, id_prefix="gen"):
    """Generate n sequences for a label vector, one sample at a time.

    Per sample: draw a representation from the label (guidance weight w),
    then decode a sequence from (representation, label). Both checkpoints
    may be paths, containers, or preloaded models. A diffusion width below
    the sequence model's is zero-padded up; a larger one is an error.
    """
    if n < 0:
        raise ValidationError(f"sample count must be >= 0, got {n}")
    diff = _load_diffusion(diffusion)
    models = _load_gan(gan)
    diff_width = diff[0].cfg.rep_dim
    gan_width = models.cfg.rep_dim
    if diff_width > gan_width:
        raise ValidationError(
            f"representation width mismatch: diffusion produces {diff_width}, "
            f"the sequence generator expects {gan_width}"
        )
    out = []
    for i in range(n):
        rep = sample_representation(diff, y, n=1, w=w, seed=seed + 2 * i)
        if diff_width < gan_width:
            rep = pad_representation(rep[0], gan_width).reshape(1, -1)
        rec = sample_sequences(
            models, rep, y, n=1, seed=seed + 2 * i + 1, id_prefix="sample"
        )[0]
        out.append(
            SequenceRecord(
                id=f"{id_prefix}_{i}", residues=rec.residues, labels=rec.labels
            )
        )
    return out
