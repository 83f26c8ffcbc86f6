"""Command-line interface wiring ingestion, training, sampling, evaluation.

Exit codes: 0 on success, 1 on validation problems (bad flags, malformed
inputs, out-of-range config), 2 on runtime failures (diverged training,
I/O errors mid-run). Every successful run writes a manifest next to its
main artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from .checkpoint import CheckpointContainer
from .config import RunConfig, load_config
from .encoder import EncoderModel, embed_dataset, load_external_embeddings, train_encoder
from .errors import SeqRegenError, ValidationError
from .evalmetrics import (
    KernelConfig,
    column_entropy,
    evaluation_report,
    export_features,
)
from .latentdiff import train_diffusion
from .pipeline import (
    atomic_write_text,
    embeddings_container,
    labels_from_description,
    load_dataset,
    save_dataset,
    two_stage_sample,
    write_manifest,
)
from .seqdata import (
    LabelVocabulary,
    SequenceRecord,
    filter_nonstandard,
    parse_fasta,
    parse_labels,
    split_dataset,
    write_fasta,
)
from .seqgan import train_gan

log = logging.getLogger(__name__)


class UsageError(Exception):
    """Bad command line; maps to usage text and exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _add_config_flag(parser):
    parser.add_argument(
        "--config", help="key=value config file; explicit flags override it"
    )


def build_parser():
    parser = _Parser(prog="seqregen", allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("ingest", allow_abbrev=False)
    p.add_argument("--fasta", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--max-len", type=int, dest="max_len")
    p.add_argument("--val-fraction", type=float, dest="val_fraction")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _add_config_flag(p)
    p.set_defaults(handler=_cmd_ingest)

    p = sub.add_parser("train-encoder", allow_abbrev=False)
    p.add_argument("--data", required=True)
    p.add_argument("--dim", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _add_config_flag(p)
    p.set_defaults(handler=_cmd_train_encoder)

    p = sub.add_parser("embed", allow_abbrev=False)
    p.add_argument("--encoder", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pad-to", type=int, dest="latent_width")
    p.add_argument("--out", required=True)
    _add_config_flag(p)
    p.set_defaults(handler=_cmd_embed)

    p = sub.add_parser("train-diffusion", allow_abbrev=False)
    p.add_argument("--reps", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--p-uncond", type=float, dest="p_uncond")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int, dest="diffusion_epochs")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _add_config_flag(p)
    p.set_defaults(handler=_cmd_train_diffusion)

    p = sub.add_parser("train-gan", allow_abbrev=False)
    p.add_argument("--data", required=True)
    p.add_argument("--reps", required=True)
    p.add_argument("--beta", type=float, dest="cls_weight")
    p.add_argument("--lambda", type=float, dest="gp_weight")
    p.add_argument("--n-critic", type=int, dest="n_critic")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--steps", type=int, dest="gan_steps")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _add_config_flag(p)
    p.set_defaults(handler=_cmd_train_gan)

    p = sub.add_parser("sample", allow_abbrev=False)
    p.add_argument("--diffusion", required=True)
    p.add_argument("--gan", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--guidance", type=float)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _add_config_flag(p)
    p.set_defaults(handler=_cmd_sample)

    p = sub.add_parser("evaluate", allow_abbrev=False)
    p.add_argument("--real", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--kmer", type=int)
    p.add_argument("--nearest-identity", action="store_true", dest="nearest")
    p.add_argument("--seed", type=int)
    p.add_argument("--report", required=True)
    _add_config_flag(p)
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("entropy", allow_abbrev=False)
    p.add_argument("--alignment", required=True)
    p.add_argument("--out", required=True)
    _add_config_flag(p)
    p.set_defaults(handler=_cmd_entropy)

    p = sub.add_parser("features", allow_abbrev=False)
    p.add_argument("--fasta", required=True)
    p.add_argument("--encoder")
    p.add_argument("--kmer", type=int)
    p.add_argument("--out", required=True)
    _add_config_flag(p)
    p.set_defaults(handler=_cmd_features)

    return parser


_CONFIG_FIELDS = tuple(RunConfig().as_dict())


def _resolve_config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {
        name: getattr(args, name)
        for name in _CONFIG_FIELDS
        if getattr(args, name, None) is not None
    }
    return cfg.merged(**overrides)


def _read(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    except OSError as e:
        raise ValidationError(f"cannot read {path}: {e}") from None


def _config_echo(cfg, args):
    flags = {
        k: v
        for k, v in vars(args).items()
        if k not in ("handler", "command") and not callable(v)
    }
    return {"resolved": cfg.as_dict(), "flags": flags}


# ------------------------------------------------------------- subcommands
# each handler returns (input paths, output paths) for the manifest


def _cmd_ingest(args, cfg):
    vocab = LabelVocabulary.from_text(_read(args.vocab))
    label_map = parse_labels(_read(args.labels), vocab)
    records = parse_fasta(_read(args.fasta))
    records, dropped = filter_nonstandard(records)
    if dropped:
        log.info("dropped %d record(s) with nonstandard letters", dropped)
    kept = [r for r in records if len(r.residues) <= cfg.max_len]
    if len(kept) < len(records):
        log.info(
            "dropped %d record(s) longer than max_len=%d",
            len(records) - len(kept),
            cfg.max_len,
        )
    for rec in kept:
        if rec.id not in label_map:
            raise ValidationError(f"record {rec.id!r} has no row in the label table")
        rec.labels = label_map[rec.id]
    dataset = split_dataset(
        kept, cfg.val_fraction, cfg.seed, vocab=vocab, max_len=cfg.max_len
    )
    save_dataset(dataset, args.out)
    return [args.fasta, args.labels, args.vocab], [args.out]


def _cmd_train_encoder(args, cfg):
    dataset = load_dataset(args.data)
    container = train_encoder(
        dataset,
        rep_dim=cfg.dim,
        lr=cfg.lr,
        batch=cfg.batch,
        epochs=cfg.epochs,
        seed=cfg.seed,
    )
    container.save(args.out)
    return [args.data], [args.out]


def _cmd_embed(args, cfg):
    encoder = EncoderModel.from_container(CheckpointContainer.load(args.encoder))
    dataset = load_dataset(args.data)
    rep_map = embed_dataset(encoder, dataset.records, pad_to=cfg.latent_width)
    container = embeddings_container(
        rep_map, {"encoder_dim": str(encoder.cfg.rep_dim)}
    )
    container.save(args.out)
    return [args.encoder, args.data], [args.out]


def _aligned_reps(records, rep_map, source_name):
    missing = [rec.id for rec in records if rec.id not in rep_map]
    if missing:
        raise ValidationError(
            f"{len(missing)} record(s) have no representation in {source_name}, "
            f"first missing id {missing[0]!r}"
        )
    return np.stack([rep_map[rec.id] for rec in records])


def _cmd_train_diffusion(args, cfg):
    rep_map, width = load_external_embeddings(args.reps)
    dataset = load_dataset(args.data)
    records = dataset.train_records()
    reps = _aligned_reps(records, rep_map, args.reps)
    labels = np.stack([rec.labels for rec in records])
    n_tokens = 4 if width % 4 == 0 else (2 if width % 2 == 0 else 1)
    container = train_diffusion(
        reps,
        labels,
        T=cfg.steps,
        n_tokens=n_tokens,
        p_uncond=cfg.p_uncond,
        lr=cfg.lr,
        batch=cfg.batch,
        epochs=cfg.diffusion_epochs,
        seed=cfg.seed,
    )
    container.metadata["vocab"] = ";".join(dataset.vocab.terms)
    container.save(args.out)
    return [args.reps, args.data], [args.out]


def _cmd_train_gan(args, cfg):
    dataset = load_dataset(args.data)
    rep_map, _ = load_external_embeddings(args.reps)
    container = train_gan(
        dataset,
        rep_map,
        gp_weight=cfg.gp_weight,
        cls_weight=cfg.cls_weight,
        n_critic=cfg.n_critic,
        lr=cfg.lr,
        batch=cfg.batch,
        steps=cfg.gan_steps,
        seed=cfg.seed,
    )
    container.metadata["vocab"] = ";".join(dataset.vocab.terms)
    container.save(args.out)
    return [args.data, args.reps], [args.out]


def _vocab_from_checkpoint(container, path):
    terms = container.metadata.get("vocab")
    if not terms:
        raise ValidationError(
            f"checkpoint {path} carries no label vocabulary metadata"
        )
    return LabelVocabulary(terms.split(";"))


def _cmd_sample(args, cfg):
    diffusion = CheckpointContainer.load(args.diffusion)
    gan = CheckpointContainer.load(args.gan)
    vocab = _vocab_from_checkpoint(gan, args.gan)
    terms = [t for t in args.labels.split(";") if t]
    if not terms:
        raise ValidationError("no label terms given")
    y = vocab.vector(terms)
    records = two_stage_sample(
        y, args.n, diffusion, gan, w=cfg.guidance, seed=cfg.seed
    )
    description = "labels=" + ";".join(terms)
    for rec in records:
        rec.description = description
    atomic_write_text(args.out, write_fasta(records) if records else "")
    return [args.diffusion, args.gan], [args.out]


def _attach_eval_labels(records, label_map, vocab, which):
    for rec in records:
        if rec.id in label_map:
            rec.labels = label_map[rec.id]
            continue
        terms = labels_from_description(rec.description)
        if terms is None:
            raise ValidationError(
                f"{which} record {rec.id!r} has no label row and no "
                f"labels=... description"
            )
        rec.labels = vocab.vector(terms)


def _cmd_evaluate(args, cfg):
    vocab = LabelVocabulary.from_text(_read(args.vocab))
    label_map = parse_labels(_read(args.labels), vocab)
    real = parse_fasta(_read(args.real))
    gen = parse_fasta(_read(args.gen))
    _attach_eval_labels(real, label_map, vocab, "real")
    _attach_eval_labels(gen, label_map, vocab, "generated")
    report = evaluation_report(
        real,
        gen,
        vocab,
        kernel=KernelConfig(k=cfg.kmer),
        nearest=args.nearest,
        uniform_seed=cfg.seed,
    )
    atomic_write_text(args.report, json.dumps(report.as_dict(), indent=2) + "\n")
    return [args.real, args.gen, args.labels, args.vocab], [args.report]


def _cmd_entropy(args, cfg):
    records = parse_fasta(_read(args.alignment), allow_gaps=True)
    entropies, all_gap = column_entropy([rec.residues for rec in records])
    lines = ["column\tentropy_bits\tall_gap"]
    for i, (value, flag) in enumerate(zip(entropies, all_gap), start=1):
        lines.append("%d\t%.9g\t%d" % (i, value, int(flag)))
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    return [args.alignment], [args.out]


def _cmd_features(args, cfg):
    records = parse_fasta(_read(args.fasta))
    term_lists = [labels_from_description(rec.description) for rec in records]
    vocab = None
    named = sorted({t for terms in term_lists if terms for t in terms})
    if named:
        vocab = LabelVocabulary(named)
        for rec, terms in zip(records, term_lists):
            if terms:
                rec.labels = vocab.vector(terms)
    encoder = None
    inputs = [args.fasta]
    if args.encoder:
        encoder = EncoderModel.from_container(CheckpointContainer.load(args.encoder))
        inputs.append(args.encoder)
    text = export_features(records, k=cfg.kmer, encoder=encoder, vocab=vocab)
    atomic_write_text(args.out, text)
    return inputs, [args.out]


def main(argv=None):
    if not logging.getLogger().handlers:
        logging.basicConfig(
            level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
        )
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    started = time.monotonic()
    try:
        cfg = _resolve_config(args)
        inputs, outputs = args.handler(args, cfg)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (SeqRegenError, OSError, MemoryError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2
    manifest_path = _manifest_path(outputs[0])
    write_manifest(
        manifest_path,
        command="seqregen " + " ".join(argv),
        config=_config_echo(cfg, args),
        inputs=inputs,
        outputs=outputs,
        seed=cfg.seed,
        wall_time_s=time.monotonic() - started,
    )
    return 0


def _manifest_path(primary_output):
    base = os.path.dirname(primary_output)
    if os.path.isdir(primary_output):
        return os.path.join(primary_output, "manifest.json")
    return os.path.join(base, os.path.basename(primary_output) + ".manifest.json")


if __name__ == "__main__":
    sys.exit(main())
