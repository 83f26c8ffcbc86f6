"""Sequence records, FASTA/label parsing, one-hot codecs, and dataset splits.

The residue alphabet is the 20 canonical amino acids plus a PAD symbol at the
last index. Records carrying any of the six non-standard letters
(U, J, Z, O, B, X) are legal FASTA but are removed by
:func:`filter_nonstandard` before training.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ShapeError, ValidationError

log = logging.getLogger(__name__)

CANONICAL_LETTERS = "ACDEFGHIKLMNPQRSTVWY"
PAD_SYMBOL = "-"
NONSTANDARD_LETTERS = frozenset("UJZOBX")


class Alphabet:
    """Ordered residue alphabet; PAD sits at the last index."""

    def __init__(self, letters=CANONICAL_LETTERS, pad=PAD_SYMBOL):
        if pad in letters or len(set(letters)) != len(letters):
            raise ValidationError("alphabet letters must be unique and exclude PAD")
        self.letters = letters
        self.pad = pad
        self.symbols = letters + pad
        self._index = {ch: i for i, ch in enumerate(self.symbols)}

    @property
    def size(self):
        return len(self.symbols)

    @property
    def pad_index(self):
        return len(self.letters)

    def index(self, ch):
        try:
            return self._index[ch]
        except KeyError:
            raise ValidationError(f"symbol {ch!r} is not in the alphabet") from None

    def symbol(self, i):
        return self.symbols[i]

    def __eq__(self, other):
        return isinstance(other, Alphabet) and self.symbols == other.symbols


DEFAULT_ALPHABET = Alphabet()


@dataclass
class SequenceRecord:
    id: str
    residues: str
    labels: np.ndarray | None = None
    description: str = ""

    def __eq__(self, other):
        if not isinstance(other, SequenceRecord):
            return NotImplemented
        if (self.labels is None) != (other.labels is None):
            return False
        labels_equal = self.labels is None or np.array_equal(self.labels, other.labels)
        return (
            self.id == other.id
            and self.residues == other.residues
            and labels_equal
        )


class LabelVocabulary:
    """Ordered annotation terms; the order fixes multi-hot positions."""

    def __init__(self, terms):
        terms = list(terms)
        if len(set(terms)) != len(terms):
            raise ParseError("vocabulary contains duplicate terms")
        if not terms:
            raise ParseError("vocabulary is empty")
        self.terms = tuple(terms)
        self._index = {t: i for i, t in enumerate(terms)}

    @property
    def size(self):
        return len(self.terms)

    def index(self, term):
        try:
            return self._index[term]
        except KeyError:
            raise ParseError(f"unknown annotation term {term!r}") from None

    @classmethod
    def from_text(cls, text):
        terms = [line.strip() for line in text.splitlines() if line.strip()]
        return cls(terms)

    def to_text(self):
        return "\n".join(self.terms) + "\n"

    def vector(self, terms):
        v = np.zeros(self.size, dtype=np.float32)
        for t in terms:
            v[self.index(t)] = 1.0
        return v

    def terms_of(self, vector):
        return [self.terms[i] for i in np.flatnonzero(np.asarray(vector) > 0.5)]


def parse_fasta(text, allow_gaps=False):
    """Parse FASTA text into records.

    Header lines start with '>'; the first whitespace-delimited token is the
    id, the rest is kept as the description. Errors name the offending line.
    Set ``allow_gaps`` for alignment input containing '-'.
    """
    records = []
    header = None
    desc = ""
    chunks = []
    header_line = 0

    def flush(line_no):
        if header is None:
            return
        seq = "".join(chunks)
        if not seq:
            raise ParseError(f"line {header_line}: record {header!r} has an empty sequence")
        records.append(SequenceRecord(id=header, residues=seq, description=desc))

    allowed = set("ABCDEFGHIJKLMNOPQRSTUVWXYZ")
    if allow_gaps:
        allowed.add("-")

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(">"):
            flush(line_no)
            head = line[1:].strip()
            if not head:
                raise ParseError(f"line {line_no}: empty FASTA header")
            parts = head.split(None, 1)
            header = parts[0]
            desc = parts[1] if len(parts) > 1 else ""
            header_line = line_no
            chunks = []
        else:
            if header is None:
                raise ParseError(f"line {line_no}: sequence data before the first header")
            seq = line.upper()
            for ch in seq:
                if ch not in allowed:
                    raise ParseError(f"line {line_no}: illegal character {ch!r}")
            chunks.append(seq)
    flush(-1)
    if not records:
        raise ParseError("no FASTA records found")
    return records


def write_fasta(records, width=60):
    out = []
    for rec in records:
        head = f">{rec.id}"
        if rec.description:
            head += f" {rec.description}"
        out.append(head)
        for i in range(0, len(rec.residues), width):
            out.append(rec.residues[i : i + width])
    return "\n".join(out) + "\n"


def parse_labels(text, vocab):
    """Parse a two-column TSV (id <TAB> term1;term2;...) into multi-hot vectors."""
    table = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if "\t" not in line:
            raise ParseError(f"line {line_no}: expected 'id<TAB>terms'")
        rid, terms_field = line.split("\t", 1)
        rid = rid.strip()
        if rid in table:
            raise ParseError(f"line {line_no}: duplicate id {rid!r}")
        terms = [t for t in terms_field.strip().split(";") if t]
        try:
            table[rid] = vocab.vector(terms)
        except ParseError as e:
            raise ParseError(f"line {line_no}: {e}") from None
    if not table:
        raise ParseError("no label rows found")
    return table


def filter_nonstandard(records):
    """Drop records containing U, J, Z, O, or B, or the wildcard X.

    Returns (kept, dropped_count); input order is preserved and the filter is
    idempotent.
    """
    kept = []
    dropped = 0
    for rec in records:
        if any(ch in NONSTANDARD_LETTERS for ch in rec.residues):
            dropped += 1
        else:
            kept.append(rec)
    return kept, dropped


@dataclass
class EncodedSequence:
    """L x A one-hot matrix plus the pre-padding length."""

    matrix: np.ndarray
    length: int


def encode_one_hot(residues, max_len, alphabet=DEFAULT_ALPHABET):
    """One-hot encode, PAD-padded to ``max_len``. Overlong input is an error."""
    if isinstance(residues, SequenceRecord):
        residues = residues.residues
    n = len(residues)
    if n > max_len:
        raise ShapeError(
            f"sequence length {n} exceeds the maximum length {max_len}; refusing to truncate"
        )
    mat = np.zeros((max_len, alphabet.size), dtype=np.float32)
    for i, ch in enumerate(residues):
        mat[i, alphabet.index(ch)] = 1.0
    if n < max_len:
        mat[n:, alphabet.pad_index] = 1.0
    return EncodedSequence(matrix=mat, length=n)


def decode(matrix, alphabet=DEFAULT_ALPHABET):
    """Per-row argmax decode; ties take the lowest index; stops at first PAD."""
    mat = np.asarray(matrix)
    if mat.ndim != 2 or mat.shape[1] != alphabet.size:
        raise ShapeError(f"expected an (L, {alphabet.size}) matrix, got {mat.shape}")
    idx = mat.argmax(axis=1)
    out = []
    for i in idx:
        if i == alphabet.pad_index:
            break
        out.append(alphabet.symbol(int(i)))
    return "".join(out)


@dataclass
class Dataset:
    records: list
    train_indices: list
    val_indices: list
    alphabet: Alphabet = field(default_factory=lambda: DEFAULT_ALPHABET)
    vocab: LabelVocabulary | None = None
    max_len: int = 256

    def train_records(self):
        return [self.records[i] for i in self.train_indices]

    def val_records(self):
        return [self.records[i] for i in self.val_indices]


def split_dataset(records, val_fraction, seed, alphabet=DEFAULT_ALPHABET, vocab=None, max_len=256):
    """Deterministic stratified split by exact label combination.

    The global validation count is round(n * val_fraction); per-stratum quotas
    come from largest-remainder apportionment, so per-label proportions hold
    within one record. Strata with fewer than two records are pooled and
    assigned by plain seeded randomness (with a warning).
    """
    if not 0.0 <= val_fraction < 1.0:
        raise ValidationError(f"val_fraction must be in [0, 1), got {val_fraction}")
    n = len(records)
    if n == 0:
        raise ValidationError("cannot split an empty record list")
    rng = np.random.Generator(np.random.PCG64(seed))

    strata = {}
    for i, rec in enumerate(records):
        key = b"" if rec.labels is None else np.asarray(rec.labels, dtype=np.uint8).tobytes()
        strata.setdefault(key, []).append(i)

    pooled = []
    regular = []
    for key in sorted(strata):
        members = strata[key]
        if len(members) < 2:
            pooled.extend(members)
        else:
            regular.append(members)
    if pooled:
        log.warning(
            "%d record(s) in singleton label strata; assigning them by global randomness",
            len(pooled),
        )
        regular.append(pooled)

    target = int(round(n * val_fraction))
    quotas = [len(members) * val_fraction for members in regular]
    base = [min(math.floor(q), len(m)) for q, m in zip(quotas, regular)]
    remainder = target - sum(base)
    order = sorted(
        range(len(regular)), key=lambda i: (base[i] - quotas[i], i)
    )  # largest fractional remainder first
    for i in order:
        if remainder <= 0:
            break
        if base[i] < len(regular[i]):
            base[i] += 1
            remainder -= 1

    val_idx = []
    for members, take in zip(regular, base):
        perm = rng.permutation(len(members))
        val_idx.extend(members[j] for j in perm[:take])
    val_set = set(val_idx)
    train_idx = [i for i in range(n) if i not in val_set]
    val_idx = sorted(val_set)

    assert len(train_idx) + len(val_idx) == n
    assert not set(train_idx) & val_set
    return Dataset(
        records=list(records),
        train_indices=train_idx,
        val_indices=val_idx,
        alphabet=alphabet,
        vocab=vocab,
        max_len=max_len,
    )
