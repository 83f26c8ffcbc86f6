"""Evaluation battery for generated sequence sets.

Distributional similarity is measured with a Gaussian-kernel maximum mean
discrepancy over k-mer spectrum features, conditional consistency with the
mean reciprocal rank of the true label under ascending MMD, and diversity
with two deltas between the generated and real sets: average per-dimension
histogram entropy and average within-set pairwise RKHS distance. Alignment
conservation (per-column Shannon entropy) and global alignment identity
operate on residue strings directly. Feature rows can be exported as TSV
for external projection tools.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError
from .optim import new_rng
from .seqdata import CANONICAL_LETTERS, PAD_SYMBOL

log = logging.getLogger(__name__)

_LETTER_INDEX = {ch: i for i, ch in enumerate(CANONICAL_LETTERS)}
N_LETTERS = len(CANONICAL_LETTERS)


@dataclass(frozen=True)
class KernelConfig:
    """Gaussian kernel settings shared by the MMD family of metrics.

    ``bandwidth=None`` means the median heuristic: sigma is the median
    pairwise Euclidean distance over the pooled rows of both sets,
    recomputed for every comparison.
    """

    bandwidth: float | None = None
    k: int = 3

    def __post_init__(self):
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValidationError(
                f"kernel bandwidth must be positive, got {self.bandwidth}"
            )
        if self.k < 1:
            raise ValidationError(f"k-mer size must be >= 1, got {self.k}")


def kmer_features(residues, k=3):
    """L2-normalized k-mer count vector of dimension 20**k.

    Counts every length-k window over the canonical letters. A sequence
    shorter than k yields the zero vector (logged, not an error).
    """
    if k < 1:
        raise ValidationError(f"k-mer size must be >= 1, got {k}")
    counts = np.zeros(N_LETTERS**k, dtype=np.float64)
    if len(residues) < k:
        log.warning(
            "sequence of length %d is shorter than k=%d, features are zero",
            len(residues),
            k,
        )
        return counts
    try:
        codes = np.array([_LETTER_INDEX[ch] for ch in residues], dtype=np.int64)
    except KeyError as e:
        raise ValidationError(
            f"residue {e.args[0]!r} is outside the canonical alphabet"
        ) from None
    powers = N_LETTERS ** np.arange(k - 1, -1, -1, dtype=np.int64)
    idx = np.lib.stride_tricks.sliding_window_view(codes, k) @ powers
    np.add.at(counts, idx, 1.0)
    return counts / np.linalg.norm(counts)


def kmer_feature_matrix(sequences, k=3):
    """Stack kmer_features over an iterable of residue strings."""
    rows = [kmer_features(s, k) for s in sequences]
    if not rows:
        raise ValidationError("cannot build features for an empty sequence set")
    return np.stack(rows)


def kmer_names(k=3):
    """Column names matching the kmer_features index order."""
    return ["".join(t) for t in itertools.product(CANONICAL_LETTERS, repeat=k)]


def _as_points(obj, name):
    arr = np.asarray(obj, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(
            f"{name} set must be a stack of equal-width feature vectors, "
            f"got ndim={arr.ndim}"
        )
    if arr.shape[0] == 0:
        raise ValidationError(f"{name} set is empty")
    return arr


def _check_widths(a, b, name_a, name_b):
    if a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"feature widths differ: {name_a} has {a.shape[1]}, "
            f"{name_b} has {b.shape[1]}"
        )


def _pairwise_sq_dists(points):
    """Squared Euclidean distances between all rows.

    Distances are computed once per distinct row pair and gathered back, so
    bitwise-equal rows get exactly zero and repeated rows cannot pick up
    rounding residue from the dot-product expansion.
    """
    seen = {}
    ids = np.empty(points.shape[0], dtype=np.intp)
    uniq = []
    for i, row in enumerate(points):
        key = row.tobytes()
        gid = seen.get(key)
        if gid is None:
            gid = len(uniq)
            seen[key] = gid
            uniq.append(row)
        ids[i] = gid
    u = np.stack(uniq)
    gram = u @ u.T
    sq = np.diag(gram).copy()
    d2 = sq[:, None] + sq[None, :] - 2.0 * gram
    d2 = np.maximum(d2, d2.T)  # BLAS output is not guaranteed bitwise symmetric
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2[ids[:, None], ids[None, :]]


def _median_bandwidth(d2):
    iu = np.triu_indices(d2.shape[0], k=1)
    if iu[0].size == 0:
        return 1.0
    med = float(np.median(np.sqrt(d2[iu])))
    return med if med > 0.0 else 1.0


def _canonical_pair(a, b):
    # the estimator is symmetric; a fixed operand order makes mmd(x, y)
    # and mmd(y, x) the same float computation
    if a.shape[0] != b.shape[0]:
        return (a, b) if a.shape[0] < b.shape[0] else (b, a)
    return (a, b) if a.tobytes() <= b.tobytes() else (b, a)


def mmd(set1, set2, kernel=None):
    """Biased (V-statistic) Gaussian-kernel maximum mean discrepancy.

    MMD = sqrt(mean k(a,a') + mean k(b,b') - 2 mean k(a,b)) with
    k(x,y) = exp(-|x-y|^2 / (2 sigma^2)). Identical sets give exactly 0;
    the squared statistic is clamped at 0 before the root.
    """
    kernel = kernel or KernelConfig()
    a = _as_points(set1, "first")
    b = _as_points(set2, "second")
    _check_widths(a, b, "first set", "second set")
    a, b = _canonical_pair(a, b)
    d2 = _pairwise_sq_dists(np.vstack([a, b]))
    sigma = kernel.bandwidth or _median_bandwidth(d2)
    km = np.exp(d2 / (-2.0 * sigma * sigma))
    n = a.shape[0]
    m_aa = km[:n, :n].mean()
    m_bb = km[n:, n:].mean()
    m_ab = km[:n, n:].mean()
    return math.sqrt(max(m_aa + m_bb - 2.0 * m_ab, 0.0))


def _mmd_matrix(gen_sets, real_sets, kernel):
    labels = list(gen_sets.keys())
    if set(real_sets.keys()) != set(labels):
        only_gen = sorted(set(labels) - set(real_sets))
        only_real = sorted(set(real_sets) - set(labels))
        raise ValidationError(
            f"label keys differ between the generated and real maps "
            f"(generated only: {only_gen}, real only: {only_real})"
        )
    if len(labels) < 2:
        raise ValidationError(f"ranking needs at least 2 labels, got {len(labels)}")
    matrix = np.empty((len(labels), len(labels)), dtype=np.float64)
    for i, c in enumerate(labels):
        for j, c2 in enumerate(labels):
            matrix[i, j] = mmd(gen_sets[c], real_sets[c2], kernel)
    return labels, matrix


def _rank_of(row, true_pos):
    """1-based rank of true_pos under ascending score, ties by position."""
    order = sorted(range(row.size), key=lambda p: (row[p], p))
    return order.index(true_pos) + 1


def mrr(gen_sets, real_sets, kernel=None):
    """Mean reciprocal rank of the true label under ascending MMD.

    For each label c every candidate c2 is scored by
    mmd(gen_sets[c], real_sets[c2]); candidates sort ascending, ties broken
    by the gen_sets key order. Returns the mean of 1/rank(c), in [1/C, 1].
    """
    labels, matrix = _mmd_matrix(gen_sets, real_sets, kernel)
    total = sum(1.0 / _rank_of(matrix[i], i) for i in range(len(labels)))
    return total / len(labels)


def _avg_histogram_entropy(points, bins):
    total = 0.0
    for d in range(points.shape[1]):
        counts, _ = np.histogram(points[:, d], bins=bins)
        p = counts[counts > 0] / counts.sum()
        total += float(-(p * np.log2(p)).sum())
    return total / points.shape[1]


def diversity_entropy(gen, real, bins=10):
    """Signed feature-diversity delta, generated minus real.

    Each set's diversity is the Shannon entropy (bits) of a 10-bin histogram
    per feature dimension, averaged over dimensions; bin edges span each
    set's own per-dimension value range. Collapsed generated sets therefore
    come out negative against a spread real set.
    """
    g = _as_points(gen, "generated")
    r = _as_points(real, "real")
    _check_widths(g, r, "generated set", "real set")
    return _avg_histogram_entropy(g, bins) - _avg_histogram_entropy(r, bins)


def _mean_within_rkhs(km_block):
    iu = np.triu_indices(km_block.shape[0], k=1)
    dist = np.sqrt(np.maximum(2.0 - 2.0 * km_block[iu], 0.0))
    return float(dist.mean())


def diversity_distance(gen, real, kernel=None):
    """Absolute delta of the mean within-set pairwise RKHS distance.

    The RKHS distance of a pair is sqrt(k(x,x) + k(y,y) - 2 k(x,y)); both
    sets are measured under one kernel whose bandwidth (unless fixed) is the
    median heuristic over the pooled rows. Each set needs >= 2 members.
    """
    kernel = kernel or KernelConfig()
    g = _as_points(gen, "generated")
    r = _as_points(real, "real")
    _check_widths(g, r, "generated set", "real set")
    for name, arr in (("generated", g), ("real", r)):
        if arr.shape[0] < 2:
            raise ValidationError(
                f"{name} set needs at least 2 members for pairwise distances, "
                f"got {arr.shape[0]}"
            )
    d2 = _pairwise_sq_dists(np.vstack([g, r]))
    sigma = kernel.bandwidth or _median_bandwidth(d2)
    km = np.exp(d2 / (-2.0 * sigma * sigma))
    n = g.shape[0]
    return abs(_mean_within_rkhs(km[:n, :n]) - _mean_within_rkhs(km[n:, n:]))


_ALIGNMENT_SYMBOLS = frozenset(CANONICAL_LETTERS) | {PAD_SYMBOL}


def column_entropy(rows):
    """Per-column Shannon entropy (bits) of an alignment, gaps excluded.

    Returns (entropies, all_gap): a float array over columns and a boolean
    mask marking columns that hold only gap characters. All-gap columns
    carry entropy 0. Rows must agree in length; ragged input is an error.
    """
    rows = list(rows)
    if len(rows) < 2:
        raise ValidationError(f"alignment needs at least 2 rows, got {len(rows)}")
    width = len(rows[0])
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ValidationError(
                f"alignment is ragged: row {i} has length {len(row)}, "
                f"expected {width}"
            )
        for ch in row:
            if ch not in _ALIGNMENT_SYMBOLS:
                raise ValidationError(f"row {i}: illegal alignment symbol {ch!r}")
    entropies = np.zeros(width, dtype=np.float64)
    all_gap = np.zeros(width, dtype=bool)
    for j in range(width):
        column = [row[j] for row in rows if row[j] != PAD_SYMBOL]
        if not column:
            all_gap[j] = True
            continue
        counts = np.array(list(Counter(column).values()), dtype=np.float64)
        p = counts / counts.sum()
        entropies[j] = float(-(p * np.log2(p)).sum())
    return entropies, all_gap


def _needleman_wunsch(a, b):
    """Global alignment with match=1, mismatch=0, gap=-1.

    Returns (matches, alignment_length) for the high-road optimum: traceback
    ties resolve diagonal first, then up, then left. The inner maximum over
    the left neighbour is folded into a running prefix maximum so each row
    fills in one vectorized pass.
    """
    n, m = a.size, b.size
    f = np.empty((n + 1, m + 1), dtype=np.int32)
    f[0] = -np.arange(m + 1, dtype=np.int32)
    f[1:, 0] = -np.arange(1, n + 1, dtype=np.int32)
    cols = np.arange(1, m + 1, dtype=np.int32)
    for i in range(1, n + 1):
        sub = (b == a[i - 1]).astype(np.int32)
        best = np.maximum(f[i - 1, :-1] + sub, f[i - 1, 1:] - 1)
        g = np.maximum.accumulate(np.concatenate(([f[i, 0]], best + cols)))
        f[i, 1:] = g[1:] - cols
    i, j = n, m
    matches = 0
    length = 0
    while i > 0 or j > 0:
        length += 1
        if i > 0 and j > 0 and f[i, j] == f[i - 1, j - 1] + (a[i - 1] == b[j - 1]):
            matches += int(a[i - 1] == b[j - 1])
            i -= 1
            j -= 1
        elif i > 0 and f[i, j] == f[i - 1, j] - 1:
            i -= 1
        else:
            j -= 1
    return matches, length


def _residue_codes(s, name):
    if not s:
        raise ValidationError(f"{name} is empty, cannot align")
    for ch in s:
        if ch not in _LETTER_INDEX:
            raise ValidationError(
                f"{name} contains {ch!r}, outside the canonical alphabet"
            )
    return np.frombuffer(s.encode("ascii"), dtype=np.uint8)


def pairwise_identity(s1, s2):
    """Percent identity under deterministic global alignment.

    identity = 100 * matches / alignment_length for the high-road
    Needleman-Wunsch optimum (match=1, mismatch=0, gap=-1). Always in
    [0, 100]; symmetric in its arguments.
    """
    a = _residue_codes(s1, "first sequence")
    b = _residue_codes(s2, "second sequence")
    matches, length = _needleman_wunsch(a, b)
    return 100.0 * matches / length


def nearest_identity(queries, pool, k=3, candidates=25):
    """Best alignment identity of each query against a pool of sequences.

    Pool members are prefiltered by k-mer cosine similarity and only the
    top ``candidates`` are aligned exactly, so with a truncated candidate
    list the result is a lower bound on the true nearest identity.
    ``candidates=None`` aligns against the whole pool. Returns one value
    per query.
    """
    queries = list(queries)
    pool = list(pool)
    if not queries:
        raise ValidationError("no query sequences")
    if not pool:
        raise ValidationError("no pool sequences")
    if candidates is not None and candidates < 1:
        raise ValidationError(f"candidates must be >= 1, got {candidates}")
    if candidates is None or candidates >= len(pool):
        top = np.tile(np.arange(len(pool)), (len(queries), 1))
    else:
        q = kmer_feature_matrix(queries, k)
        p = kmer_feature_matrix(pool, k)
        sims = q @ p.T
        top = np.argpartition(-sims, candidates - 1, axis=1)[:, :candidates]
    best = np.empty(len(queries), dtype=np.float64)
    for qi, query in enumerate(queries):
        best[qi] = max(pairwise_identity(query, pool[int(pi)]) for pi in top[qi])
    return best


def export_features(records, k=3, encoder=None, vocab=None):
    """Plot-ready TSV: one row per record with id, labels, feature values.

    Features are k-mer spectra by default, or encoder representations when
    a model is supplied. Values are float32 rendered with 9 significant
    digits, which a re-parse reproduces bit-exactly. The label column joins
    active terms with ';' (term names when a vocabulary is given, otherwise
    label indices; empty for unlabeled records).
    """
    records = list(records)
    if encoder is None:
        names = kmer_names(k)
        feats = [kmer_features(rec.residues, k) for rec in records]
    else:
        from .seqdata import encode_one_hot

        names = [f"r{i}" for i in range(encoder.cfg.rep_dim)]
        feats = []
        for start in range(0, len(records), 64):
            chunk = records[start : start + 64]
            x = np.stack(
                [encode_one_hot(r.residues, encoder.cfg.max_len).matrix for r in chunk]
            )
            _, rep = encoder.forward(x)
            feats.extend(rep.data)
    lines = ["\t".join(["id", "labels"] + names)]
    for rec, vec in zip(records, feats):
        if rec.labels is None:
            label_str = ""
        elif vocab is not None:
            label_str = ";".join(vocab.terms_of(rec.labels))
        else:
            label_str = ";".join(str(i) for i in np.flatnonzero(rec.labels > 0.5))
        values = np.asarray(vec, dtype=np.float32)
        lines.append(
            "\t".join([rec.id, label_str] + ["%.9g" % v for v in values])
        )
    return "\n".join(lines) + "\n"


@dataclass
class EvalReport:
    """Evaluation battery results with a fixed serialization order."""

    mmd: float
    mrr: float
    entropy_delta: float
    distance_delta: float
    per_label: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("mmd", "mrr", "entropy_delta", "distance_delta"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValidationError(f"report field {name} is not finite: {value}")
        if not 0.0 < self.mrr <= 1.0:
            raise ValidationError(f"mrr must lie in (0, 1], got {self.mrr}")

    def as_dict(self):
        return {
            "mmd": self.mmd,
            "mrr": self.mrr,
            "entropy_delta": self.entropy_delta,
            "distance_delta": self.distance_delta,
            "per_label": self.per_label,
            "metadata": self.metadata,
        }


def _grouped_residues(records, vocab, which):
    groups = {term: [] for term in vocab.terms}
    for rec in records:
        if rec.labels is None:
            raise ValidationError(f"{which} record {rec.id!r} has no labels")
        for term in vocab.terms_of(rec.labels):
            groups[term].append(rec.residues)
    return groups


def _uniform_like(sequences, rng):
    letters = np.frombuffer(CANONICAL_LETTERS.encode("ascii"), dtype=np.uint8)
    out = []
    for s in sequences:
        draw = rng.integers(0, N_LETTERS, size=len(s))
        out.append(letters[draw].tobytes().decode("ascii"))
    return out


def evaluation_report(
    real_records,
    gen_records,
    vocab,
    kernel=None,
    bins=10,
    nearest=False,
    nearest_candidates=25,
    uniform_seed=0,
):
    """Assemble the full evaluation battery into an EvalReport.

    Global MMD, entropy delta and distance delta compare the complete
    generated and real sets; MRR and the per-label breakdown run over every
    vocabulary term that is populated on both sides (at least two such
    terms are required). Each label entry carries its own MMD, its MMD to
    every candidate label, its retrieval rank, and the MMD of an equally
    sized uniform-random baseline; ``nearest=True`` adds the mean identity
    of each generated sequence to its nearest real sequence of that label.
    """
    kernel = kernel or KernelConfig()
    real_records = list(real_records)
    gen_records = list(gen_records)
    real_groups = _grouped_residues(real_records, vocab, "real")
    gen_groups = _grouped_residues(gen_records, vocab, "generated")
    labels = [t for t in vocab.terms if real_groups[t] and gen_groups[t]]
    if len(labels) < 2:
        raise ValidationError(
            f"evaluation needs at least 2 labels populated on both sides, "
            f"got {len(labels)}"
        )
    real_feats = {t: kmer_feature_matrix(real_groups[t], kernel.k) for t in labels}
    gen_feats = {t: kmer_feature_matrix(gen_groups[t], kernel.k) for t in labels}
    all_real = kmer_feature_matrix([r.residues for r in real_records], kernel.k)
    all_gen = kmer_feature_matrix([r.residues for r in gen_records], kernel.k)

    _, matrix = _mmd_matrix(gen_feats, real_feats, kernel)
    rng = new_rng(uniform_seed)
    per_label = {}
    reciprocal = 0.0
    for i, term in enumerate(labels):
        rank = _rank_of(matrix[i], i)
        reciprocal += 1.0 / rank
        baseline = kmer_feature_matrix(
            _uniform_like(gen_groups[term], rng), kernel.k
        )
        entry = {
            "n_real": len(real_groups[term]),
            "n_gen": len(gen_groups[term]),
            "mmd": float(matrix[i, i]),
            "rank": rank,
            "mmd_to": {c2: float(matrix[i, j]) for j, c2 in enumerate(labels)},
            "mmd_uniform": mmd(baseline, real_feats[term], kernel),
        }
        if nearest:
            ident = nearest_identity(
                gen_groups[term],
                real_groups[term],
                k=kernel.k,
                candidates=nearest_candidates,
            )
            entry["nearest_identity"] = float(ident.mean())
        per_label[term] = entry

    metadata = {
        "k": kernel.k,
        "bandwidth": "median" if kernel.bandwidth is None else kernel.bandwidth,
        "bins": bins,
        "n_real": len(real_records),
        "n_gen": len(gen_records),
        "labels": labels,
        "uniform_seed": uniform_seed,
    }
    if nearest:
        metadata["nearest_candidates"] = nearest_candidates
    return EvalReport(
        mmd=mmd(all_gen, all_real, kernel),
        mrr=reciprocal / len(labels),
        entropy_delta=diversity_entropy(all_gen, all_real, bins=bins),
        distance_delta=diversity_distance(all_gen, all_real, kernel),
        per_label=per_label,
        metadata=metadata,
    )
