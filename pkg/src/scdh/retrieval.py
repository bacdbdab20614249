"""Bit-packed Hamming retrieval and ranking metrics.

Codes are packed LSB-first into little-endian 64-bit words (bit i of a code
lives in word i // 64 at bit position i % 64), with unused high bits of the
last word forced to zero so equal codes are byte-identical.  Search is a
linear scan over XOR + popcount with deterministic (distance, id) ordering.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, ParseError, PreconditionError

WORD_BITS = 64

CODE_MAGIC = b"SCDH"
CODE_VERSION = 1


def _n_words(nbits: int) -> int:
    return (nbits + WORD_BITS - 1) // WORD_BITS


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean (..., r) array into (..., ceil(r/64)) uint64 words."""
    bits = np.asarray(bits, dtype=bool)
    r = bits.shape[-1]
    W = _n_words(r)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    pad = W * 8 - packed.shape[-1]
    if pad:
        packed = np.concatenate(
            [packed, np.zeros(bits.shape[:-1] + (pad,), dtype=np.uint8)], axis=-1
        )
    return packed.view("<u8").reshape(bits.shape[:-1] + (W,))


def unpack_bits(words: np.ndarray, nbits: int) -> np.ndarray:
    """Inverse of pack_bits; returns a boolean (..., nbits) array."""
    words = np.asarray(words, dtype="<u8")
    as_bytes = words.view(np.uint8).reshape(words.shape[:-1] + (words.shape[-1] * 8,))
    bits = np.unpackbits(as_bytes, axis=-1, bitorder="little")
    return bits[..., :nbits].astype(bool)


@dataclass(frozen=True)
class HashCode:
    """An r-bit binary code in canonical packed form."""

    words: np.ndarray  # (W,) uint64
    nbits: int

    def __post_init__(self):
        words = np.ascontiguousarray(self.words, dtype="<u8")
        if words.shape != (_n_words(self.nbits),):
            raise DimensionMismatch(
                f"expected {_n_words(self.nbits)} words for {self.nbits} bits"
            )
        tail = self.nbits % WORD_BITS
        if tail and int(words[-1]) >> tail:
            raise PreconditionError("unused high bits of the last word must be zero")
        object.__setattr__(self, "words", words)

    def bits(self) -> np.ndarray:
        return unpack_bits(self.words, self.nbits)


def binarize(f) -> HashCode:
    """Sign-threshold an embedding: bit i set iff f_i >= 0 (sign(0) := +1)."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 1:
        raise DimensionMismatch("binarize expects a single embedding vector")
    return HashCode(pack_bits(f >= 0.0), f.shape[0])


def binarize_batch(F) -> np.ndarray:
    """Pack a (n, r) embedding matrix into (n, W) code words."""
    F = np.asarray(F, dtype=np.float64)
    return pack_bits(F >= 0.0)


def hamming(a: HashCode, b: HashCode) -> int:
    """Number of differing bit positions between two equal-length codes."""
    if a.nbits != b.nbits:
        raise DimensionMismatch(f"code lengths differ: {a.nbits} vs {b.nbits}")
    return int(np.bitwise_count(a.words ^ b.words).sum())


@dataclass
class CodeIndex:
    """Immutable parallel arrays of codes, ids, and optional label sets."""

    words: np.ndarray        # (n, W) uint64
    ids: np.ndarray          # (n,) int64
    nbits: int
    labelsets: tuple | None = None   # length n of frozensets, or None

    def __post_init__(self):
        self.words = np.ascontiguousarray(self.words, dtype="<u8")
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.words.ndim != 2 or self.words.shape[1] != _n_words(self.nbits):
            raise DimensionMismatch("words shape does not match nbits")
        if self.ids.shape != (self.words.shape[0],):
            raise DimensionMismatch("ids and codes must be parallel arrays")
        if self.labelsets is not None and len(self.labelsets) != len(self.ids):
            raise DimensionMismatch("labelsets and codes must be parallel arrays")

    @property
    def n(self) -> int:
        return self.words.shape[0]

    @classmethod
    def from_embeddings(cls, F, ids, labelsets=None) -> "CodeIndex":
        F = np.asarray(F, dtype=np.float64)
        return cls(binarize_batch(F), np.asarray(ids, dtype=np.int64), F.shape[1],
                   tuple(labelsets) if labelsets is not None else None)

    def label_masks(self, C: int) -> np.ndarray:
        """Label sets as (n, ceil(C/64)) uint64 bitmasks for fast overlap tests."""
        if self.labelsets is None:
            raise PreconditionError("index carries no label sets")
        Wc = _n_words(C)
        masks = np.zeros((self.n, Wc), dtype=np.uint64)
        for i, Y in enumerate(self.labelsets):
            for l in Y:
                masks[i, l // WORD_BITS] |= np.uint64(1) << np.uint64(l % WORD_BITS)
        return masks


def distances_to_index(query_words: np.ndarray, index: CodeIndex) -> np.ndarray:
    """Hamming distances from one packed query to every index entry."""
    return np.bitwise_count(index.words ^ query_words[None, :]).sum(axis=1).astype(np.int64)


def search(query: HashCode, index: CodeIndex, k: int) -> list[tuple[int, int]]:
    """k nearest codes by Hamming distance, ties broken by ascending id."""
    if index.n == 0:
        raise PreconditionError("cannot search an empty index")
    if query.nbits != index.nbits:
        raise DimensionMismatch(f"query has {query.nbits} bits, index {index.nbits}")
    if k > index.n:
        raise PreconditionError(f"k={k} exceeds index size {index.n}")
    dists = distances_to_index(query.words, index)
    order = np.lexsort((index.ids, dists))[:k]
    return [(int(index.ids[i]), int(dists[i])) for i in order]


def _require_labels(queries: CodeIndex, index: CodeIndex) -> int:
    if queries.labelsets is None or index.labelsets is None:
        raise PreconditionError("metrics require label sets on both sides")
    C = 0
    for Y in queries.labelsets + index.labelsets:
        if Y:
            C = max(C, max(Y) + 1)
    return max(C, 1)


def _relevance_and_order(queries: CodeIndex, index: CodeIndex):
    """Yield per query the relevance vector in ranked (distance, id) order."""
    C = _require_labels(queries, index)
    qm = queries.label_masks(C)
    dm = index.label_masks(C)
    for qi in range(queries.n):
        dists = distances_to_index(queries.words[qi], index)
        order = np.lexsort((index.ids, dists))
        relevant = (dm & qm[qi][None, :]).any(axis=1)
        yield relevant[order], dists[order]


def mean_average_precision(queries: CodeIndex, index: CodeIndex,
                           k: int | None = None) -> float:
    """MAP over queries; relevance is sharing at least one label.

    Untruncated AP divides by the number of relevant database items; when
    truncated at k it divides by min(k, #relevant).  Queries with no relevant
    item anywhere in the database are excluded from the mean.
    """
    aps = []
    for relevant, _ in _relevance_and_order(queries, index):
        total_rel = int(relevant.sum())
        if total_rel == 0:
            continue
        ranked = relevant[:k] if k is not None else relevant
        denom = min(k, total_rel) if k is not None else total_rel
        cum = np.cumsum(ranked)
        positions = np.nonzero(ranked)[0] + 1
        ap = float((cum[positions - 1] / positions).sum() / denom)
        aps.append(ap)
    if not aps:
        raise PreconditionError("no query has a relevant database item")
    return float(np.mean(aps))


def precision_at_radius(queries: CodeIndex, index: CodeIndex, radius: int = 2,
                        empty_ball: str = "zero") -> float:
    """Mean fraction of relevant items among those within the Hamming ball.

    Queries whose ball is empty contribute 0 by default (``empty_ball="zero"``,
    penalising codes that isolate queries) or can be skipped entirely
    (``empty_ball="skip"``).
    """
    if empty_ball not in ("zero", "skip"):
        raise ValueError("empty_ball must be 'zero' or 'skip'")
    precisions = []
    for relevant, dists in _relevance_and_order(queries, index):
        inside = dists <= radius
        m = int(inside.sum())
        if m == 0:
            if empty_ball == "zero":
                precisions.append(0.0)
            continue
        precisions.append(float(relevant[inside].sum()) / m)
    if not precisions:
        raise PreconditionError("all query balls are empty and empty_ball='skip'")
    return float(np.mean(precisions))


def topk_precision_curve(queries: CodeIndex, index: CodeIndex,
                         ks: Sequence[int]) -> list[tuple[int, float]]:
    """Mean precision among the top-k ranked items, for each k (ascending)."""
    ks = [int(k) for k in ks]
    if ks != sorted(ks):
        raise PreconditionError("ks must be ascending")
    if ks and ks[-1] > index.n:
        raise PreconditionError("k exceeds index size")
    sums = np.zeros(len(ks))
    count = 0
    for relevant, _ in _relevance_and_order(queries, index):
        cum = np.cumsum(relevant)
        for j, k in enumerate(ks):
            sums[j] += cum[k - 1] / k
        count += 1
    return [(k, float(s / count)) for k, s in zip(ks, sums)]


@dataclass
class RetrievalMetrics:
    """Bundle of the standard evaluation numbers."""

    map: float
    map_at_k: float | None
    k: int | None
    precision_at_radius2: float
    topk_curve: list[tuple[int, float]]

    def to_dict(self) -> dict:
        return {
            "map": self.map,
            "map_at_k": self.map_at_k,
            "k": self.k,
            "precision_at_radius2": self.precision_at_radius2,
            "topk_curve": [[k, p] for k, p in self.topk_curve],
        }


def evaluate(queries: CodeIndex, index: CodeIndex, k: int | None = None,
             radius: int = 2, ks: Sequence[int] = ()) -> RetrievalMetrics:
    """Compute the full metric bundle in one pass configuration."""
    return RetrievalMetrics(
        map=mean_average_precision(queries, index),
        map_at_k=mean_average_precision(queries, index, k=k) if k else None,
        k=k,
        precision_at_radius2=precision_at_radius(queries, index, radius=radius),
        topk_curve=topk_precision_curve(queries, index, ks) if ks else [],
    )


# ---------------------------------------------------------------------------
# Code file format: magic "SCDH", version u16, r u32, n u64,
# then n records of (id u64, ceil(r/64) little-endian u64 words).
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sHIQ")


def save_codes(index: CodeIndex, path):
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CODE_MAGIC, CODE_VERSION, index.nbits, index.n))
        W = index.words.shape[1]
        rec = np.empty((index.n, W + 1), dtype="<u8")
        rec[:, 0] = index.ids.astype(np.uint64)
        rec[:, 1:] = index.words
        fh.write(rec.tobytes())


def load_codes(path) -> CodeIndex:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise ParseError(
            f"truncated header: expected {_HEADER.size} bytes, got {len(blob)}"
        )
    magic, version, nbits, n = _HEADER.unpack_from(blob, 0)
    if magic != CODE_MAGIC:
        raise ParseError(f"bad magic {magic!r} at offset 0")
    if version != CODE_VERSION:
        raise ParseError(f"unsupported code file version {version}")
    W = _n_words(nbits)
    expected = _HEADER.size + n * (W + 1) * 8
    if len(blob) != expected:
        raise ParseError(
            f"expected {expected} bytes for n={n}, r={nbits}, got {len(blob)}"
        )
    rec = np.frombuffer(blob, dtype="<u8", offset=_HEADER.size).reshape(n, W + 1)
    tail = nbits % WORD_BITS
    words = np.ascontiguousarray(rec[:, 1:])
    if tail and np.any(words[:, -1] >> np.uint64(tail)):
        raise ParseError("non-canonical padding bits in code records")
    return CodeIndex(words, rec[:, 0].astype(np.int64), nbits)
