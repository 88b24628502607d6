"""Bit-packed binary codes, Hamming distance and attribute recovery.

Bit ``i`` of a k-bit code lives in word ``i // 64`` at bit position
``i % 64`` (bit 0 is the least significant bit of word 0). Padding bits
above ``k`` are always zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .dataset import Sample
from .errors import FormatError, ShapeError
from .model import DphModel, forward

INDEX_MAGIC = b"DPHIDX1\0"
THRESHOLD = 0.5


def num_words(k: int) -> int:
    return (k + 63) // 64


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a (..., k) 0/1 array into (..., ceil(k/64)) little-endian uint64 words."""
    bits = np.asarray(bits).astype(bool)
    k = bits.shape[-1]
    pad = num_words(k) * 64 - k
    if pad:
        bits = np.concatenate([bits, np.zeros(bits.shape[:-1] + (pad,), dtype=bool)], axis=-1)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64)


def unpack_bits(words: np.ndarray, k: int) -> np.ndarray:
    words = np.ascontiguousarray(np.asarray(words, dtype="<u8"))
    as_bytes = words.view(np.uint8)
    return np.unpackbits(as_bytes, axis=-1, bitorder="little")[..., :k]


@dataclass(frozen=True, eq=False)
class BinaryCode:
    k: int
    words: np.ndarray

    def __post_init__(self):
        words = np.array(self.words, dtype=np.uint64).reshape(-1)
        if words.size != num_words(self.k):
            raise ShapeError(f"k={self.k} needs {num_words(self.k)} words, got {words.size}")
        if self.k % 64 and int(words[-1]) >> (self.k % 64):
            raise ShapeError(f"padding bits above k={self.k} must be zero")
        words.setflags(write=False)
        object.__setattr__(self, "words", words)

    @classmethod
    def from_bits(cls, bits) -> "BinaryCode":
        bits = np.asarray(bits).reshape(-1)
        return cls(bits.size, pack_bits(bits))

    def bits(self) -> np.ndarray:
        return unpack_bits(self.words, self.k)

    def __eq__(self, other):
        if not isinstance(other, BinaryCode):
            return NotImplemented
        return self.k == other.k and np.array_equal(self.words, other.words)

    def __hash__(self):
        return hash((self.k, self.words.tobytes()))

    def __repr__(self):
        return f"BinaryCode(k={self.k}, bits={''.join(map(str, self.bits()))})"


def quantize(binary_like) -> BinaryCode:
    """Threshold code-layer outputs at 0.5 (inclusive) into a packed code."""
    b = np.asarray(binary_like, dtype=np.float64).reshape(-1)
    return BinaryCode(b.size, pack_bits(b >= THRESHOLD))


def quantize_batch(binary_like: np.ndarray) -> np.ndarray:
    return pack_bits(np.asarray(binary_like) >= THRESHOLD)


def encode(model: DphModel, features) -> BinaryCode:
    acts = forward(model, np.asarray(features, dtype=np.float64).reshape(-1))
    return quantize(acts.binary_like)


def encode_batch(model: DphModel, features: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return quantize_batch(forward(model, X).binary_like)


def hamming(a: BinaryCode, b: BinaryCode) -> int:
    if a.k != b.k:
        raise ShapeError(f"code lengths differ: {a.k} vs {b.k}")
    return int(np.bitwise_count(a.words ^ b.words).sum())


def hamming_to_all(query_words: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Distances from one packed code (W,) to every row of (N, W)."""
    return np.bitwise_count(codes ^ query_words[None, :]).sum(axis=1, dtype=np.int64)


def _attr_logits(bits: np.ndarray, attr_weights: np.ndarray, attr_biases: np.ndarray) -> np.ndarray:
    # Accumulate rows of set bits in ascending bit order; unset bits add an exact 0.0.
    bits = np.atleast_2d(bits).astype(bool)
    acc = np.zeros((bits.shape[0], attr_weights.shape[1]))
    for i in range(bits.shape[1]):
        acc += np.where(bits[:, i, None], attr_weights[i], 0.0)
    return acc + attr_biases


def recover_attributes(code: BinaryCode, attr_weights, attr_biases) -> np.ndarray:
    W = np.asarray(attr_weights, dtype=np.float64)
    b = np.asarray(attr_biases, dtype=np.float64)
    if W.shape != (code.k, b.size):
        raise ShapeError(f"attribute weights {W.shape} do not match k={code.k}, m={b.size}")
    return expit(_attr_logits(code.bits(), W, b))[0]


class RetrievalIndex:
    """Immutable database of packed codes plus the attribute head needed to recover scores."""

    def __init__(self, k: int, ids, words, attr_weights, attr_biases):
        ids = np.array(ids, dtype=np.int64).reshape(-1)
        words = np.array(words, dtype=np.uint64).reshape(len(ids), num_words(k))
        W = np.array(attr_weights, dtype=np.float64)
        b = np.array(attr_biases, dtype=np.float64).reshape(-1)
        if W.shape != (k, b.size):
            raise ShapeError(f"attribute weights {W.shape} do not match k={k}, m={b.size}")
        if np.any(ids < 0):
            raise ShapeError("sample ids must be nonnegative")
        if len(np.unique(ids)) != len(ids):
            raise ShapeError("sample ids must be unique")
        if k % 64 and len(ids) and np.any(words[:, -1] >> np.uint64(k % 64)):
            raise ShapeError(f"padding bits above k={k} must be zero")
        scores = expit(_attr_logits(unpack_bits(words, k), W, b)) if len(ids) else np.zeros((0, b.size))
        for arr in (ids, words, W, b, scores):
            arr.setflags(write=False)
        self.k = k
        self.ids = ids
        self.words = words
        self.attr_weights = W
        self.attr_biases = b
        self.attr_scores = scores
        self._pos = {int(i): n for n, i in enumerate(ids)}

    def __len__(self):
        return len(self.ids)

    @property
    def num_attributes(self) -> int:
        return self.attr_biases.size

    @property
    def codes(self) -> list[BinaryCode]:
        return [BinaryCode(self.k, w) for w in self.words]

    def code(self, sample_id: int) -> BinaryCode:
        return BinaryCode(self.k, self.words[self.position(sample_id)])

    def position(self, sample_id: int) -> int:
        try:
            return self._pos[int(sample_id)]
        except KeyError:
            raise KeyError(f"sample id {sample_id} not in index") from None

    def predicted_attributes(self) -> np.ndarray:
        return (self.attr_scores >= THRESHOLD).astype(np.int8)

    def __eq__(self, other):
        if not isinstance(other, RetrievalIndex):
            return NotImplemented
        return (
            self.k == other.k
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.words, other.words)
            and np.array_equal(self.attr_weights, other.attr_weights)
            and np.array_equal(self.attr_biases, other.attr_biases)
        )

    def nbytes_file(self) -> int:
        N, k, m = len(self), self.k, self.num_attributes
        return len(INDEX_MAGIC) + 8 * (3 + N + N * num_words(k)) + 8 * (k * m + m)


def build_index(model: DphModel, samples: Sequence[Sample]) -> RetrievalIndex:
    if not samples:
        raise ShapeError("cannot index an empty sample list")
    X = np.stack([s.features for s in samples])
    words = encode_batch(model, X)
    return RetrievalIndex(
        model.config.code_length,
        [s.id for s in samples],
        words,
        model.params["attr.weight"].copy(),
        model.params["attr.bias"].copy(),
    )


def save_index(index: RetrievalIndex, path) -> None:
    N, k, m = len(index), index.k, index.num_attributes
    blob = b"".join(
        [
            INDEX_MAGIC,
            struct.pack("<QQQ", k, m, N),
            index.ids.astype("<u8").tobytes(),
            index.words.astype("<u8").tobytes(),
            index.attr_weights.astype("<f8").tobytes(order="C"),
            index.attr_biases.astype("<f8").tobytes(),
        ]
    )
    Path(path).write_bytes(blob)


def load_index(path) -> RetrievalIndex:
    raw = Path(path).read_bytes()
    if raw[: len(INDEX_MAGIC)] != INDEX_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0 (expected {INDEX_MAGIC!r})")
    offset = len(INDEX_MAGIC)

    def take(nbytes: int, what: str) -> bytes:
        nonlocal offset
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated reading {what} at offset {offset}")
        chunk = raw[offset : offset + nbytes]
        offset += nbytes
        return chunk

    k, m, N = struct.unpack("<QQQ", take(24, "header"))
    if k < 1 or m < 1:
        raise FormatError(f"{path}: invalid header k={k} m={m}")
    W = num_words(k)
    ids = np.frombuffer(take(8 * N, "ids"), dtype="<u8")
    words = np.frombuffer(take(8 * N * W, "code words"), dtype="<u8").reshape(N, W)
    weights = np.frombuffer(take(8 * k * m, "attribute weights"), dtype="<f8").reshape(k, m)
    biases = np.frombuffer(take(8 * m, "attribute biases"), dtype="<f8")
    if offset != len(raw):
        raise FormatError(f"{path}: unexpected trailing data at offset {offset}")
    return RetrievalIndex(k, ids.astype(np.int64), words, weights, biases)
