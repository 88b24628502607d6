"""Category, attribute and combined retrieval over a RetrievalIndex.

Every ranking breaks ties by ascending sample id.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .errors import QueryError, ShapeError
from .index import THRESHOLD, BinaryCode, RetrievalIndex, hamming_to_all

MAX_CLAUSES = 3


@dataclass(frozen=True)
class AttrQuery:
    clauses: tuple[tuple[int, int], ...]

    def __post_init__(self):
        clauses = tuple((int(j), int(v)) for j, v in self.clauses)
        if not 1 <= len(clauses) <= MAX_CLAUSES:
            raise QueryError(f"attribute query needs 1..{MAX_CLAUSES} clauses, got {len(clauses)}")
        if len({j for j, _ in clauses}) != len(clauses):
            raise QueryError(f"attribute indices must be distinct: {clauses}")
        for j, v in clauses:
            if j < 0 or v not in (0, 1):
                raise QueryError(f"bad clause ({j}, {v})")
        object.__setattr__(self, "clauses", clauses)

    @property
    def attributes(self) -> list[int]:
        return [j for j, _ in self.clauses]


@dataclass(frozen=True)
class RankedResult:
    ids: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return len(self.ids)

    def __iter__(self) -> Iterator[tuple[int, float]]:
        return ((int(i), s.item()) for i, s in zip(self.ids, self.scores))

    def top(self, k: int) -> "RankedResult":
        return RankedResult(self.ids[:k], self.scores[:k])


def _rank(index: RetrievalIndex, keep: np.ndarray, key: np.ndarray) -> RankedResult:
    rows = np.flatnonzero(keep)
    ids = index.ids[rows]
    order = np.lexsort((ids, key[rows]))
    return RankedResult(ids[order], key[rows][order])


def _exclusion_mask(index: RetrievalIndex, exclude_id: Optional[int]) -> np.ndarray:
    keep = np.ones(len(index), dtype=bool)
    if exclude_id is not None:
        keep &= index.ids != int(exclude_id)
    return keep


def _check_code(index: RetrievalIndex, code: BinaryCode) -> None:
    if code.k != index.k:
        raise ShapeError(f"query code has k={code.k}, index has k={index.k}")


def task1_category(index: RetrievalIndex, query_code: BinaryCode, exclude_id: Optional[int] = None) -> RankedResult:
    """Hamming ranking of the whole database (minus ``exclude_id``)."""
    _check_code(index, query_code)
    dist = hamming_to_all(query_code.words, index.words)
    return _rank(index, _exclusion_mask(index, exclude_id), dist)


def attribute_query_scores(index: RetrievalIndex, query: AttrQuery) -> np.ndarray:
    m = index.num_attributes
    score = np.ones(len(index))
    for j, v in query.clauses:
        if j >= m:
            raise QueryError(f"attribute index {j} out of range for m={m}")
        p = index.attr_scores[:, j]
        score = score * (p if v == 1 else 1.0 - p)
    return score


def task2_attribute(index: RetrievalIndex, query: AttrQuery, exclude_id: Optional[int] = None) -> RankedResult:
    """Rank by the product of recovered attribute scores, highest first."""
    score = attribute_query_scores(index, query)
    keep = _exclusion_mask(index, exclude_id)
    rows = np.flatnonzero(keep)
    ids = index.ids[rows]
    order = np.lexsort((ids, -score[rows]))
    return RankedResult(ids[order], score[rows][order])


def make_task2_query(index: RetrievalIndex, query_id: int, rng: np.random.Generator) -> AttrQuery:
    """Random 1-3 attribute query whose values are the query image's predicted attributes."""
    pos = index.position(query_id)
    m = index.num_attributes
    count = min(int(rng.integers(1, MAX_CLAUSES + 1)), m)
    attrs = sorted(int(j) for j in rng.choice(m, size=count, replace=False))
    predicted = index.attr_scores[pos] >= THRESHOLD
    return AttrQuery(tuple((j, int(predicted[j])) for j in attrs))


def task3_combined(index: RetrievalIndex, query_code: BinaryCode, query_id: int, flip_attr: int) -> RankedResult:
    """Entries predicted to have ``flip_attr`` (absent in the query), Hamming-ranked."""
    _check_code(index, query_code)
    if not 0 <= flip_attr < index.num_attributes:
        raise QueryError(f"attribute index {flip_attr} out of range for m={index.num_attributes}")
    pos = index.position(query_id)
    if index.attr_scores[pos, flip_attr] >= THRESHOLD:
        raise QueryError(f"attribute {flip_attr} is predicted present for query {query_id}; pick an absent one")
    keep = _exclusion_mask(index, query_id) & (index.attr_scores[:, flip_attr] >= THRESHOLD)
    dist = hamming_to_all(query_code.words, index.words)
    return _rank(index, keep, dist)
