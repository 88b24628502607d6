import numpy as np
import pytest
from scipy.special import logit

from oracles import per_bit_hamming
from dualhash.errors import QueryError, ShapeError
from dualhash.index import BinaryCode, RetrievalIndex
from dualhash.retrieval import (
    AttrQuery,
    make_task2_query,
    task1_category,
    task2_attribute,
    task3_combined,
)


def index_from(bits, ids=None, m=2):
    bits = np.asarray(bits)
    N, k = bits.shape
    ids = np.arange(N) if ids is None else np.asarray(ids)
    words = np.stack([BinaryCode.from_bits(b).words for b in bits])
    return RetrievalIndex(k, ids, words, np.zeros((k, m)), np.zeros(m))


def scored_index(scores, rng):
    """One-hot codes, so each entry's attribute scores are set exactly through its weight row."""
    scores = np.asarray(scores, dtype=np.float64)
    N, m = scores.shape
    bits = np.eye(N, dtype=np.uint8)
    W = logit(scores)
    words = np.stack([BinaryCode.from_bits(b).words for b in bits])
    return RetrievalIndex(N, np.arange(N), words, W, np.zeros(m)), bits


def random_index(rng, N=100, k=24, m=4):
    bits = rng.integers(0, 2, (N, k))
    words = np.stack([BinaryCode.from_bits(b).words for b in bits])
    W = rng.standard_normal((k, m))
    return RetrievalIndex(k, rng.permutation(N * 3)[:N], words, W, rng.standard_normal(m)), bits


def test_task1_exact_duplicate_ranks_first():
    index = index_from([[1, 0, 1, 1], [0, 0, 0, 0], [1, 0, 1, 0]], ids=[5, 6, 7])
    result = task1_category(index, BinaryCode.from_bits([1, 0, 1, 1]))
    assert list(result)[0] == (5, 0)


def test_task1_ties_by_ascending_id():
    index = index_from([[1, 1], [0, 0], [1, 1]], ids=[9, 4, 3])
    result = task1_category(index, BinaryCode.from_bits([1, 1]))
    assert list(result.ids) == [3, 9, 4]


def test_task1_excludes_query():
    index = index_from([[1, 1], [0, 0], [1, 0]])
    result = task1_category(index, BinaryCode.from_bits([1, 1]), exclude_id=0)
    assert 0 not in result.ids and len(result) == 2


def test_task1_matches_brute_force_sort(rng):
    index, bits = random_index(rng)
    for _ in range(10):
        q = rng.integers(0, 2, index.k)
        expected = sorted(zip([per_bit_hamming(q, b) for b in bits], index.ids.tolist()))
        result = task1_category(index, BinaryCode.from_bits(q))
        assert [(int(s), i) for i, s in result] == expected


def test_task1_k_mismatch(rng):
    index, _ = random_index(rng)
    with pytest.raises(ShapeError):
        task1_category(index, BinaryCode.from_bits([1, 0]))


def test_task1_permutation_and_sorted(rng):
    index, _ = random_index(rng)
    excluded = int(index.ids[7])
    result = task1_category(index, index.code(excluded), exclude_id=excluded)
    assert sorted(result.ids.tolist()) == sorted(set(index.ids.tolist()) - {excluded})
    assert np.all(np.diff(result.scores) >= 0)


def test_task2_single_clause(rng):
    index, _ = scored_index([[0.9, 0.5], [0.2, 0.5]], rng)
    result = task2_attribute(index, AttrQuery(((0, 1),)))
    assert list(result.ids) == [0, 1]
    np.testing.assert_allclose(result.scores, [0.9, 0.2], rtol=1e-12)


def test_task2_product_of_clauses(rng):
    index, _ = scored_index([[0.9, 0.2]], rng)
    result = task2_attribute(index, AttrQuery(((0, 1), (1, 0))))
    assert result.scores[0] == pytest.approx(0.72, rel=1e-12)


def test_task2_adding_clause_never_increases_score(rng):
    index, _ = random_index(rng)
    from dualhash.retrieval import attribute_query_scores

    s1 = attribute_query_scores(index, AttrQuery(((0, 1),)))
    s2 = attribute_query_scores(index, AttrQuery(((0, 1), (2, 0))))
    s3 = attribute_query_scores(index, AttrQuery(((0, 1), (2, 0), (3, 1))))
    assert np.all(s2 <= s1) and np.all(s3 <= s2)


def test_task2_descending_with_id_ties(rng):
    index, _ = scored_index([[0.4, 0.5], [0.7, 0.5], [0.4, 0.5]], rng)
    result = task2_attribute(index, AttrQuery(((0, 1),)))
    assert list(result.ids) == [1, 0, 2]


def test_task2_bad_attribute_index(rng):
    index, _ = random_index(rng, m=4)
    with pytest.raises(QueryError):
        task2_attribute(index, AttrQuery(((4, 1),)))


@pytest.mark.parametrize("clauses", [(), ((0, 1), (1, 1), (2, 1), (3, 1)), ((1, 1), (1, 0)), ((0, 2),)])
def test_attr_query_validation(clauses):
    with pytest.raises(QueryError):
        AttrQuery(clauses)


def test_make_task2_query_single_attribute(rng):
    index, _ = random_index(rng, m=1)
    for seed in range(20):
        q = make_task2_query(index, int(index.ids[0]), np.random.default_rng(seed))
        assert q.attributes == [0]


def test_make_task2_query_deterministic_and_predicted(rng):
    index, _ = random_index(rng, m=6)
    counts = set()
    for seed in range(40):
        qid = int(index.ids[seed])
        a = make_task2_query(index, qid, np.random.default_rng(seed))
        b = make_task2_query(index, qid, np.random.default_rng(seed))
        assert a == b
        counts.add(len(a.clauses))
        pred = index.attr_scores[index.position(qid)] >= 0.5
        assert all(v == int(pred[j]) for j, v in a.clauses)
    assert counts == {1, 2, 3}


def test_task3_empty_when_no_positive(rng):
    index, _ = scored_index([[0.1, 0.5], [0.2, 0.5], [0.3, 0.5]], rng)
    assert len(task3_combined(index, index.code(0), 0, 0)) == 0


def test_task3_requires_absent_attribute(rng):
    index, _ = scored_index([[0.9, 0.5], [0.2, 0.5]], rng)
    with pytest.raises(QueryError):
        task3_combined(index, index.code(0), 0, 0)


def test_task3_filter_then_sort_oracle(rng):
    index, bits = random_index(rng)
    pred = index.attr_scores >= 0.5
    checked = 0
    for pos in range(len(index)):
        qid = int(index.ids[pos])
        for j in np.flatnonzero(~pred[pos]):
            expected = sorted(
                (per_bit_hamming(bits[pos], bits[r]), int(index.ids[r]))
                for r in range(len(index))
                if r != pos and pred[r, j]
            )
            result = task3_combined(index, index.code(qid), qid, int(j))
            assert [(int(s), i) for i, s in result] == expected
            checked += 1
    assert checked > 50
