"""Leave-one-out evaluation of the three retrieval tasks plus the data ablation.

Each test sample is used once as query against the remaining test samples.
Averages are taken in query order so that reports are bit-reproducible.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .dataset import ABLATION_MODES, MISSING, Dataset, Sample, apply_ablation_mask
from .index import RetrievalIndex, build_index
from .model import DphModel, ModelConfig, TrainConfig, train
from .retrieval import make_task2_query, task1_category, task2_attribute, task3_combined

logger = logging.getLogger(__name__)

RECALL_KS = (5, 10, 20, 50, 75, 100)


@dataclass(frozen=True)
class Score:
    value: float
    num_valid: int


def average_precision(ranked_ids, relevant) -> Optional[float]:
    """AP over the full ranking; ``None`` when there is nothing relevant."""
    relevant = set(int(r) for r in relevant)
    if not relevant:
        return None
    hits = np.fromiter((int(i) in relevant for i in ranked_ids), dtype=bool, count=len(ranked_ids))
    return _ap_from_hits(hits, len(relevant))


def _ap_from_hits(hits: np.ndarray, num_relevant: int) -> float:
    ranks = np.flatnonzero(hits) + 1
    precisions = np.arange(1, len(ranks) + 1) / ranks
    return sum(precisions.tolist()) / num_relevant


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def _mean(values: list[float]) -> float:
    return sum(values) / len(values) if values else 0.0


def _truth(samples: Sequence[Sample]):
    ids = np.array([s.id for s in samples], dtype=np.int64)
    cats = np.array([-1 if s.category is None else s.category for s in samples], dtype=np.int64)
    attrs = np.stack([s.attributes for s in samples]).astype(np.int8)
    return ids, cats, attrs


def _relevance(ids: np.ndarray, mask: np.ndarray) -> dict[int, bool]:
    return dict(zip(ids.tolist(), mask.tolist()))


def task1_map(index: RetrievalIndex, samples: Sequence[Sample]) -> Score:
    ids, cats, _ = _truth(samples)
    aps = []
    for s in samples:
        if s.category is None:
            continue
        rel = _relevance(ids, (cats == s.category) & (ids != s.id))
        n_rel = sum(rel.values())
        if n_rel == 0:
            continue
        ranked = task1_category(index, index.code(s.id), exclude_id=s.id)
        hits = np.array([rel[i] for i in ranked.ids.tolist()], dtype=bool)
        aps.append(_ap_from_hits(hits, n_rel))
    return Score(_mean(aps), len(aps))


def attribute_f1(index: RetrievalIndex, samples: Sequence[Sample]) -> tuple[float, np.ndarray]:
    _, _, truth = _truth(samples)
    pred = np.stack([index.predicted_attributes()[index.position(s.id)] for s in samples])
    labelled = truth != MISSING
    f1 = np.array(
        [
            f1_from_counts(
                int(np.sum((pred[:, j] == 1) & (truth[:, j] == 1) & labelled[:, j])),
                int(np.sum((pred[:, j] == 1) & (truth[:, j] == 0) & labelled[:, j])),
                int(np.sum((pred[:, j] == 0) & (truth[:, j] == 1) & labelled[:, j])),
            )
            for j in range(truth.shape[1])
        ]
    )
    return _mean(f1.tolist()), f1


def task2_avg_map(index: RetrievalIndex, samples: Sequence[Sample], seed: int) -> Score:
    ids, _, truth = _truth(samples)
    rng = np.random.default_rng(seed)
    aps = []
    for q, s in enumerate(samples):
        query = make_task2_query(index, s.id, rng)
        cols = query.attributes
        match = np.all(truth[:, cols] == truth[q, cols], axis=1) & (ids != s.id)
        rel = _relevance(ids, match)
        n_rel = int(match.sum())
        if n_rel == 0:
            continue
        ranked = task2_attribute(index, query, exclude_id=s.id)
        hits = np.array([rel[i] for i in ranked.ids.tolist()], dtype=bool)
        aps.append(_ap_from_hits(hits, n_rel))
    return Score(_mean(aps), len(aps))


def recall_at_k(ranked_ids: Iterable[int], true_matches, ks: Sequence[int] = RECALL_KS) -> Optional[dict[int, float]]:
    """Fraction of ``true_matches`` found in the top K, for each K; ``None`` if there are none."""
    true_matches = set(int(t) for t in true_matches)
    if not true_matches:
        return None
    hits = np.cumsum([int(i) in true_matches for i in ranked_ids])
    out = {}
    for k in ks:
        found = int(hits[min(k, len(hits)) - 1]) if len(hits) and k > 0 else 0
        out[k] = found / len(true_matches)
    return out


def task3_recall(index: RetrievalIndex, samples: Sequence[Sample], ks: Sequence[int] = RECALL_KS) -> tuple[dict[int, float], int]:
    ids, cats, truth = _truth(samples)
    predicted = index.predicted_attributes()
    per_query: list[dict[int, float]] = []
    for s in samples:
        pos = index.position(s.id)
        for j in np.flatnonzero(predicted[pos] == 0).tolist():
            true = ids[(cats == s.category) & (truth[:, j] == 1) & (ids != s.id)]
            if len(true) == 0:
                continue
            ranked = task3_combined(index, index.code(s.id), s.id, j)
            per_query.append(recall_at_k(ranked.ids.tolist(), true.tolist(), ks))
    avg = {k: _mean([r[k] for r in per_query]) for k in ks}
    return avg, len(per_query)


def eval_task1(model: DphModel, test_samples: Sequence[Sample]) -> Score:
    return task1_map(build_index(model, test_samples), test_samples)


def eval_attr_f1(model: DphModel, test_samples: Sequence[Sample]) -> tuple[float, np.ndarray]:
    return attribute_f1(build_index(model, test_samples), test_samples)


def eval_task2(model: DphModel, test_samples: Sequence[Sample], seed: int) -> Score:
    return task2_avg_map(build_index(model, test_samples), test_samples, seed)


def eval_task3(model: DphModel, test_samples: Sequence[Sample]) -> tuple[dict[int, float], int]:
    return task3_recall(build_index(model, test_samples), test_samples)


@dataclass
class EvalReport:
    task1_map: float
    task1_valid: int
    mean_f1: float
    per_attribute_f1: np.ndarray
    task2_avg_map: float
    task2_valid: int
    task3_recall: dict[int, float]
    task3_valid: int
    metadata: dict[str, object] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"{k} = {v}" for k, v in self.metadata.items()]
        lines += [
            f"task1_map = {self.task1_map!r}",
            f"task1_valid_queries = {self.task1_valid}",
            f"mean_f1 = {self.mean_f1!r}",
        ]
        lines += [f"f1_attr_{j + 1} = {float(v)!r}" for j, v in enumerate(self.per_attribute_f1)]
        lines += [f"task2_avg_map = {self.task2_avg_map!r}", f"task2_valid_queries = {self.task2_valid}"]
        lines += [f"task3_recall@{k} = {v!r}" for k, v in self.task3_recall.items()]
        lines += [f"task3_valid_queries = {self.task3_valid}"]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


def evaluate(model: DphModel, test_samples: Sequence[Sample], seed: int = 0, metadata: Optional[dict] = None) -> EvalReport:
    """All metrics over one shared index of the test set."""
    index = build_index(model, test_samples)
    t1 = task1_map(index, test_samples)
    f1, per_attr = attribute_f1(index, test_samples)
    t2 = task2_avg_map(index, test_samples, seed)
    t3, n3 = task3_recall(index, test_samples)
    meta = {"k": model.config.code_length, "eval_seed": seed}
    meta.update(metadata or {})
    return EvalReport(t1.value, t1.num_valid, f1, per_attr, t2.value, t2.num_valid, t3, n3, meta)


@dataclass
class AblationRow:
    mode: str
    map: float
    mean_f1: float


def run_ablation(
    dataset: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    init_seed: int = 0,
    modes: Sequence[str] = ABLATION_MODES,
) -> list[AblationRow]:
    """Train one model per data setting from a shared initialisation; score on the shared test set."""
    test = dataset.split("test")
    init = DphModel.initialize(model_cfg, init_seed)
    rows = []
    for mode in modes:
        model = init.copy()
        train(model, apply_ablation_mask(dataset, mode), train_cfg, mode=mode)
        index = build_index(model, test)
        rows.append(AblationRow(mode, task1_map(index, test).value, attribute_f1(index, test)[0]))
        logger.info("ablation %s: mAP %.4f  mean F1 %.4f", mode, rows[-1].map, rows[-1].mean_f1)
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["mode", "map", "mean_f1"])
        for r in rows:
            writer.writerow([r.mode, repr(r.map), repr(r.mean_f1)])
