"""Synthetic partially-labelled data and the on-disk dataset format.

Categories are 1-based (1..C) in memory with ``None`` for a missing label;
on disk a missing category is the sentinel ``C + 1``. Attribute labels are
ternary: 0 absent, 1 present, 2 missing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError, ValidationError

ABSENT, PRESENT, MISSING = 0, 1, 2

ABLATION_MODES = ("B", "B+A", "B+C", "B+A+C")

DATASET_MAGIC = "dph-dataset v1"
PARTITION_KEYS = ("both", "category", "attribute", "test")


@dataclass(frozen=True, eq=False)
class Sample:
    id: int
    features: np.ndarray
    category: Optional[int]
    attributes: np.ndarray

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        attrs = np.array(self.attributes, dtype=np.int8)
        feats.setflags(write=False)
        attrs.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "attributes", attrs)

    @property
    def has_category(self) -> bool:
        return self.category is not None

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.id == other.id
            and self.category == other.category
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.attributes, other.attributes)
            and self.features.shape == other.features.shape
        )

    def __repr__(self):
        attrs = "".join(str(int(a)) for a in self.attributes)
        return f"Sample(id={self.id}, category={self.category}, attributes={attrs}, d={self.features.size})"


@dataclass(frozen=True)
class DatasetPartition:
    both: tuple[int, ...] = ()
    category: tuple[int, ...] = ()
    attribute: tuple[int, ...] = ()
    test: tuple[int, ...] = ()

    def __post_init__(self):
        for name in PARTITION_KEYS:
            object.__setattr__(self, name, tuple(int(i) for i in getattr(self, name)))

    def all_ids(self) -> list[int]:
        return [i for name in PARTITION_KEYS for i in getattr(self, name)]


@dataclass(frozen=True)
class SynthConfig:
    num_categories: int = 20
    feature_dim: int = 32
    num_attributes: int = 8
    samples_per_category: int = 100
    cluster_spread: float = 1.0
    attribute_noise_rate: float = 0.0
    # both, category-only, attribute-only, test
    partition_fractions: tuple[float, float, float, float] = (0.1, 0.6, 0.1, 0.2)
    seed: int = 0

    def validate(self) -> None:
        if self.num_categories < 2:
            raise ConfigError(f"num_categories must be >= 2, got {self.num_categories}")
        if self.num_attributes < 1:
            raise ConfigError(f"num_attributes must be >= 1, got {self.num_attributes}")
        if self.feature_dim < self.num_attributes:
            raise ConfigError(
                f"feature_dim must be >= num_attributes ({self.num_attributes}), got {self.feature_dim}"
            )
        if self.samples_per_category < 1:
            raise ConfigError(f"samples_per_category must be >= 1, got {self.samples_per_category}")
        if not (self.cluster_spread > 0 and math.isfinite(self.cluster_spread)):
            raise ConfigError(f"cluster_spread must be positive, got {self.cluster_spread}")
        if not 0 <= self.attribute_noise_rate < 1:
            raise ConfigError(f"attribute_noise_rate must lie in [0, 1), got {self.attribute_noise_rate}")
        fr = tuple(self.partition_fractions)
        if len(fr) != 4:
            raise ConfigError(f"partition_fractions needs 4 entries, got {len(fr)}")
        if any(f < 0 for f in fr):
            raise ConfigError(f"partition_fractions must be nonnegative, got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"partition_fractions must sum to 1, got {sum(fr)!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")


@dataclass(eq=False)
class Dataset:
    """Samples plus partition plus the header dimensions the file format needs."""

    samples: list[Sample]
    partition: DatasetPartition
    num_categories: int
    num_attributes: int
    feature_dim: int
    _by_id: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._by_id = {s.id: s for s in self.samples}

    def __len__(self):
        return len(self.samples)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            (self.num_categories, self.num_attributes, self.feature_dim)
            == (other.num_categories, other.num_attributes, other.feature_dim)
            and self.partition == other.partition
            and self.samples == other.samples
        )

    def get(self, ids: Iterable[int]) -> list[Sample]:
        return [self._by_id[i] for i in ids]

    def split(self, name: str) -> list[Sample]:
        if name == "all":
            return list(self.samples)
        if name not in PARTITION_KEYS:
            raise ConfigError(f"unknown split {name!r}; expected one of {('all',) + PARTITION_KEYS}")
        return self.get(getattr(self.partition, name))


def _split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    bounds = [0]
    acc = 0.0
    for f in fractions:
        acc += f
        bounds.append(min(n, int(round(acc * n))))
    bounds[-1] = n
    return [b - a for a, b in zip(bounds[:-1], bounds[1:])]


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    cfg.validate()
    C, d, m = cfg.num_categories, cfg.feature_dim, cfg.num_attributes
    per = cfg.samples_per_category
    rng = np.random.default_rng(cfg.seed)

    centers = rng.standard_normal((C, d))
    normals = rng.standard_normal((m, d))
    center_attrs = (centers @ normals.T > 0).astype(np.int8)

    labels = np.repeat(np.arange(C), per)
    feats = centers[labels] + cfg.cluster_spread * rng.standard_normal((C * per, d))
    attrs = center_attrs[labels].copy()
    flips = rng.random(attrs.shape) < cfg.attribute_noise_rate
    attrs[flips] = 1 - attrs[flips]

    counts = _split_counts(per, cfg.partition_fractions)
    groups: list[list[int]] = [[] for _ in PARTITION_KEYS]
    for c in range(C):
        members = c * per + rng.permutation(per)
        start = 0
        for g, cnt in enumerate(counts):
            groups[g].extend(int(i) for i in members[start : start + cnt])
            start += cnt
    partition = DatasetPartition(*(sorted(g) for g in groups))
    only_cat = set(partition.category)
    only_attr = set(partition.attribute)

    samples = []
    for i in range(C * per):
        category: Optional[int] = int(labels[i]) + 1
        a = attrs[i]
        if i in only_cat:
            a = np.full(m, MISSING, dtype=np.int8)
        elif i in only_attr:
            category = None
        samples.append(Sample(i, feats[i], category, a))
    return Dataset(samples, partition, C, m, d)


def apply_ablation_mask(dataset: Dataset, mode: str) -> list[Sample]:
    """Training pool for one of the four data-ablation settings, in id order."""
    if mode not in ABLATION_MODES:
        raise ConfigError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
    p = dataset.partition
    ids = set(p.both)
    if "A" in mode:
        ids.update(p.attribute)
    if "C" in mode:
        ids.update(p.category)
    return dataset.get(sorted(ids))


def validate_sample(sample: Sample, num_categories: int, num_attributes: int, feature_dim: int) -> None:
    where = f"record id={sample.id}"
    if sample.features.shape != (feature_dim,):
        raise ValidationError(f"{where}: expected {feature_dim} features, got {sample.features.size}")
    if not np.all(np.isfinite(sample.features)):
        raise ValidationError(f"{where}: non-finite feature value")
    if sample.attributes.shape != (num_attributes,):
        raise ValidationError(f"{where}: expected {num_attributes} attributes, got {sample.attributes.size}")
    bad = (sample.attributes < 0) | (sample.attributes > 2)
    if bad.any():
        j = int(np.argmax(bad))
        raise ValidationError(f"{where}: attribute {j} has value {int(sample.attributes[j])}, expected 0, 1 or 2")
    if sample.category is not None and not 1 <= sample.category <= num_categories:
        raise ValidationError(f"{where}: category {sample.category} outside 1..{num_categories}")
    if sample.category is None and np.all(sample.attributes == MISSING):
        raise ValidationError(f"{where}: sample has no available label")


def partition_path_for(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".partition")


def save_dataset(dataset: Dataset, path, partition_path=None) -> None:
    """Write the record file at ``path`` and the partition file next to it."""
    C, m, d = dataset.num_categories, dataset.num_attributes, dataset.feature_dim
    lines = [f"{DATASET_MAGIC} C={C} m={m} d={d} N={len(dataset.samples)}"]
    for s in dataset.samples:
        validate_sample(s, C, m, d)
        cat = C + 1 if s.category is None else s.category
        attrs = "".join(str(int(a)) for a in s.attributes)
        feats = "\t".join(repr(float(x)) for x in s.features)
        lines.append(f"{s.id}\t{cat}\t{attrs}" + (f"\t{feats}" if d else ""))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    p = dataset.partition
    plines = [f"{key}:" + ",".join(str(i) for i in getattr(p, key)) for key in PARTITION_KEYS]
    Path(partition_path or partition_path_for(path)).write_text("\n".join(plines) + "\n", encoding="utf-8")


def _parse_header(line: str) -> dict[str, int]:
    if not line.startswith(DATASET_MAGIC + " "):
        raise FormatError(f"line 1: expected header starting with {DATASET_MAGIC!r}")
    fields = {}
    for tok in line[len(DATASET_MAGIC) :].split():
        key, sep, val = tok.partition("=")
        if not sep:
            raise FormatError(f"line 1: malformed header field {tok!r}")
        try:
            fields[key] = int(val)
        except ValueError:
            raise FormatError(f"line 1: header field {key} is not an integer: {val!r}") from None
    missing = {"C", "m", "d", "N"} - fields.keys()
    if missing:
        raise FormatError(f"line 1: header lacks {sorted(missing)}")
    return fields


def _parse_record(line: str, lineno: int, C: int, m: int, d: int) -> Sample:
    parts = line.split("\t")
    if len(parts) != 3 + d:
        raise FormatError(f"line {lineno}: expected {3 + d} tab-separated fields, got {len(parts)}")
    try:
        sid = int(parts[0])
        cat = int(parts[1])
        feats = [float(x) for x in parts[3:]]
    except ValueError as exc:
        raise FormatError(f"line {lineno}: {exc}") from None
    if len(parts[2]) != m or not parts[2].isdigit():
        raise FormatError(f"line {lineno}: attribute field must be {m} digits, got {parts[2]!r}")
    attrs = [int(ch) for ch in parts[2]]
    if not 1 <= cat <= C + 1:
        raise ValidationError(f"record id={sid} (line {lineno}): category {cat} outside 1..{C + 1}")
    sample = Sample(sid, np.array(feats, dtype=np.float64), None if cat == C + 1 else cat, attrs)
    validate_sample(sample, C, m, d)
    return sample


def _parse_partition(text: str) -> DatasetPartition:
    groups = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, rest = line.partition(":")
        key = key.strip()
        if not sep or key not in PARTITION_KEYS:
            raise FormatError(f"partition line {lineno}: expected one of {PARTITION_KEYS} followed by ':'")
        if key in groups:
            raise FormatError(f"partition line {lineno}: duplicate key {key!r}")
        try:
            groups[key] = [int(t) for t in rest.split(",") if t.strip()]
        except ValueError as exc:
            raise FormatError(f"partition line {lineno}: {exc}") from None
    missing = set(PARTITION_KEYS) - groups.keys()
    if missing:
        raise FormatError(f"partition file lacks {sorted(missing)}")
    return DatasetPartition(**groups)


def validate_partition(samples: Sequence[Sample], partition: DatasetPartition) -> None:
    ids = partition.all_ids()
    if len(set(ids)) != len(ids):
        raise ValidationError("partition groups are not pairwise disjoint")
    by_id = {s.id: s for s in samples}
    if set(ids) != by_id.keys():
        raise ValidationError("partition does not cover exactly the dataset ids")
    for i in partition.category:
        if not np.all(by_id[i].attributes == MISSING):
            raise ValidationError(f"record id={i}: category-only sample carries attribute labels")
    for i in partition.attribute:
        if by_id[i].category is not None:
            raise ValidationError(f"record id={i}: attribute-only sample carries a category label")
    for i in partition.both + partition.test:
        s = by_id[i]
        if s.category is None or np.any(s.attributes == MISSING):
            raise ValidationError(f"record id={i}: fully-labelled sample has a missing label")


def load_dataset(path, partition_path=None) -> Dataset:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError("line 1: empty file")
    hdr = _parse_header(lines[0])
    C, m, d, N = hdr["C"], hdr["m"], hdr["d"], hdr["N"]
    records = lines[1:]
    if len(records) != N:
        raise FormatError(f"header declares N={N} records, found {len(records)}")
    samples = [_parse_record(line, lineno, C, m, d) for lineno, line in enumerate(records, start=2)]
    if len({s.id for s in samples}) != len(samples):
        raise ValidationError("duplicate record ids")
    partition = _parse_partition(Path(partition_path or partition_path_for(path)).read_text(encoding="utf-8"))
    validate_partition(samples, partition)
    return Dataset(samples, partition, C, m, d)


def labels_matrix(samples: Sequence[Sample]):
    """Stack a batch into (features, 0-based category with -1 for missing, attributes)."""
    if not samples:
        raise ConfigError("empty batch")
    X = np.stack([s.features for s in samples])
    y = np.array([-1 if s.category is None else s.category - 1 for s in samples], dtype=np.int64)
    A = np.stack([s.attributes for s in samples]).astype(np.int8)
    return X, y, A
