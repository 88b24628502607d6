"""Fully connected hashing network with a sigmoid code layer and two heads.

Layout: ``input -> [affine + relu]* -> affine + sigmoid (k code units)``,
then a softmax category head and a sigmoid attribute head both reading the
k code units. Weights are stored ``(fan_in, fan_out)`` so a layer computes
``x @ W + b``.

Losses are evaluated from logits (``log_softmax`` / ``log_expit``); a
stored probability is never passed to ``log``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, log_expit, log_softmax, softmax

from .dataset import MISSING, Sample, labels_matrix
from .errors import ConfigError, FormatError, LabelError, ShapeError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"dph-model v1"
PRETRAINED_PREFIX = "hidden"


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64,)
    code_length: int = 32
    num_categories: int = 20
    num_attributes: int = 8
    hidden_activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, self.code_length, self.num_categories, self.num_attributes) + self.hidden_dims
        if any(int(x) < 1 for x in dims):
            raise ConfigError(f"all model dimensions must be positive, got {self}")
        if self.hidden_activation != "relu":
            raise ConfigError(f"unsupported hidden_activation {self.hidden_activation!r}")

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes in checkpoint order."""
        shapes = []
        fan_in = self.input_dim
        for i, h in enumerate(self.hidden_dims):
            shapes += [(f"hidden{i}.weight", (fan_in, h)), (f"hidden{i}.bias", (h,))]
            fan_in = h
        k = self.code_length
        shapes += [
            ("code.weight", (fan_in, k)),
            ("code.bias", (k,)),
            ("cls.weight", (k, self.num_categories)),
            ("cls.bias", (self.num_categories,)),
            ("attr.weight", (k, self.num_attributes)),
            ("attr.bias", (self.num_attributes,)),
        ]
        return shapes


class DphModel:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = {}
        for name, shape in config.param_shapes():
            if name not in params:
                raise ShapeError(f"missing parameter {name}")
            arr = np.array(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.params[name] = arr

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "DphModel":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in config.param_shapes():
            if name.endswith(".weight"):
                bound = 1.0 / np.sqrt(shape[0])
                params[name] = rng.uniform(-bound, bound, size=shape)
            else:
                params[name] = np.zeros(shape)
        return cls(config, params)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "DphModel":
        return cls(config, {name: np.zeros(shape) for name, shape in config.param_shapes()})

    def copy(self) -> "DphModel":
        return DphModel(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def num_hidden(self) -> int:
        return len(self.config.hidden_dims)

    def __eq__(self, other):
        if not isinstance(other, DphModel):
            return NotImplemented
        return self.config == other.config and all(
            np.array_equal(self.params[k], other.params[k]) for k in self.params
        )


@dataclass
class ForwardActivations:
    inputs: np.ndarray
    hidden_pre: list[np.ndarray]
    hidden_post: list[np.ndarray]
    code_logits: np.ndarray
    binary_like: np.ndarray
    class_logits: np.ndarray
    class_probs: np.ndarray
    attr_logits: np.ndarray
    attr_probs: np.ndarray

    def row(self, i: int) -> "ForwardActivations":
        return ForwardActivations(
            self.inputs[i],
            [h[i] for h in self.hidden_pre],
            [h[i] for h in self.hidden_post],
            self.code_logits[i],
            self.binary_like[i],
            self.class_logits[i],
            self.class_probs[i],
            self.attr_logits[i],
            self.attr_probs[i],
        )


def _forward(model: DphModel, X: np.ndarray) -> ForwardActivations:
    p = model.params
    if X.ndim != 2 or X.shape[1] != model.config.input_dim:
        raise ShapeError(f"expected features of length {model.config.input_dim}, got shape {X.shape}")
    pre_list, post_list = [], []
    h = X
    for i in range(model.num_hidden):
        pre = h @ p[f"hidden{i}.weight"] + p[f"hidden{i}.bias"]
        h = np.maximum(pre, 0.0)
        pre_list.append(pre)
        post_list.append(h)
    code_logits = h @ p["code.weight"] + p["code.bias"]
    b = expit(code_logits)
    cls_logits = b @ p["cls.weight"] + p["cls.bias"]
    attr_logits = b @ p["attr.weight"] + p["attr.bias"]
    return ForwardActivations(
        X, pre_list, post_list, code_logits, b,
        cls_logits, softmax(cls_logits, axis=1),
        attr_logits, expit(attr_logits),
    )


def forward(model: DphModel, features) -> ForwardActivations:
    """Propagate one feature vector (1-D) or a batch (2-D) through the network."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        return _forward(model, X[None, :]).row(0)
    return _forward(model, X)


def _category_index(y, num_categories: int) -> int:
    if y is None:
        return -1
    if isinstance(y, (bool, np.bool_)) or int(y) != y or not 1 <= int(y) <= num_categories:
        raise LabelError(f"category label {y!r} outside 1..{num_categories} or MISSING")
    return int(y) - 1


def class_loss(acts: ForwardActivations, y):
    """Negative log-likelihood of category ``y`` (1-based, ``None`` = missing).

    For single-sample activations ``y`` is a scalar and a float is returned;
    for batched activations ``y`` is a sequence and a vector is returned.
    """
    logits = np.atleast_2d(acts.class_logits)
    C = logits.shape[1]
    single = np.ndim(acts.class_logits) == 1
    ys = [y] if single else list(y)
    if len(ys) != logits.shape[0]:
        raise ShapeError(f"{len(ys)} labels for {logits.shape[0]} activations")
    idx = np.array([_category_index(v, C) for v in ys], dtype=np.int64)
    out = _class_losses(logits, idx)
    return float(out[0]) if single else out


def _class_losses(logits: np.ndarray, idx: np.ndarray) -> np.ndarray:
    logp = log_softmax(logits, axis=1)
    picked = -logp[np.arange(len(idx)), np.where(idx >= 0, idx, 0)]
    return np.where(idx >= 0, picked, 0.0)


def _attr_losses(logits: np.ndarray, A: np.ndarray, w: np.ndarray) -> np.ndarray:
    w_pos = w / (w + 1.0)
    w_neg = 1.0 / (w + 1.0)
    pos = np.where(A == 1, -w_pos * log_expit(logits), 0.0)
    neg = np.where(A == 0, -w_neg * log_expit(-logits), 0.0)
    return pos + neg


def attr_loss(acts: ForwardActivations, a, w) -> np.ndarray:
    """Cost-sensitive logistic loss per attribute; missing labels (2) cost 0."""
    logits = np.asarray(acts.attr_logits, dtype=np.float64)
    a = np.asarray(a)
    w = np.asarray(w, dtype=np.float64)
    if a.shape != logits.shape or w.shape != logits.shape[-1:]:
        raise ShapeError(f"attribute labels {a.shape} / weights {w.shape} do not match logits {logits.shape}")
    if np.any((a != 0) & (a != 1) & (a != 2)):
        raise LabelError(f"attribute labels must be 0, 1 or 2, got {a}")
    return _attr_losses(logits, a, w)


def compute_attr_weights(pool: Sequence[Sample]) -> np.ndarray:
    """Per-attribute negative/positive ratio over the labelled entries of ``pool``."""
    if not pool:
        raise ConfigError("cannot compute attribute weights of an empty pool")
    A = np.stack([s.attributes for s in pool])
    neg = (A == 0).sum(axis=0)
    pos = (A == 1).sum(axis=0)
    w = np.empty(A.shape[1])
    for j in range(A.shape[1]):
        if neg[j] == 0 and pos[j] == 0:
            w[j] = 1.0
        elif pos[j] == 0:
            w[j] = max(neg[j], 1)
        elif neg[j] == 0:
            w[j] = 1.0 / max(pos[j], 1)
        else:
            w[j] = neg[j] / pos[j]
    return w


@dataclass
class LossParts:
    total: float
    cls_term: float
    # per-attribute terms after division by the labelled count, before alpha
    attr_terms: np.ndarray

    @property
    def attr_term(self) -> float:
        return float(self.attr_terms.sum())


def _loss_and_grads(model: DphModel, X, y, A, w, alpha: float, with_grads: bool = True):
    acts = _forward(model, X)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (model.config.num_attributes,):
        raise ShapeError(f"expected {model.config.num_attributes} attribute weights, got {w.shape}")

    has_y = y >= 0
    n_cls = int(has_y.sum())
    cls_each = _class_losses(acts.class_logits, y)
    cls_term = float(cls_each.sum() / n_cls) if n_cls else 0.0

    labelled = A != MISSING
    n_attr = labelled.sum(axis=0)
    attr_each = _attr_losses(acts.attr_logits, A, w)
    safe_n = np.maximum(n_attr, 1)
    attr_terms = np.where(n_attr > 0, attr_each.sum(axis=0) / safe_n, 0.0)
    parts = LossParts(cls_term + alpha * float(attr_terms.sum()), cls_term, attr_terms)
    if not with_grads:
        return parts, None

    p = model.params
    onehot = np.zeros_like(acts.class_probs)
    onehot[np.flatnonzero(has_y), y[has_y]] = 1.0
    d_cls = np.where(has_y[:, None], acts.class_probs - onehot, 0.0)
    if n_cls:
        d_cls = d_cls / n_cls

    sig = acts.attr_probs
    w_pos = w / (w + 1.0)
    w_neg = 1.0 / (w + 1.0)
    d_attr = np.where(A == 1, w_pos * (sig - 1.0), 0.0) + np.where(A == 0, w_neg * sig, 0.0)
    d_attr = np.where(n_attr > 0, alpha * d_attr / safe_n, 0.0)

    b = acts.binary_like
    grads = {
        "cls.weight": b.T @ d_cls,
        "cls.bias": d_cls.sum(axis=0),
        "attr.weight": b.T @ d_attr,
        "attr.bias": d_attr.sum(axis=0),
    }
    d_b = d_cls @ p["cls.weight"].T + d_attr @ p["attr.weight"].T
    d_code = d_b * b * (1.0 - b)
    h_last = acts.hidden_post[-1] if acts.hidden_post else X
    grads["code.weight"] = h_last.T @ d_code
    grads["code.bias"] = d_code.sum(axis=0)
    d_h = d_code @ p["code.weight"].T
    for i in reversed(range(model.num_hidden)):
        d_pre = np.where(acts.hidden_pre[i] > 0, d_h, 0.0)
        h_in = acts.hidden_post[i - 1] if i > 0 else X
        grads[f"hidden{i}.weight"] = h_in.T @ d_pre
        grads[f"hidden{i}.bias"] = d_pre.sum(axis=0)
        d_h = d_pre @ p[f"hidden{i}.weight"].T
    return parts, grads


def batch_loss(model: DphModel, batch: Sequence[Sample], w, alpha: float) -> tuple[float, LossParts]:
    X, y, A = labels_matrix(batch)
    parts, _ = _loss_and_grads(model, X, y, A, w, alpha, with_grads=False)
    return parts.total, parts


def backward(model: DphModel, batch: Sequence[Sample], w, alpha: float) -> dict[str, np.ndarray]:
    """Exact gradient of the mini-batch objective; weight decay is not included."""
    X, y, A = labels_matrix(batch)
    _, grads = _loss_and_grads(model, X, y, A, w, alpha)
    return grads


@dataclass
class TrainConfig:
    alpha: float = 0.1
    batch_size: int = 200
    learning_rate: float = 0.01
    lr_multiplier_pretrained: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")


def sgd_step(model: DphModel, grads: dict[str, np.ndarray], state: dict[str, np.ndarray], cfg: TrainConfig) -> None:
    """Momentum SGD with L2 weight decay; updates ``model`` and ``state`` in place."""
    for name, theta in model.params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {theta.shape}")
        lr = cfg.learning_rate
        if name.startswith(PRETRAINED_PREFIX):
            lr *= cfg.lr_multiplier_pretrained
        v = state.get(name)
        if v is None:
            v = np.zeros_like(theta)
        v = cfg.momentum * v - lr * (g + cfg.weight_decay * theta)
        state[name] = v
        theta += v


@dataclass
class EpochRecord:
    epoch: int
    total: float
    cls_term: float
    attr_terms: np.ndarray


@dataclass
class TrainingLog:
    attr_weights: np.ndarray
    mode: Optional[str] = None
    epochs: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.epochs)

    def write_csv(self, path) -> None:
        m = len(self.attr_weights)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "total", "cls_term"] + [f"attr_term_{j + 1}" for j in range(m)])
            for rec in self.epochs:
                writer.writerow([rec.epoch, repr(rec.total), repr(rec.cls_term)] + [repr(float(t)) for t in rec.attr_terms])


def train(
    model: DphModel,
    pool: Sequence[Sample],
    cfg: TrainConfig,
    mode: Optional[str] = None,
    attr_weights=None,
) -> TrainingLog:
    """Train ``model`` in place on ``pool``; one log row per epoch (batch means)."""
    if not pool:
        raise ConfigError("training pool is empty")
    w = compute_attr_weights(pool) if attr_weights is None else np.asarray(attr_weights, dtype=np.float64)
    X, y, A = labels_matrix(pool)
    log = TrainingLog(attr_weights=w, mode=mode)
    rng = np.random.default_rng(cfg.seed)
    state: dict[str, np.ndarray] = {}
    n = len(pool)
    m = model.config.num_attributes
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        tot = cls = 0.0
        attr = np.zeros(m)
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            parts, grads = _loss_and_grads(model, X[idx], y[idx], A[idx], w, cfg.alpha)
            sgd_step(model, grads, state, cfg)
            tot += parts.total
            cls += parts.cls_term
            attr += parts.attr_terms
            batches += 1
        rec = EpochRecord(epoch, tot / batches, cls / batches, attr / batches)
        log.epochs.append(rec)
        logger.debug("epoch %d loss %.6f (cls %.6f)", epoch, rec.total, rec.cls_term)
    return log


def _config_lines(cfg: ModelConfig) -> list[str]:
    return [
        f"input_dim={cfg.input_dim}",
        "hidden_dims=" + ",".join(str(h) for h in cfg.hidden_dims),
        f"code_length={cfg.code_length}",
        f"num_categories={cfg.num_categories}",
        f"num_attributes={cfg.num_attributes}",
        f"hidden_activation={cfg.hidden_activation}",
    ]


def save_checkpoint(model: DphModel, path) -> None:
    header = CHECKPOINT_MAGIC + b"\n" + "\n".join(_config_lines(model.config)).encode() + b"\n\n"
    body = b"".join(model.params[name].astype("<f8").tobytes() for name, _ in model.config.param_shapes())
    Path(path).write_bytes(header + body)


def load_checkpoint(path) -> DphModel:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC + b"\n"):
        raise FormatError(f"{path}: not a dph-model v1 checkpoint")
    head, sep, body = raw.partition(b"\n\n")
    if not sep:
        raise FormatError(f"{path}: unterminated checkpoint header")
    fields = {}
    for line in head.decode().splitlines()[1:]:
        key, eq, val = line.partition("=")
        if not eq:
            raise FormatError(f"{path}: malformed header line {line!r}")
        fields[key] = val
    try:
        cfg = ModelConfig(
            input_dim=int(fields["input_dim"]),
            hidden_dims=tuple(int(h) for h in fields["hidden_dims"].split(",") if h),
            code_length=int(fields["code_length"]),
            num_categories=int(fields["num_categories"]),
            num_attributes=int(fields["num_attributes"]),
            hidden_activation=fields["hidden_activation"],
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad checkpoint header ({exc})") from None
    params = {}
    offset = 0
    for name, shape in cfg.param_shapes():
        count = int(np.prod(shape))
        nbytes = 8 * count
        if offset + nbytes > len(body):
            raise FormatError(f"{path}: truncated at parameter {name} (body offset {offset})")
        params[name] = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(body):
        raise FormatError(f"{path}: {len(body) - offset} trailing bytes after parameters")
    return DphModel(cfg, params)
