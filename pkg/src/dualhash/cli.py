"""``dualhash`` command line: gen-data, train, encode, query, eval, ablation.

Settings come from a flat ``key = value`` config file (``--config``) with
command-line flags taking precedence.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import ABLATION_MODES, SynthConfig, apply_ablation_mask, generate_synthetic, load_dataset, save_dataset
from .errors import ConfigError, DualHashError
from .evaluation import evaluate, run_ablation, write_ablation_csv
from .index import build_index, load_index, save_index
from .model import DphModel, ModelConfig, TrainConfig, load_checkpoint, save_checkpoint, train
from .retrieval import AttrQuery, make_task2_query, task1_category, task2_attribute, task3_combined

logger = logging.getLogger("dualhash")

DEFAULT_TOP = 10


@dataclass
class RunConfig:
    # data
    num_categories: int = 20
    feature_dim: int = 32
    num_attributes: int = 8
    samples_per_category: int = 100
    cluster_spread: float = 1.5
    attribute_noise_rate: float = 0.0
    partition_fractions: tuple[float, ...] = (0.1, 0.6, 0.1, 0.2)
    # model
    hidden_dims: tuple[int, ...] = (64,)
    bits: int = 32
    # training
    alpha: float = 0.1
    batch_size: int = 200
    learning_rate: float = 0.1
    lr_multiplier_pretrained: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    mode: str = "B+A+C"
    # seeds
    seed: int = 0
    init_seed: Optional[int] = None
    train_seed: Optional[int] = None
    eval_seed: Optional[int] = None

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            self.num_categories, self.feature_dim, self.num_attributes, self.samples_per_category,
            self.cluster_spread, self.attribute_noise_rate, tuple(self.partition_fractions), self.seed,
        )

    def model_config(self, input_dim: int, num_categories: int, num_attributes: int) -> ModelConfig:
        return ModelConfig(input_dim, tuple(self.hidden_dims), self.bits, num_categories, num_attributes)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            self.alpha, self.batch_size, self.learning_rate, self.lr_multiplier_pretrained,
            self.momentum, self.weight_decay, self.epochs, self._seed(self.train_seed),
        )

    def _seed(self, value: Optional[int]) -> int:
        return self.seed if value is None else value

    @property
    def initialization_seed(self) -> int:
        return self._seed(self.init_seed)

    @property
    def evaluation_seed(self) -> int:
        return self._seed(self.eval_seed)


def _coerce(field: dataclasses.Field, raw: str):
    name = field.name
    default = field.default
    try:
        if name in ("partition_fractions",):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if name == "hidden_dims":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if name.endswith("seed"):
            return None if raw.lower() in ("", "none") else int(raw)
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r}") from None


def parse_config_text(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, val = line.partition("=")
        key = key.strip().replace("-", "_")
        if not eq:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        if key not in fields:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(fields[key], val.strip())
    return dataclasses.replace(base or RunConfig(), **values)


def load_run_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = parse_config_text(Path(args.config).read_text(encoding="utf-8"), cfg)
    for item in getattr(args, "set", None) or []:
        cfg = parse_config_text(item, cfg)
    overrides = {}
    for key in ("seed", "bits", "alpha", "mode", "epochs"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    cfg = dataclasses.replace(cfg, **overrides)
    if cfg.mode not in ABLATION_MODES:
        raise ConfigError(f"unknown mode {cfg.mode!r}; expected one of {ABLATION_MODES}")
    return cfg


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args)
    dataset = generate_synthetic(cfg.synth_config())
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    dataset = load_dataset(args.data)
    model = DphModel.initialize(
        cfg.model_config(dataset.feature_dim, dataset.num_categories, dataset.num_attributes),
        cfg.initialization_seed,
    )
    pool = apply_ablation_mask(dataset, cfg.mode)
    log = train(model, pool, cfg.train_config(), mode=cfg.mode)
    save_checkpoint(model, args.out)
    if args.log:
        log.write_csv(args.log)
    if log.epochs:
        print(f"trained {len(log)} epochs on {len(pool)} samples ({cfg.mode}); final loss {log.epochs[-1].total:.6f}")
    else:
        print(f"no training epochs; wrote initialization to {args.out}")
    return 0


def cmd_encode(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    index = build_index(model, dataset.split(args.split))
    save_index(index, args.out)
    print(f"indexed {len(index)} samples ({index.k} bits) into {args.out}")
    return 0


def _parse_clauses(text: str) -> AttrQuery:
    clauses = []
    for tok in text.split(","):
        j, eq, v = tok.partition("=")
        try:
            clauses.append((int(j), int(v)))
        except ValueError:
            raise ConfigError(f"attribute clause {tok!r} must look like <index>=<0|1>") from None
    return AttrQuery(tuple(clauses))


def cmd_query(args) -> int:
    cfg = load_run_config(args)
    index = load_index(args.index)
    if args.query_id is None:
        raise ConfigError("--query-id is required")
    code = index.code(args.query_id)
    if args.task == 1:
        result = task1_category(index, code, exclude_id=args.query_id)
    elif args.task == 2:
        if args.attrs:
            query = _parse_clauses(args.attrs)
        else:
            query = make_task2_query(index, args.query_id, np.random.default_rng(cfg.evaluation_seed))
        print("query: " + " ".join(f"attr{j}={v}" for j, v in query.clauses))
        result = task2_attribute(index, query, exclude_id=args.query_id)
    else:
        flip = args.flip_attr
        if flip is None:
            absent = np.flatnonzero(index.predicted_attributes()[index.position(args.query_id)] == 0)
            if len(absent) == 0:
                raise ConfigError(f"query {args.query_id} has no predicted-absent attribute")
            flip = int(absent[0])
        print(f"query: attr{flip}=1")
        result = task3_combined(index, code, args.query_id, flip)
    for rank, (sid, score) in enumerate(result.top(args.top), start=1):
        print(f"{rank}\t{sid}\t{score}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    report = evaluate(
        model, dataset.split("test"), seed=cfg.evaluation_seed,
        metadata={"data_seed": cfg.seed, "mode": cfg.mode},
    )
    report.write(args.out)
    sys.stdout.write(report.to_text())
    return 0


def cmd_ablation(args) -> int:
    cfg = load_run_config(args)
    dataset = load_dataset(args.data)
    model_cfg = cfg.model_config(dataset.feature_dim, dataset.num_categories, dataset.num_attributes)
    rows = run_ablation(dataset, model_cfg, cfg.train_config(), init_seed=cfg.initialization_seed)
    write_ablation_csv(rows, args.out)
    for r in rows:
        print(f"{r.mode:6s}  mAP {r.map:.4f}  mean F1 {r.mean_f1:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualhash", description="Dual-purpose hashing toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--bits", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--mode", choices=ABLATION_MODES)
        p.add_argument("--epochs", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        if out_required is not None:
            p.add_argument("--out", required=out_required)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on one ablation pool")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--log", help="write per-epoch loss CSV here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a dataset split into an index file")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="all", choices=("all", "both", "category", "attribute", "test"))
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("query", help="run one retrieval query against an index")
    common(p, out_required=None)
    p.add_argument("--index", required=True)
    p.add_argument("--task", type=int, choices=(1, 2, 3), default=1)
    p.add_argument("--query-id", type=int)
    p.add_argument("--attrs", help="task 2 clauses, e.g. 0=1,3=0 (default: random from --seed)")
    p.add_argument("--flip-attr", type=int, help="task 3 attribute absent in the query")
    p.add_argument("--top", type=int, default=DEFAULT_TOP)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="leave-one-out evaluation on the test split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablation", help="train and score the four data settings")
    common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (DualHashError, OSError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"dualhash {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
