"""Command-line interface: train, eval, analyze, and bench.

Configuration merges a flat key=value file with command-line flags
(flags win). Relative data paths resolve against $MZU_DATA_DIR when
set. Exit codes: 0 success, 1 usage/config, 2 data, 3 runtime numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .analysis import export_map, relevance_map, zone_relevance_map
from .cells import CellConfig
from .data import (
    build_hds,
    load_aspect_tsv,
    load_char_corpus,
    load_char_corpus_single,
)
from .errors import CheckpointError, ConfigError, DataError, MzuError, ShapeError
from .models import AspectClassifier, AspectModelConfig, CharLM, CharLMConfig
from .numerics import ParamStore
from .training import (
    AspectTrainConfig,
    TrainConfig,
    evaluate_aspect_accuracy,
    evaluate_bpc,
    evaluate_by_length,
    load_checkpoint,
    restore,
    tbptt_train,
    train_aspect_classifier,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


@dataclass
class RunConfig:
    """Flat run description; every field has a flag of the same name."""

    task: str = "char"             # char | aspect
    model: str = "mzu"             # mzu | gru
    backend: str = "cap"           # sat | gcn | cap
    zones: int = 4
    out_capsules: int = 2
    routing_iters: int = 3
    hidden: int = 128
    filter_size: int = 160
    embed_size: int = 64
    depth: int = 1
    share_depth: bool = False
    ablation: str = "none"
    lam: float = 1.0
    dropout: float = 0.5
    layer_norm: bool = True
    lr: float = 0.001
    batch: int = 256
    tbptt: int = 150
    clip: float = 5.0
    seed: int = 0
    epochs: int = 1
    max_steps: Optional[int] = None
    eval_every: int = 0
    eval_streams: int = 8
    timing: bool = True
    hds: bool = False
    train_path: Optional[str] = None
    valid_path: Optional[str] = None
    test_path: Optional[str] = None
    data: Optional[str] = None
    splits: str = "0.9,0.05,0.05"
    checkpoint: Optional[str] = None
    metrics: Optional[str] = None

    def cell_config(self, input_width: int) -> CellConfig:
        return CellConfig(
            kind=self.model,
            input_width=input_width,
            state_width=self.hidden,
            composition=self.backend,
            zone_count=self.zones,
            out_count=self.out_capsules if self.backend == "cap" else None,
            routing_iters=self.routing_iters,
            filter_width=self.filter_size,
            transition_depth=self.depth,
            share_depth_params=self.share_depth,
            ablation=self.ablation,
            dropout=self.dropout,
            layer_norm=self.layer_norm,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, batch=self.batch, tbptt=self.tbptt, clip=self.clip,
            lam=self.lam, max_epochs=self.epochs, max_steps=self.max_steps,
            eval_every=self.eval_every, seed=self.seed,
            eval_streams=self.eval_streams, timing=self.timing,
            metrics_path=self.metrics, checkpoint_path=self.checkpoint,
        )


_BOOL_FIELDS = {"share_depth", "layer_norm", "timing", "hds"}
_INT_FIELDS = {"zones", "out_capsules", "routing_iters", "hidden", "filter_size",
               "embed_size", "depth", "seed", "epochs", "max_steps", "eval_every",
               "eval_streams", "batch", "tbptt"}
_FLOAT_FIELDS = {"lam", "dropout", "lr", "clip"}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _BOOL_FIELDS:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config key {key}: expected a boolean, got {raw!r}")
    if key in _INT_FIELDS:
        return int(raw)
    if key in _FLOAT_FIELDS:
        return float(raw)
    return raw


def read_config_file(path) -> dict:
    """Flat key=value lines; blank lines and #-comments ignored."""
    values = {}
    fields = set(RunConfig.__dataclass_fields__)
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, _, raw = stripped.partition("=")
        key = key.strip().replace("-", "_")
        if key == "lambda":
            key = "lam"
        if key not in fields:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def _resolve_path(value: Optional[str]) -> Optional[str]:
    if value is None:
        return None
    path = Path(value)
    if not path.is_absolute() and not path.exists():
        base = os.environ.get("MZU_DATA_DIR")
        if base and (Path(base) / path).exists():
            return str(Path(base) / path)
    return str(path)


def build_run_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for key in RunConfig.__dataclass_fields__:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    config = RunConfig(**values)
    for key in ("train_path", "valid_path", "test_path", "data"):
        setattr(config, key, _resolve_path(getattr(config, key)))
    validate_run_config(config)
    return config


def validate_run_config(config: RunConfig) -> None:
    """Every structural constraint is checked before any allocation."""
    if config.task not in ("char", "aspect"):
        raise ConfigError(f"task must be char or aspect, got {config.task!r}")
    if config.model not in ("mzu", "gru"):
        raise ConfigError(f"model must be mzu or gru, got {config.model!r}")
    if config.model == "mzu":
        if config.backend not in ("sat", "gcn", "cap"):
            raise ConfigError(f"backend must be sat, gcn or cap, got {config.backend!r}")
        if config.hidden % config.zones != 0:
            raise ConfigError(
                f"zones: {config.zones} does not divide hidden={config.hidden}")
        if config.backend == "cap":
            if config.hidden % config.out_capsules != 0:
                raise ConfigError(
                    f"out_capsules: {config.out_capsules} does not divide "
                    f"hidden={config.hidden}")
            if config.routing_iters < 1:
                raise ConfigError("routing_iters must be >= 1")
    if not 0.0 <= config.dropout < 1.0:
        raise ConfigError(f"dropout must lie in [0, 1), got {config.dropout}")
    for name in ("hidden", "embed_size", "filter_size", "batch", "tbptt", "epochs"):
        if getattr(config, name) <= 0:
            raise ConfigError(f"{name} must be positive")
    # constructing the cell config re-checks zone arithmetic
    config.cell_config(config.embed_size)


def _load_corpus(config: RunConfig):
    if config.train_path and config.valid_path and config.test_path:
        return load_char_corpus(config.train_path, config.valid_path,
                                config.test_path)
    if config.data:
        fractions = tuple(float(f) for f in config.splits.split(","))
        return load_char_corpus_single(config.data, fractions)
    raise DataError("char task needs --train/--valid/--test paths or --data")


def _build_char_model(config: RunConfig, vocab_size: int) -> CharLM:
    store = ParamStore()
    model_config = CharLMConfig(
        vocab_size=vocab_size,
        embed_width=config.embed_size,
        cell=config.cell_config(config.embed_size),
    )
    return CharLM(store, model_config, np.random.default_rng(config.seed))


def run_train(config: RunConfig) -> int:
    if config.task == "aspect":
        return _run_train_aspect(config)
    corpus = _load_corpus(config)
    model = _build_char_model(config, corpus.vocab_size)
    print(f"model: {config.model}/{config.backend} hidden={config.hidden} "
          f"zones={config.zones} depth={config.depth} "
          f"parameters={model.store.total_parameters():,}")
    log = tbptt_train(corpus, model, config.train_config(),
                      config_json=json.dumps(asdict(config), sort_keys=True))
    test_bpc = evaluate_bpc(corpus.test, model, streams=config.eval_streams,
                            chunk=min(config.tbptt, 256))
    print(f"steps: {log.steps}  best valid BPC: {log.best_valid_bpc:.4f}  "
          f"test BPC: {test_bpc:.4f}")
    return EXIT_OK


def _run_train_aspect(config: RunConfig) -> int:
    if not config.train_path:
        raise DataError("aspect task needs --train pointing at a TSV file")
    dataset = load_aspect_tsv(config.train_path)
    if config.hds:
        dataset = build_hds(dataset)
    if len(dataset) == 0:
        raise DataError("aspect dataset is empty")
    store = ParamStore()
    model_config = AspectModelConfig(
        vocab_size=max(dataset.vocab.values()) + 1,
        embed_width=config.embed_size,
        cell=config.cell_config(config.embed_size),
    )
    model = AspectClassifier(store, model_config, np.random.default_rng(config.seed))
    print(f"aspect model parameters={store.total_parameters():,} "
          f"examples={len(dataset)}")
    losses = train_aspect_classifier(dataset, model, AspectTrainConfig(
        lr=config.lr, batch=config.batch, epochs=config.epochs,
        clip=config.clip, seed=config.seed))
    accuracy = evaluate_aspect_accuracy(dataset, model)
    print(f"final epoch loss: {losses[-1]:.4f}  train accuracy: {accuracy:.4f}")
    return EXIT_OK


def _restore_char_model(overrides: dict) -> tuple[RunConfig, CharLM]:
    """Rebuild a model from a checkpoint's config echo.

    `overrides` holds only flags the user actually passed; everything
    else (including data paths and split fractions) comes from the
    saved configuration so evaluation sees the training-time corpus.
    """
    checkpoint_path = overrides.get("checkpoint")
    if not checkpoint_path:
        raise DataError("--checkpoint is required")
    if not Path(checkpoint_path).exists():
        raise DataError(f"checkpoint {checkpoint_path} does not exist")
    checkpoint = load_checkpoint(checkpoint_path)
    saved = RunConfig(**json.loads(checkpoint.config_json))
    for key in ("train_path", "valid_path", "test_path", "data", "splits",
                "metrics"):
        if key in overrides:
            setattr(saved, key, overrides[key])
    for key in ("train_path", "valid_path", "test_path", "data"):
        setattr(saved, key, _resolve_path(getattr(saved, key)))
    saved.checkpoint = checkpoint_path
    vocab_size = checkpoint.params["embed"].shape[0]
    model = _build_char_model(saved, vocab_size)
    restore(model.store, checkpoint)
    return saved, model


def _provided_overrides(args: argparse.Namespace) -> dict:
    keys = ("train_path", "valid_path", "test_path", "data", "splits",
            "checkpoint", "metrics")
    return {k: getattr(args, k) for k in keys
            if getattr(args, k, None) is not None}


def run_eval(overrides: dict, by_length: bool = False, split: str = "valid",
             bucket_width: int = 10, out: Optional[str] = None) -> int:
    saved, model = _restore_char_model(overrides)
    corpus = _load_corpus(saved)
    if corpus.vocab_size != model.config.vocab_size:
        raise ShapeError(
            f"corpus vocabulary ({corpus.vocab_size}) does not match the "
            f"checkpoint ({model.config.vocab_size})")
    if by_length:
        table = evaluate_by_length(corpus, split, model, bucket_width=bucket_width)
        lines = ["bucket_low,bucket_high,bpc,chars,lines"]
        lines += [f"{r['bucket_low']},{r['bucket_high']},{r['bpc']:.6f},"
                  f"{r['chars']},{r['lines']}" for r in table]
        text = "\n".join(lines) + "\n"
        if out:
            Path(out).write_text(text)
        print(text, end="")
        return EXIT_OK
    value = evaluate_bpc(corpus.split(split), model,
                         streams=saved.eval_streams, chunk=min(saved.tbptt, 256))
    print(f"{split} BPC: {value:.4f}")
    return EXIT_OK


def run_analyze(overrides: dict, text: Optional[str], text_file: Optional[str],
                last: int, fmt: str, out_dir: str, per_zone: bool) -> int:
    saved, model = _restore_char_model(overrides)
    corpus = _load_corpus(saved)
    if text_file:
        text = Path(text_file).read_text(encoding="latin-1")
    if not text:
        raise DataError("analyze needs --text or --text-file")
    ids = corpus.encode(text)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    suffix = "pgm" if fmt == "pgm" else "csv"
    full = relevance_map(ids, model, last, chars=text)
    export_map(full, out / f"relevance.{suffix}", format=fmt)
    written = [out / f"relevance.{suffix}"]
    if per_zone:
        for zone_map in zone_relevance_map(ids, model, last, chars=text):
            target = out / f"relevance_zone{zone_map.zone}.{suffix}"
            export_map(zone_map, target, format=fmt)
            written.append(target)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def run_bench(config: RunConfig, steps: int) -> int:
    vocab = 27
    model = _build_char_model(config, vocab)
    count = model.store.total_parameters()
    print(f"{config.model}/{config.backend} hidden={config.hidden} "
          f"filter={config.filter_size} depth={config.depth} "
          f"share_depth={config.share_depth}")
    print(f"parameters: {count:,} ({count / 1e6:.2f}M)")
    if steps <= 0:
        print("steps/sec: 0.0  chars/sec: 0.0")
        return EXIT_OK
    rng = np.random.default_rng(config.seed)
    ids = rng.integers(0, vocab, size=config.batch * (config.tbptt + 1) * 2,
                       dtype=np.int32)
    from .data import make_streams
    from .training import train_chunk
    train = config.train_config()
    state = model.initial_state(config.batch)
    chunks = list(make_streams(ids, config.batch, config.tbptt))
    start = time.perf_counter()
    done = 0
    while done < steps:
        inputs, targets = chunks[done % len(chunks)]
        _, _, state = train_chunk(model, inputs, targets, state, train, rng)
        done += 1
    elapsed = time.perf_counter() - start
    print(f"steps/sec: {done / elapsed:.3f}  "
          f"chars/sec: {done * config.batch * config.tbptt / elapsed:,.0f}")
    return EXIT_OK


def _add_run_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--task", choices=["char", "aspect"])
    parser.add_argument("--model", choices=["mzu", "gru"])
    parser.add_argument("--backend", choices=["sat", "gcn", "cap"])
    parser.add_argument("--zones", type=int)
    parser.add_argument("--out-capsules", type=int, dest="out_capsules")
    parser.add_argument("--routing-iters", type=int, dest="routing_iters")
    parser.add_argument("--hidden", type=int)
    parser.add_argument("--filter-size", type=int, dest="filter_size")
    parser.add_argument("--embed-size", type=int, dest="embed_size")
    parser.add_argument("--depth", type=int)
    parser.add_argument("--share-depth", action="store_const", const=True,
                        dest="share_depth")
    parser.add_argument("--ablation", choices=["none", "regular_gate", "regular_trans"])
    parser.add_argument("--lambda", type=float, dest="lam")
    parser.add_argument("--dropout", type=float)
    parser.add_argument("--no-layer-norm", action="store_const", const=False,
                        dest="layer_norm")
    parser.add_argument("--lr", type=float)
    parser.add_argument("--batch", type=int)
    parser.add_argument("--tbptt", type=int)
    parser.add_argument("--clip", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--max-steps", type=int, dest="max_steps")
    parser.add_argument("--eval-every", type=int, dest="eval_every")
    parser.add_argument("--eval-streams", type=int, dest="eval_streams")
    parser.add_argument("--no-timing", action="store_const", const=False,
                        dest="timing",
                        help="write 0.0 elapsed seconds for reproducible metrics")
    parser.add_argument("--hds", action="store_const", const=True,
                        help="aspect task: train on the hard multi-label subset")
    parser.add_argument("--train", dest="train_path")
    parser.add_argument("--valid", dest="valid_path")
    parser.add_argument("--test", dest="test_path")
    parser.add_argument("--data", help="single corpus file split by --splits")
    parser.add_argument("--splits")
    parser.add_argument("--checkpoint")
    parser.add_argument("--metrics")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mzu",
        description="Multi-zone recurrent models: train, evaluate, analyze, bench.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a character LM or aspect classifier")
    _add_run_config_flags(train)

    evaluate = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_run_config_flags(evaluate)
    evaluate.add_argument("--split", default="valid",
                          choices=["train", "valid", "test"])
    evaluate.add_argument("--by-length", action="store_true")
    evaluate.add_argument("--bucket-width", type=int, default=10)
    evaluate.add_argument("--out", help="write the bucket table to this CSV")

    analyze = sub.add_parser("analyze", help="emit relevance maps for a text")
    _add_run_config_flags(analyze)
    analyze.add_argument("--text")
    analyze.add_argument("--text-file")
    analyze.add_argument("--last", type=int, default=5)
    analyze.add_argument("--format", default="pgm", choices=["pgm", "csv"])
    analyze.add_argument("--out-dir", default="analysis")
    analyze.add_argument("--per-zone", action="store_true")

    bench = sub.add_parser("bench", help="throughput and parameter accounting")
    _add_run_config_flags(bench)
    bench.add_argument("--steps", type=int, default=5)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "eval":
            return run_eval(_provided_overrides(args), by_length=args.by_length,
                            split=args.split, bucket_width=args.bucket_width,
                            out=args.out)
        if args.command == "analyze":
            return run_analyze(_provided_overrides(args), args.text,
                               args.text_file, args.last, args.format,
                               args.out_dir, args.per_zone)
        config = build_run_config(args)
        if args.command == "train":
            return run_train(config)
        if args.command == "bench":
            return run_bench(config, args.steps)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as error:
        print(f"config error: {error}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as error:
        print(f"data error: {error}", file=sys.stderr)
        return EXIT_DATA
    except (ShapeError, FloatingPointError, MzuError) as error:
        print(f"runtime error: {error}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
