"""Optimization loop: Adam, truncated BPTT, evaluation, checkpoints.

Training cuts the corpus into parallel streams, carries the hidden
state across chunk boundaries with gradient flow severed, and applies
global-norm clipping plus Adam after every chunk. Metrics go to an
append-only CSV; checkpoints capture parameters, optimizer slots, RNG
state, and the carried state, so a resumed run is bit-identical to an
uninterrupted one.
"""

from __future__ import annotations

import io
import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .cells import functions_per_step
from .data import CharCorpus, chunks_per_epoch, make_streams
from .errors import CheckpointError, ConfigError, DataError
from .models import AspectClassifier, CharLM
from .numerics import ParamStore, Tape, Tensor, recording
from .numerics import ops
from .numerics.autodiff import global_norm_clip, reverse_sweep
from .objective import LN2, bpc, combined_objective, disagreement_total, lm_loss

CHECKPOINT_MAGIC = b"MZUCKPT1"
CHECKPOINT_VERSION = 1
METRICS_HEADER = "step,split,loss_nats,bpc,dzone_mean,lr,elapsed_s"


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch: int = 256
    tbptt: int = 150
    clip: float = 5.0
    lam: float = 1.0
    max_epochs: int = 1
    max_steps: Optional[int] = None
    eval_every: int = 0            # steps between validation passes; 0 = per epoch
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dzone_per_token: bool = True   # scale the regularizer sum by 1/(tokens per chunk)
    eval_streams: int = 8
    eval_chunk: int = 128
    timing: bool = True            # write wall-clock seconds into the metrics CSV
    metrics_path: Optional[str] = None
    checkpoint_path: Optional[str] = None
    log_every: int = 1

    def __post_init__(self):
        for name in ("lr", "batch", "tbptt", "clip", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"TrainConfig.{name} must be positive")


def adam_update(store: ParamStore, grads: dict[str, np.ndarray],
                lr: float, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> None:
    """Standard Adam with bias correction, applied in place."""
    for name, tensor in store.items():
        grad = grads[name]
        if grad.shape != tensor.shape:
            raise ConfigError(
                f"adam_update: gradient for {name} has shape {grad.shape}, "
                f"parameter has {tensor.shape}")
        slots = store.slots(name)
        slots.step += 1
        slots.m *= beta1
        slots.m += (1.0 - beta1) * grad
        slots.v *= beta2
        slots.v += (1.0 - beta2) * grad * grad
        m_hat = slots.m / (1.0 - beta1 ** slots.step)
        v_hat = slots.v / (1.0 - beta2 ** slots.step)
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _stream_nats(ids: np.ndarray, model: CharLM, streams: int, chunk: int
                 ) -> tuple[float, int]:
    """Total cross-entropy (nats) and prediction count over stream chunks."""
    usable = len(ids) // streams - 1
    if usable < 1:
        raise DataError(
            f"split of {len(ids)} symbols cannot fill {streams} streams")
    chunk = min(chunk, usable)
    total, count = 0.0, 0
    state = model.initial_state(streams)
    for inputs, targets in make_streams(ids, streams, chunk):
        logits, state, _ = model.forward_chunk(inputs, state, training=False)
        n = targets.size
        total += lm_loss(logits, targets).item() * n
        count += n
        state = Tensor(state.data)   # no tape is active, but keep states plain
    return total, count


def evaluate_bpc(ids: np.ndarray, model: CharLM, streams: int = 1,
                 chunk: int = 256) -> float:
    """Average BPC over a split, state carried across the whole pass.

    `streams=1` scans the split strictly in order; larger values trade
    a few boundary resets for batched throughput.
    """
    total, count = _stream_nats(np.asarray(ids), model, streams, chunk)
    if count == 0:
        raise DataError("evaluate_bpc: split has no predictable symbols")
    return bpc(total / count)


def measure_dzone(ids: np.ndarray, model: CharLM, streams: int = 8,
                  chunk: int = 128) -> float:
    """Mean disagreement per (token, transform) over a split, in [-1, 0]."""
    m_count = functions_per_step(model.config.cell)
    if m_count == 0:
        return 0.0
    usable = len(ids) // streams - 1
    if usable < 1:
        raise DataError(
            f"split of {len(ids)} symbols cannot fill {streams} streams")
    chunk = min(chunk, usable)
    total, tokens = 0.0, 0
    state = model.initial_state(streams)
    for inputs, _targets in make_streams(np.asarray(ids), streams, chunk):
        _, state, terms = model.forward_chunk(inputs, state, training=False,
                                              collect_dzone=True)
        total += sum(float(t.data.sum()) for t in terms)
        tokens += inputs.size
        state = Tensor(state.data)
    if tokens == 0:
        raise DataError("measure_dzone: split has no full chunks")
    return total / (tokens * m_count)


def evaluate_by_length(corpus: CharCorpus, split: str, model: CharLM,
                       bucket_width: int = 10) -> list[dict]:
    """Per-line BPC bucketed by line length ((0,w], (w,2w], ...).

    Every line starts from a zero state; a line of n characters
    contributes n-1 predictions. Buckets with no predictions are
    omitted. Bucket nats recombine exactly to the whole-set per-line
    total.
    """
    if bucket_width < 1:
        raise ConfigError("bucket_width must be >= 1")
    ids = corpus.split(split)
    buckets: dict[int, list[float]] = {}
    for start, length in corpus.lines.get(split, []):
        if length < 2:
            continue
        line = ids[start:start + length]
        state = model.initial_state(1)
        logits, _, _ = model.forward_chunk(line[None, :-1], state, training=False)
        nats = lm_loss(logits, line[None, 1:]).item() * (length - 1)
        entry = buckets.setdefault((length - 1) // bucket_width, [0.0, 0, 0])
        entry[0] += nats
        entry[1] += length - 1
        entry[2] += 1
    table = []
    for index in sorted(buckets):
        nats, chars, lines = buckets[index]
        table.append({
            "bucket_low": index * bucket_width,
            "bucket_high": (index + 1) * bucket_width,
            "bpc": bpc(nats / chars),
            "chars": chars,
            "lines": lines,
        })
    return table


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config_json: str
    params: dict[str, np.ndarray]
    slot_m: dict[str, np.ndarray]
    slot_v: dict[str, np.ndarray]
    slot_steps: dict[str, int]
    rng_state_json: str
    extras: dict[str, np.ndarray]
    step: int
    best_valid_bpc: float
    version: int = CHECKPOINT_VERSION


def _write_str(out, text: str) -> None:
    raw = text.encode("utf-8")
    out.write(struct.pack("<I", len(raw)))
    out.write(raw)


def _write_tensor(out, name: str, array: np.ndarray) -> None:
    _write_str(out, name)
    out.write(struct.pack("<I", array.ndim))
    out.write(struct.pack(f"<{array.ndim}I", *array.shape))
    out.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("checkpoint file is truncated")
        piece = self.raw[self.pos:self.pos + n]
        self.pos += n
        return piece

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.text()
        rank = self.u32()
        shape = struct.unpack(f"<{rank}I", self.take(4 * rank)) if rank else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape)
        return name, data.astype(np.float32)


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    """Binary layout: magic, version, config, parameters (name/rank/
    extents/float32 data), Adam slots in the same order, RNG state,
    extra tensors (carried training state), step counter, best BPC.
    All integers little-endian 32-bit; tensor data little-endian
    float32."""
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", checkpoint.version))
    _write_str(out, checkpoint.config_json)
    names = list(checkpoint.params)
    out.write(struct.pack("<I", len(names)))
    for name in names:
        _write_tensor(out, name, checkpoint.params[name])
    for name in names:
        _write_tensor(out, name, checkpoint.slot_m[name])
        _write_tensor(out, name, checkpoint.slot_v[name])
        out.write(struct.pack("<I", checkpoint.slot_steps[name]))
    _write_str(out, checkpoint.rng_state_json)
    out.write(struct.pack("<I", len(checkpoint.extras)))
    for name in sorted(checkpoint.extras):
        _write_tensor(out, name, checkpoint.extras[name])
    out.write(struct.pack("<I", checkpoint.step))
    out.write(struct.pack("<d", checkpoint.best_valid_bpc))
    Path(path).write_bytes(out.getvalue())


def load_checkpoint(path) -> Checkpoint:
    reader = _Reader(Path(path).read_bytes())
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a checkpoint file")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    config_json = reader.text()
    n_params = reader.u32()
    params = dict(reader.tensor() for _ in range(n_params))
    slot_m, slot_v, slot_steps = {}, {}, {}
    for expected in params:
        name, m = reader.tensor()
        if name != expected:
            raise CheckpointError(f"{path}: slot order mismatch at {name!r}")
        _, v = reader.tensor()
        slot_m[name], slot_v[name] = m, v
        slot_steps[name] = reader.u32()
    rng_state_json = reader.text()
    extras = dict(reader.tensor() for _ in range(reader.u32()))
    step = reader.u32()
    best = reader.f64()
    if reader.pos != len(reader.raw):
        raise CheckpointError(f"{path}: {len(reader.raw) - reader.pos} trailing bytes")
    return Checkpoint(config_json=config_json, params=params, slot_m=slot_m,
                      slot_v=slot_v, slot_steps=slot_steps,
                      rng_state_json=rng_state_json, extras=extras, step=step,
                      best_valid_bpc=best, version=version)


def snapshot(store: ParamStore, config_json: str, rng: np.random.Generator,
             carried_state: np.ndarray, step: int, best_valid_bpc: float) -> Checkpoint:
    return Checkpoint(
        config_json=config_json,
        params={name: t.data.copy() for name, t in store.items()},
        slot_m={name: store.slots(name).m.copy() for name in store.names()},
        slot_v={name: store.slots(name).v.copy() for name in store.names()},
        slot_steps={name: store.slots(name).step for name in store.names()},
        rng_state_json=json.dumps(rng.bit_generator.state, sort_keys=True),
        extras={"carried_state": np.asarray(carried_state, dtype=np.float32)},
        step=step,
        best_valid_bpc=best_valid_bpc,
    )


def restore(store: ParamStore, checkpoint: Checkpoint) -> np.random.Generator:
    """Load parameters and slots back into the store; returns the RNG."""
    for name in store.names():
        if name not in checkpoint.params:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        store.set_values(name, checkpoint.params[name])
        slots = store.slots(name)
        slots.m[...] = checkpoint.slot_m[name]
        slots.v[...] = checkpoint.slot_v[name]
        slots.step = checkpoint.slot_steps[name]
    rng = np.random.default_rng(0)
    rng.bit_generator.state = json.loads(checkpoint.rng_state_json)
    return rng


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

class MetricsWriter:
    """Append-only CSV; rows are also kept in memory for the train log."""

    def __init__(self, path=None, timing: bool = True, append: bool = False):
        self.path = Path(path) if path else None
        self.timing = timing
        self.rows: list[tuple] = []
        self._start = time.perf_counter()
        if self.path and not (append and self.path.exists()):
            self.path.write_text(METRICS_HEADER + "\n")

    def elapsed(self) -> float:
        return time.perf_counter() - self._start

    def emit(self, step: int, split: str, loss_nats: float, dzone_mean: float,
             lr: float) -> None:
        row = (step, split, loss_nats, loss_nats / LN2, dzone_mean, lr,
               self.elapsed() if self.timing else 0.0)
        self.rows.append(row)
        if self.path:
            line = (f"{row[0]},{row[1]},{row[2]:.6f},{row[3]:.6f},"
                    f"{row[4]:.6f},{row[5]:.6g},{row[6]:.3f}\n")
            with self.path.open("a") as handle:
                handle.write(line)


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainLog:
    steps: int
    rows: list = field(default_factory=list)
    best_valid_bpc: float = math.inf
    final_valid_bpc: float = math.inf
    final_train_loss: float = math.inf
    final_dzone_mean: float = 0.0
    elapsed_s: float = 0.0


def train_chunk(model: CharLM, inputs: np.ndarray, targets: np.ndarray,
                state: Tensor, config: TrainConfig,
                rng: np.random.Generator) -> tuple[float, float, Tensor]:
    """One TBPTT chunk: forward, combined objective, sweep, clip, Adam.

    Returns (task nats, disagreement sum, severed next state).
    """
    store = model.store
    tape = Tape()
    collect = functions_per_step(model.config.cell) > 0
    with recording(tape):
        logits, new_state, terms = model.forward_chunk(
            inputs, state, rng=rng, training=True, collect_dzone=collect)
        task = lm_loss(logits, targets)
        dzone = disagreement_total(terms)
        if dzone is not None and config.dzone_per_token:
            regularizer = ops.scale(dzone, 1.0 / inputs.size)
        else:
            regularizer = dzone
        loss = combined_objective(task, regularizer, config.lam)
    grads = reverse_sweep(tape, loss, store)
    del tape
    global_norm_clip(grads, config.clip)
    adam_update(store, grads, config.lr, config.beta1, config.beta2, config.eps)
    dzone_value = float(dzone.data) if dzone is not None else 0.0
    return task.item(), dzone_value, Tensor(new_state.data)


def tbptt_train(corpus: CharCorpus, model: CharLM, config: TrainConfig,
                resume: Optional[Checkpoint] = None,
                config_json: Optional[str] = None) -> TrainLog:
    """Train over the corpus; returns the metric log and best results.

    The hidden state resets at epoch boundaries (streams restart) and
    is severed between chunks. With a fixed seed the run is
    deterministic; checkpoints make it resumable mid-epoch.
    """
    store = model.store
    per_epoch = chunks_per_epoch(len(corpus.train), config.batch, config.tbptt)
    if per_epoch == 0:
        raise DataError(
            f"training split of {len(corpus.train)} symbols is too short for "
            f"batch={config.batch} x tbptt={config.tbptt}; reduce either")
    if config_json is None:
        config_json = json.dumps(
            {k: v for k, v in vars(config).items()
             if isinstance(v, (int, float, bool, str, type(None)))},
            sort_keys=True)
    m_count = functions_per_step(model.config.cell)
    tokens_per_chunk = config.batch * config.tbptt

    if resume is not None:
        rng = restore(store, resume)
        step = resume.step
        best = resume.best_valid_bpc
        carried = Tensor(resume.extras["carried_state"].astype(store.dtype))
    else:
        rng = np.random.default_rng(config.seed)
        step = 0
        best = math.inf
        carried = model.initial_state(config.batch)

    writer = MetricsWriter(config.metrics_path, timing=config.timing,
                           append=resume is not None)
    log = TrainLog(steps=step)
    start = time.perf_counter()
    target_steps = config.max_steps if config.max_steps is not None \
        else config.max_epochs * per_epoch

    last_eval_step = -1

    def run_eval(at_step):
        nonlocal best, last_eval_step
        last_eval_step = at_step
        valid_bpc = evaluate_bpc(corpus.valid, model, streams=config.eval_streams,
                                 chunk=config.eval_chunk)
        dz = measure_dzone(corpus.valid, model, streams=config.eval_streams,
                           chunk=config.eval_chunk) if m_count else 0.0
        writer.emit(at_step, "valid", valid_bpc * LN2, dz, config.lr)
        improved = valid_bpc < best
        if improved:
            best = valid_bpc
        if config.checkpoint_path:
            ckpt = snapshot(store, config_json, rng, carried.data, at_step, best)
            save_checkpoint(config.checkpoint_path, ckpt)
            if improved:
                save_checkpoint(str(config.checkpoint_path) + ".best", ckpt)
        return valid_bpc, dz

    final_valid = math.inf
    final_dz = 0.0
    epoch = step // per_epoch
    while step < target_steps and epoch < config.max_epochs:
        skip = step - epoch * per_epoch   # nonzero only on a resumed epoch
        if skip == 0:
            carried = model.initial_state(config.batch)
        for index, (inputs, targets) in enumerate(
                make_streams(corpus.train, config.batch, config.tbptt)):
            if index < skip:
                continue
            task, dzone_sum, carried = train_chunk(
                model, inputs, targets, carried, config, rng)
            step += 1
            dz_mean = dzone_sum / (tokens_per_chunk * m_count) if m_count else 0.0
            if step % config.log_every == 0:
                writer.emit(step, "train", task, dz_mean, config.lr)
            log.final_train_loss = task
            if config.eval_every and step % config.eval_every == 0:
                final_valid, final_dz = run_eval(step)
            if step >= target_steps:
                break
        else:
            if not config.eval_every:
                final_valid, final_dz = run_eval(step)
        epoch += 1

    if last_eval_step != step:
        final_valid, final_dz = run_eval(step)
    log.steps = step
    log.rows = writer.rows
    log.best_valid_bpc = best
    log.final_valid_bpc = final_valid
    log.final_dzone_mean = final_dz
    log.elapsed_s = time.perf_counter() - start
    return log


# ---------------------------------------------------------------------------
# aspect-classifier training
# ---------------------------------------------------------------------------

@dataclass
class AspectTrainConfig:
    lr: float = 0.001
    batch: int = 16
    epochs: int = 3
    clip: float = 5.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def train_aspect_classifier(dataset, model: AspectClassifier,
                            config: AspectTrainConfig) -> list[float]:
    """Minibatch Adam over per-example cross-entropy; returns epoch losses."""
    if len(dataset) == 0:
        raise DataError("train_aspect_classifier: empty dataset")
    rng = np.random.default_rng(config.seed)
    store = model.store
    epoch_losses = []
    for _ in range(config.epochs):
        order = rng.permutation(len(dataset.examples))
        total = 0.0
        for lo in range(0, len(order), config.batch):
            batch = [dataset.examples[i] for i in order[lo:lo + config.batch]]
            tape = Tape()
            with recording(tape):
                losses = []
                for example in batch:
                    logits = model.example_logits(example.tokens,
                                                  example.aspect_tokens,
                                                  rng=rng, training=True)
                    losses.append(ops.cross_entropy_from_logits(
                        logits, np.array([example.label])))
                loss = ops.scale(_sum_tensors(losses), 1.0 / len(losses))
            grads = reverse_sweep(tape, loss, store)
            del tape
            global_norm_clip(grads, config.clip)
            adam_update(store, grads, config.lr, config.beta1, config.beta2,
                        config.eps)
            total += loss.item() * len(batch)
        epoch_losses.append(total / len(dataset.examples))
    return epoch_losses


def _sum_tensors(tensors):
    total = tensors[0]
    for t in tensors[1:]:
        total = ops.add(total, t)
    return total


def evaluate_aspect_accuracy(dataset, model: AspectClassifier) -> float:
    if len(dataset) == 0:
        raise DataError("evaluate_aspect_accuracy: empty dataset")
    correct = 0
    for example in dataset.examples:
        logits = model.example_logits(example.tokens, example.aspect_tokens,
                                      training=False)
        correct += int(np.argmax(logits.data) == example.label)
    return correct / len(dataset.examples)
