"""Single-process pretraining: AdamW, warmup + cosine schedule, clipping,
periodic checkpoints and checkpoint averaging."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Batch
from .errors import ConfigError, FormatError, NumericError, ScheduleError
from .model import Checkpoint, evaluate_loss, loss_and_grads


@dataclass(frozen=True)
class TrainSchedule:
    max_lr: float
    warmup_init_lr: float = 1e-6
    warmup_steps: int = 5000
    total_steps: int = 350_000
    final_lr_fraction: float = 0.1
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        if not (self.max_lr >= 0 and self.warmup_init_lr >= 0):
            raise ScheduleError("learning rates must be non-negative")
        if self.warmup_init_lr > self.max_lr:
            raise ScheduleError("warmup_init_lr exceeds max_lr")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ScheduleError("need 0 <= warmup_steps < total_steps")
        if not 0 < self.final_lr_fraction <= 1:
            raise ScheduleError("final_lr_fraction must lie in (0, 1]")
        if self.weight_decay < 0 or not self.clip_norm > 0:
            raise ScheduleError("weight_decay must be >= 0 and clip_norm > 0")

    @property
    def min_lr(self) -> float:
        return self.final_lr_fraction * self.max_lr


def lr_at(step: int, sched: TrainSchedule) -> float:
    """Linear warmup from warmup_init_lr to max_lr, then cosine down to min_lr.

    Both branches are written as convex combinations so the endpoints come
    out exactly: max_lr at the end of warmup, min_lr at total_steps.
    """
    if not 0 <= step <= sched.total_steps:
        raise ScheduleError(f"step {step} outside [0, {sched.total_steps}]")
    if step < sched.warmup_steps:
        t = step / sched.warmup_steps
        return sched.warmup_init_lr * (1.0 - t) + sched.max_lr * t
    p = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    w = 0.5 * (1.0 + math.cos(math.pi * p))
    return sched.max_lr * w + sched.min_lr * (1.0 - w)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float):
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient")
    if norm > clip_norm:
        scale = clip_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return grads, norm


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, tensors: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(t) for k, t in tensors.items()}, {k: np.zeros_like(t) for k, t in tensors.items()})


def decays(name: str) -> bool:
    """Weight decay applies to projection matrices only, not gains or the embedding."""
    return not (name.endswith("_norm") or name == "tok_embed")


def adamw_update(param, grad, m, v, step: int, lr: float, sched: TrainSchedule, decay: bool):
    """One AdamW step (``step`` counts from 1). Returns new (param, m, v)."""
    b1, b2 = sched.adam_beta1, sched.adam_beta2
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    update = m_hat / (np.sqrt(v_hat) + sched.adam_epsilon)
    if decay and sched.weight_decay:
        update = update + sched.weight_decay * param
    return param - lr * update, m, v


@dataclass
class StepStats:
    step: int
    lr: float
    loss: float
    grad_norm: float


def train_step(
    ckpt: Checkpoint,
    opt: OptimizerState,
    batch: Union[Batch, Sequence[Batch]],
    sched: TrainSchedule,
) -> StepStats:
    """Forward, backward, clip and AdamW-update ``ckpt`` in place.

    A sequence of batches is treated as gradient accumulation: gradients
    are averaged before clipping. Nothing is written unless every tensor
    update is finite.
    """
    batches = [batch] if isinstance(batch, Batch) else list(batch)
    if not batches:
        raise ConfigError("train_step needs at least one batch")
    loss, grads = loss_and_grads(ckpt.tensors, ckpt.plan, batches[0].inputs, batches[0].targets)
    for extra in batches[1:]:
        l2, g2 = loss_and_grads(ckpt.tensors, ckpt.plan, extra.inputs, extra.targets)
        loss += l2
        for k in grads:
            grads[k] += g2[k]
    if len(batches) > 1:
        loss /= len(batches)
        grads = {k: g / len(batches) for k, g in grads.items()}
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss at step {opt.step}")
    grads, norm = clip_gradients(grads, sched.clip_norm)
    lr = lr_at(min(opt.step, sched.total_steps), sched)
    t = opt.step + 1
    staged = {}
    for name, param in ckpt.tensors.items():
        p, m, v = adamw_update(param, grads[name], opt.m[name], opt.v[name], t, lr, sched, decays(name))
        if not np.all(np.isfinite(p)):
            raise NumericError(f"non-finite update for {name}")
        staged[name] = (p.astype(param.dtype, copy=False), m, v)
    for name, (p, m, v) in staged.items():
        ckpt.tensors[name][...] = p
        opt.m[name], opt.v[name] = m, v
    stats = StepStats(opt.step, lr, loss, norm)
    opt.step = t
    return stats


def mean_checkpoint(ckpts: Sequence[Checkpoint]) -> Checkpoint:
    if not ckpts:
        raise FormatError("need at least one checkpoint to average")
    first = ckpts[0]
    for c in ckpts[1:]:
        if c.spec != first.spec:
            raise FormatError("cannot average checkpoints with different specs")
    tensors = {}
    for name, t0 in first.tensors.items():
        acc = np.zeros(t0.shape, dtype=np.float64)
        for c in ckpts:
            acc += c.tensors[name]
        tensors[name] = (acc / len(ckpts)).astype(t0.dtype)
    return Checkpoint(first.spec, tensors, first.format_version, dict(first.header))


def average_checkpoints(paths: Sequence[Union[str, Path]]) -> Checkpoint:
    return mean_checkpoint([load_checkpoint(p) for p in paths])


@dataclass
class TrainResult:
    ckpt: Checkpoint
    history: list[StepStats] = field(default_factory=list)
    checkpoint_paths: list[Path] = field(default_factory=list)


def train(
    ckpt: Checkpoint,
    batches: Iterator[Batch],
    sched: TrainSchedule,
    steps: int,
    *,
    accum: int = 1,
    checkpoint_every: int = 50,
    out_dir: Optional[Union[str, Path]] = None,
    log: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Run ``steps`` optimizer steps, saving ``step_XXXXXX.oelm`` every ``checkpoint_every``."""
    opt = OptimizerState.zeros_like(ckpt.tensors)
    result = TrainResult(ckpt)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for _ in range(steps):
        micro = [next(batches) for _ in range(accum)]
        t0 = time.perf_counter()
        stats = train_step(ckpt, opt, micro, sched)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        result.history.append(stats)
        if log is not None:
            log({**asdict(stats), "wall_ms": wall_ms})
        if out is not None and checkpoint_every and opt.step % checkpoint_every == 0:
            path = out / f"step_{opt.step:06d}.oelm"
            snapshot = ckpt.copy()
            snapshot.header["step"] = str(opt.step)
            save_checkpoint(snapshot, path)
            result.checkpoint_paths.append(path)
    return result


def jsonl_logger(path: Union[str, Path]) -> Callable[[dict], None]:
    fh = open(path, "a", encoding="utf-8")

    def log(record: dict) -> None:
        fh.write(json.dumps(record) + "\n")
        fh.flush()

    log.close = fh.close  # type: ignore[attr-defined]
    return log


def dataset_loss(ckpt: Checkpoint, batches: Iterable[Batch]) -> float:
    losses = [evaluate_loss(ckpt.tensors, ckpt.plan, b.inputs, b.targets) for b in batches]
    return float(np.mean(losses))


def smoothed(values: Sequence[float], window: int = 20) -> float:
    tail = list(values)[-window:]
    return float(np.mean(tail))
