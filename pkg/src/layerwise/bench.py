"""Prefill / generation throughput measurement and the RMSNorm variant study.

Protocol: an optional dry-run generation, ``warmup_passes`` forward passes,
then ``repetitions`` timed runs. Each run prefills a fixed prompt into a
fresh KV cache and generates ``gen_tokens`` greedily. Reported throughput
uses the median phase times across runs.
"""

from __future__ import annotations

import contextlib
import csv
import statistics
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import CorrectnessError, ProtocolError
from .model import Checkpoint, Transformer
from .plan import count_norm_invocations

Clock = Callable[[], float]

LOGIT_TOLERANCE = 1e-5

_session = threading.Lock()


@dataclass(frozen=True)
class BenchProtocol:
    prompt_tokens: int = 36
    gen_tokens: int = 1024
    dry_run: bool = True
    warmup_passes: int = 1
    repetitions: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.prompt_tokens < 1 or self.gen_tokens < 1:
            raise ProtocolError("prompt_tokens and gen_tokens must be >= 1")
        if self.warmup_passes < 0 or self.repetitions < 1:
            raise ProtocolError("warmup_passes must be >= 0 and repetitions >= 1")

    def check_fits(self, context_length: int) -> None:
        if self.prompt_tokens + self.gen_tokens > context_length:
            raise ProtocolError(
                f"prompt ({self.prompt_tokens}) + generation ({self.gen_tokens}) "
                f"exceed context length {context_length}"
            )


@dataclass
class ThroughputReport:
    norm_variant: str
    norm_invocations: int
    prompt_tokens: int
    gen_tokens: int
    prompt_tps: float
    generation_tps: float
    total_tps: float
    prefill_times: list[float] = field(default_factory=list)
    generation_times: list[float] = field(default_factory=list)

    def as_record(self) -> dict:
        return asdict(self)


def report_from_times(
    prefill_times: Sequence[float],
    generation_times: Sequence[float],
    prompt_tokens: int,
    gen_tokens: int,
    norm_variant: str,
    norm_invocations: int,
) -> ThroughputReport:
    pre = statistics.median(prefill_times)
    gen = statistics.median(generation_times)
    if pre <= 0 or gen <= 0:
        raise ProtocolError("clock produced a non-positive duration")
    return ThroughputReport(
        norm_variant,
        norm_invocations,
        prompt_tokens,
        gen_tokens,
        prompt_tokens / pre,
        gen_tokens / gen,
        (prompt_tokens + gen_tokens) / (pre + gen),
        list(prefill_times),
        list(generation_times),
    )


def bench_prompt(protocol: BenchProtocol, vocab_size: int) -> list[int]:
    rng = np.random.default_rng(protocol.seed)
    return [int(t) for t in rng.integers(0, vocab_size, protocol.prompt_tokens)]


def _timed_run(rt: Transformer, prompt: list[int], n_new: int, clock: Clock) -> tuple[float, float]:
    cache = rt.new_cache()
    t0 = clock()
    logits = rt.forward(prompt, cache)[-1]
    t1 = clock()
    for _ in range(n_new):
        logits = rt.decode_step(cache, int(np.argmax(logits)))
    t2 = clock()
    return t1 - t0, t2 - t1


@contextlib.contextmanager
def _exclusive_session():
    if not _session.acquire(blocking=False):
        raise ProtocolError("another benchmark session is already running in this process")
    try:
        with threadpool_limits(limits=1):
            yield
    finally:
        _session.release()


def _prepare(rt: Transformer, prompt: list[int], protocol: BenchProtocol) -> None:
    if protocol.dry_run:
        _timed_run(rt, prompt, protocol.gen_tokens, time.perf_counter)
    for _ in range(protocol.warmup_passes):
        rt.forward(prompt)


def run_benchmark(
    ckpt: Checkpoint,
    protocol: BenchProtocol = BenchProtocol(),
    norm_variant: str = "naive",
    *,
    dtype=np.float32,
    clock: Clock = time.perf_counter,
) -> ThroughputReport:
    protocol.check_fits(ckpt.spec.context_length)
    rt = Transformer(ckpt, dtype=dtype, norm=norm_variant)
    prompt = bench_prompt(protocol, ckpt.spec.vocab_size)
    with _exclusive_session():
        _prepare(rt, prompt, protocol)
        times = [_timed_run(rt, prompt, protocol.gen_tokens, clock) for _ in range(protocol.repetitions)]
    return report_from_times(
        [t[0] for t in times],
        [t[1] for t in times],
        protocol.prompt_tokens,
        protocol.gen_tokens,
        norm_variant,
        count_norm_invocations(ckpt.plan),
    )


@dataclass
class NormComparison:
    naive: ThroughputReport
    fused: ThroughputReport
    speedup: float
    max_logit_diff: float


def compare_norm_variants(
    ckpt: Checkpoint,
    protocol: BenchProtocol = BenchProtocol(),
    *,
    dtype=np.float32,
    clock: Clock = time.perf_counter,
) -> NormComparison:
    """Benchmark naive against fused RMSNorm on the same weights.

    Repetitions alternate between the two variants so slow drift in machine
    load hits both equally. Raises CorrectnessError if their logits differ.
    """
    protocol.check_fits(ckpt.spec.context_length)
    variants = {name: Transformer(ckpt, dtype=dtype, norm=name) for name in ("naive", "fused")}
    prompt = bench_prompt(protocol, ckpt.spec.vocab_size)
    ref = variants["naive"].forward(prompt).astype(np.float64)
    fused = variants["fused"].forward(prompt).astype(np.float64)
    diff = float(np.max(np.abs(ref - fused)))
    if not np.allclose(fused, ref, rtol=LOGIT_TOLERANCE, atol=LOGIT_TOLERANCE):
        raise CorrectnessError(f"naive and fused RMSNorm logits differ by {diff:.3e}")
    times: dict[str, list[tuple[float, float]]] = {"naive": [], "fused": []}
    with _exclusive_session():
        for rt in variants.values():
            _prepare(rt, prompt, protocol)
        for _ in range(protocol.repetitions):
            for name, rt in variants.items():
                times[name].append(_timed_run(rt, prompt, protocol.gen_tokens, clock))
    n_inv = count_norm_invocations(ckpt.plan)
    reports = {
        name: report_from_times(
            [t[0] for t in ts], [t[1] for t in ts], protocol.prompt_tokens, protocol.gen_tokens, name, n_inv
        )
        for name, ts in times.items()
    }
    speedup = reports["fused"].generation_tps / reports["naive"].generation_tps
    return NormComparison(reports["naive"], reports["fused"], speedup, diff)


CSV_COLUMNS = ["Model", "Normalization layer (# Invocations per token)", "Prompt", "Generation", "Total"]


def write_csv(reports: Sequence[ThroughputReport], path, model_name: str = "model") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            writer.writerow([
                model_name,
                f"RMSNorm-{r.norm_variant.capitalize()} ({r.norm_invocations})",
                f"{r.prompt_tps:.2f}",
                f"{r.generation_tps:.2f}",
                f"{r.total_tps:.2f}",
            ])
