import csv
import threading

import numpy as np
import pytest

from layerwise import bench
from layerwise.bench import BenchProtocol, compare_norm_variants, report_from_times, run_benchmark, write_csv
from layerwise.errors import ProtocolError
from layerwise.model import init_model
from layerwise.plan import build_plan, load_spec
from conftest import small_spec


def fake_clock(durations):
    """Clock returning t0, t0 + prefill, t0 + prefill + generation per run."""
    ticks, t = [], 0.0
    for pre, gen in durations:
        ticks += [t, t + pre, t + pre + gen]
        t += pre + gen + 1.0
    it = iter(ticks)
    return lambda: next(it)


def test_arithmetic_definition():
    r = report_from_times([0.010], [0.5], 36, 100, "naive", 17)
    assert r.prompt_tps == pytest.approx(3600)
    assert r.generation_tps == pytest.approx(200)
    assert r.total_tps == pytest.approx(136 / 0.51)


def test_median_with_fake_clock():
    ckpt = init_model(build_plan(small_spec()), 0)
    protocol = BenchProtocol(prompt_tokens=4, gen_tokens=5, dry_run=False, warmup_passes=0, repetitions=3)
    clock = fake_clock([(0.010, 0.5), (0.020, 0.5), (0.030, 0.5)])
    r = run_benchmark(ckpt, protocol, "fused", clock=clock)
    assert r.prompt_tps == pytest.approx(4 / 0.020)
    assert r.prefill_times == pytest.approx([0.010, 0.020, 0.030])
    assert r.norm_invocations == 4 * 2 + 1


def test_protocol_validation():
    with pytest.raises(ProtocolError):
        BenchProtocol(repetitions=0)
    with pytest.raises(ProtocolError):
        run_benchmark(init_model(build_plan(small_spec()), 0), BenchProtocol(10, 10))


def test_sessions_are_exclusive():
    ckpt = init_model(build_plan(small_spec()), 0)
    assert bench._session.acquire(blocking=False)
    try:
        with pytest.raises(ProtocolError):
            run_benchmark(ckpt, BenchProtocol(2, 2, False, 0, 1))
    finally:
        bench._session.release()


def test_compare_outputs_agree_and_csv(tmp_path):
    ckpt = init_model(build_plan(small_spec()), 0)
    cmp = compare_norm_variants(ckpt, BenchProtocol(4, 4, False, 0, 2))
    assert cmp.max_logit_diff <= 1e-5
    assert cmp.naive.norm_variant == "naive" and cmp.fused.norm_variant == "fused"
    path = tmp_path / "t.csv"
    write_csv([cmp.naive, cmp.fused], path, "small")
    rows = list(csv.reader(open(path)))
    assert rows[0] == bench.CSV_COLUMNS
    assert rows[1][1] == "RMSNorm-Naive (9)" and rows[2][1] == "RMSNorm-Fused (9)"


def test_invocation_count_for_28_layers():
    plan = build_plan(load_spec("1p1b.cfg"))
    from layerwise.plan import count_norm_invocations
    assert count_norm_invocations(plan) == 113
