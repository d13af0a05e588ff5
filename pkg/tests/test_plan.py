import math
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from layerwise.errors import ConfigError, PlanningError
from layerwise.plan import (
    ModelSpec,
    build_plan,
    count_norm_invocations,
    count_parameters,
    format_plan,
    interpolate,
    load_spec,
    round_half_up,
    spec_from_ini,
    spec_to_ini,
    tensor_shapes,
)


def exact_scale(i, n, lo, hi):
    # exact rational evaluation of the linear scaling rule
    return float(Fraction(lo) + (Fraction(hi) - Fraction(lo)) * Fraction(i, n - 1))


def test_interpolate_endpoints_and_interior():
    assert interpolate(0, 28, 0.5, 1.0) == 0.5
    assert interpolate(27, 28, 0.5, 1.0) == 1.0
    assert interpolate(13, 28, 0.5, 4.0) == pytest.approx(exact_scale(13, 28, 0.5, 4.0), abs=1e-12)
    assert interpolate(13, 28, 0.5, 4.0) == pytest.approx(2.185185185185, abs=1e-11)


def test_interpolate_single_layer_and_errors():
    assert interpolate(0, 1, 0.3, 0.9) == 0.3
    with pytest.raises(PlanningError):
        interpolate(3, 3, 0.5, 1.0)
    with pytest.raises(PlanningError):
        interpolate(0, 0, 0.5, 1.0)
    with pytest.raises(PlanningError):
        interpolate(0, 4, 1.0, 0.5)


def test_round_half_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 2.49, -0.5)] == [1, 2, 3, 2, 0]


def test_1p1b_first_and_last_layer():
    plan = build_plan(load_spec("1p1b.cfg"))
    assert plan.num_layers == 28
    first, last = plan.layers[0], plan.layers[-1]
    assert (first.n_heads, first.ffn_hidden) == (16, 1024)
    assert (last.n_heads, last.ffn_hidden) == (32, 8192)
    assert first.n_kv_heads == 4 and last.n_kv_heads == 8


def test_uniform_spec_gives_identical_layers():
    spec = ModelSpec(512, 6, 64, 1.0, 1.0, 4.0, 4.0, 1000, kv_group=2)
    layers = build_plan(spec).layers
    assert {(l.n_heads, l.n_kv_heads, l.ffn_hidden) for l in layers} == {(8, 4, 2048)}


def test_tiny_parameter_count_by_hand():
    spec = ModelSpec(8, 1, 4, 1.0, 1.0, 1.0, 1.0, 10, kv_group=1)
    embed = 10 * 8
    attn = 4 * (8 * 8)                    # q, k, v, o with 2 heads of 4
    ffn = 3 * 8 * 8
    norms = 8 + 8 + 8 + 8 + 8             # attn, ffn, q, k, final
    assert count_parameters(build_plan(spec)) == embed + attn + ffn + norms == 568
    untied = spec.replace(weight_tying=False)
    assert count_parameters(build_plan(untied)) == 568 + 80


def test_shapes_sum_to_count():
    for name in ("tiny.cfg", "desk.cfg", "1p1b.cfg"):
        plan = build_plan(load_spec(name))
        total = sum(r * c for r, c in tensor_shapes(plan).values())
        assert total == count_parameters(plan)


def test_norm_invocations():
    for n, expected in ((28, 113), (16, 65), (1, 5)):
        spec = ModelSpec(64, n, 16, 0.5, 1.0, 0.5, 4.0, 100)
        assert count_norm_invocations(build_plan(spec)) == expected


@pytest.mark.parametrize("name,target", [
    ("270m.cfg", 0.27e9), ("450m.cfg", 0.45e9), ("1p1b.cfg", 1.08e9), ("3b.cfg", 3.04e9),
])
def test_bundled_sizes(name, target):
    n = count_parameters(build_plan(load_spec(name)))
    assert abs(n / target - 1) <= 0.02


def test_spec_validation():
    with pytest.raises(PlanningError):
        ModelSpec(64, 4, 16, 1.0, 0.5, 0.5, 4.0, 100)
    with pytest.raises(PlanningError):
        ModelSpec(64, 4, 15, 0.5, 1.0, 0.5, 4.0, 100)
    with pytest.raises(PlanningError):
        ModelSpec(64, 0, 16, 0.5, 1.0, 0.5, 4.0, 100)
    with pytest.raises(PlanningError):
        ModelSpec(64, 4, 16, 0.5, 1.0, 0.5, 4.0, 1)


def test_ini_round_trip_and_errors():
    spec = load_spec("desk.cfg")
    assert spec_from_ini(spec_to_ini(spec)) == spec
    with pytest.raises(ConfigError):
        spec_from_ini("[model]\nd_model = 8\nbogus = 1\n")
    with pytest.raises(ConfigError):
        spec_from_ini("[other]\n")
    with pytest.raises(ConfigError):
        load_spec("/nonexistent/none.cfg")


def test_format_plan_rows():
    text = format_plan(build_plan(load_spec("1p1b.cfg")))
    rows = text.splitlines()[1:29]
    assert len(rows) == 28
    assert rows[0].split()[3:6] == ["16", "4", "1024"]


specs = st.builds(
    ModelSpec,
    d_model=st.integers(8, 4096),
    num_layers=st.integers(1, 40),
    head_dim=st.sampled_from([2, 4, 8, 16, 32, 64, 128]),
    alpha_min=st.floats(0.05, 1.0),
    alpha_max=st.floats(1.0, 2.0),
    beta_min=st.floats(0.05, 1.0),
    beta_max=st.floats(1.0, 8.0),
    vocab_size=st.integers(2, 50000),
    kv_group=st.integers(1, 8),
)


@settings(max_examples=200, deadline=None)
@given(specs)
def test_plan_invariants(spec):
    plan = build_plan(spec)
    layers = plan.layers
    assert len(layers) == spec.num_layers
    assert layers[0].alpha == spec.alpha_min and layers[0].beta == spec.beta_min
    if spec.num_layers >= 2:
        assert layers[-1].alpha == spec.alpha_max and layers[-1].beta == spec.beta_max
    for i, l in enumerate(layers):
        if spec.num_layers > 1:
            assert math.isclose(l.alpha, exact_scale(i, spec.num_layers, spec.alpha_min, spec.alpha_max), abs_tol=1e-12)
        assert l.n_heads % l.n_kv_heads == 0 and l.n_heads // l.n_kv_heads == spec.kv_group
        assert l.ffn_hidden >= 1
    for a, b in zip(layers, layers[1:]):
        assert a.n_heads <= b.n_heads and a.ffn_hidden <= b.ffn_hidden
    assert count_parameters(plan) == sum(r * c for r, c in tensor_shapes(plan).values())


@settings(max_examples=100, deadline=None)
@given(
    d=st.integers(8, 2048), n=st.integers(1, 30), dh=st.sampled_from([4, 8, 16, 64]),
    alpha=st.floats(0.1, 2.0), beta=st.floats(0.1, 8.0), g=st.integers(1, 4),
    tied=st.booleans(),
)
def test_uniform_degeneracy_closed_form(d, n, dh, alpha, beta, g, tied):
    spec = ModelSpec(d, n, dh, alpha, alpha, beta, beta, 1000, kv_group=g, weight_tying=tied)
    plan = build_plan(spec)
    assert len(set((l.n_heads, l.n_kv_heads, l.ffn_hidden) for l in plan.layers)) == 1
    h, kv, f = plan.layers[0].n_heads, plan.layers[0].n_kv_heads, plan.layers[0].ffn_hidden
    per_layer = 2 * d * h * dh + 2 * d * kv * dh + 3 * d * f + 2 * d + (h + kv) * dh
    closed = (1 if tied else 2) * 1000 * d + n * per_layer + d
    assert count_parameters(plan) == closed
