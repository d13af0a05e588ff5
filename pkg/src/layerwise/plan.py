"""Layer-wise scaling planner.

Every layer of the transformer gets its own attention head count and FFN
width. Both are derived from two scalars that are linearly interpolated
across depth between a (min, max) pair, so early layers are narrow and the
last layers are wide.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Union

from .errors import ConfigError, PlanningError

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ModelSpec:
    d_model: int
    num_layers: int
    head_dim: int
    alpha_min: float
    alpha_max: float
    beta_min: float
    beta_max: float
    vocab_size: int
    context_length: int = 2048
    kv_group: int = 4
    weight_tying: bool = True
    norm_eps: float = 1e-6
    rope_theta: float = 10000.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("d_model", "num_layers", "head_dim", "kv_group", "context_length"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise PlanningError(f"{name} must be a positive integer, got {value!r}")
        if isinstance(self.vocab_size, bool) or not isinstance(self.vocab_size, int) or self.vocab_size < 2:
            raise PlanningError(f"vocab_size must be an integer >= 2, got {self.vocab_size!r}")
        for name in ("alpha_min", "alpha_max", "beta_min", "beta_max", "norm_eps", "rope_theta"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value) or value <= 0:
                raise PlanningError(f"{name} must be a positive real, got {value!r}")
        if self.alpha_min > self.alpha_max:
            raise PlanningError(f"alpha_min ({self.alpha_min}) exceeds alpha_max ({self.alpha_max})")
        if self.beta_min > self.beta_max:
            raise PlanningError(f"beta_min ({self.beta_min}) exceeds beta_max ({self.beta_max})")
        if self.head_dim % 2:
            raise PlanningError(f"head_dim must be even for rotary embeddings, got {self.head_dim}")

    def replace(self, **changes) -> "ModelSpec":
        return ModelSpec(**{**asdict(self), **changes})


@dataclass(frozen=True)
class LayerPlan:
    index: int
    alpha: float
    beta: float
    n_heads: int
    n_kv_heads: int
    ffn_hidden: int


@dataclass(frozen=True)
class ScalePlan:
    spec: ModelSpec
    layers: tuple[LayerPlan, ...]

    @property
    def num_layers(self) -> int:
        return len(self.layers)


def round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def interpolate(i: int, n: int, lo: float, hi: float) -> float:
    """Linear interpolation of a per-layer scale factor.

    Layer 0 gets ``lo`` and layer ``n - 1`` gets ``hi`` exactly; a single
    layer model gets ``lo``.
    """
    if n < 1:
        raise PlanningError(f"layer count must be >= 1, got {n}")
    if not 0 <= i < n:
        raise PlanningError(f"layer index {i} out of range for {n} layers")
    if lo > hi:
        raise PlanningError(f"interpolation bounds reversed: {lo} > {hi}")
    if i == 0 or n == 1:
        return lo
    if i == n - 1:
        return hi
    return lo + (hi - lo) * i / (n - 1)


def _layer(spec: ModelSpec, i: int) -> LayerPlan:
    n = spec.num_layers
    alpha = interpolate(i, n, spec.alpha_min, spec.alpha_max)
    beta = interpolate(i, n, spec.beta_min, spec.beta_max)
    raw_heads = max(1, round_half_up(alpha * spec.d_model / spec.head_dim))
    n_kv = max(1, round_half_up(raw_heads / spec.kv_group))
    # query heads snap to the nearest multiple of kv_group, not the next one up
    n_heads = n_kv * spec.kv_group
    ffn_hidden = max(1, round_half_up(beta * spec.d_model))
    return LayerPlan(i, alpha, beta, n_heads, n_kv, ffn_hidden)


def build_plan(spec: ModelSpec) -> ScalePlan:
    spec.validate()
    return ScalePlan(spec, tuple(_layer(spec, i) for i in range(spec.num_layers)))


def tensor_shapes(plan: ScalePlan) -> dict[str, tuple[int, int]]:
    """Canonical name -> 2-D shape for every learnable tensor, in file order.

    Norm gains are stored as row vectors; query/key norms carry one gain
    row per head.
    """
    spec = plan.spec
    d, dh = spec.d_model, spec.head_dim
    shapes = {"tok_embed": (spec.vocab_size, d)}
    for layer in plan.layers:
        p = f"layer.{layer.index:02d}."
        q, kv, f = layer.n_heads * dh, layer.n_kv_heads * dh, layer.ffn_hidden
        shapes[p + "attn_norm"] = (1, d)
        shapes[p + "attn.wq"] = (d, q)
        shapes[p + "attn.wk"] = (d, kv)
        shapes[p + "attn.wv"] = (d, kv)
        shapes[p + "attn.q_norm"] = (layer.n_heads, dh)
        shapes[p + "attn.k_norm"] = (layer.n_kv_heads, dh)
        shapes[p + "attn.wo"] = (q, d)
        shapes[p + "ffn_norm"] = (1, d)
        shapes[p + "ffn.w_gate"] = (d, f)
        shapes[p + "ffn.w_up"] = (d, f)
        shapes[p + "ffn.w_down"] = (f, d)
    shapes["final_norm"] = (1, d)
    if not spec.weight_tying:
        shapes["lm_head"] = (d, spec.vocab_size)
    return shapes


def count_parameters(plan: ScalePlan) -> int:
    spec = plan.spec
    d, dh = spec.d_model, spec.head_dim
    total = spec.vocab_size * d
    if not spec.weight_tying:
        total += spec.vocab_size * d
    for layer in plan.layers:
        h, kv, f = layer.n_heads, layer.n_kv_heads, layer.ffn_hidden
        total += 2 * h * dh * d + 2 * kv * dh * d  # q, o, k, v
        total += 3 * d * f
        total += 2 * d + (h + kv) * dh  # pre-attn, pre-ffn, q-norm, k-norm
    return total + d


def count_norm_invocations(plan: ScalePlan) -> int:
    return 4 * plan.num_layers + 1


def format_plan(plan: ScalePlan) -> str:
    lines = [f"{'layer':>5} {'alpha':>8} {'beta':>8} {'heads':>5} {'kv':>4} {'ffn':>7}"]
    for layer in plan.layers:
        lines.append(
            f"{layer.index:>5} {layer.alpha:>8.4f} {layer.beta:>8.4f} "
            f"{layer.n_heads:>5} {layer.n_kv_heads:>4} {layer.ffn_hidden:>7}"
        )
    lines.append(f"parameters: {count_parameters(plan):,}")
    lines.append(f"norm invocations per token: {count_norm_invocations(plan)}")
    return "\n".join(lines)


# -- config files ---------------------------------------------------------

_INT_FIELDS = {"d_model", "num_layers", "head_dim", "vocab_size", "context_length", "kv_group"}


def spec_to_ini(spec: ModelSpec, extra: dict[str, dict[str, str]] | None = None) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser["model"] = {
        k: (repr(v) if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else str(v))
        for k, v in asdict(spec).items()
    }
    for section, values in (extra or {}).items():
        parser[section] = values
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def spec_from_section(section) -> ModelSpec:
    kwargs = {}
    known = {f.name for f in fields(ModelSpec)}
    unknown = set(section.keys()) - known
    if unknown:
        raise ConfigError(f"unknown model keys: {sorted(unknown)}")
    try:
        for key in section:
            if key in _INT_FIELDS:
                kwargs[key] = section.getint(key)
            elif key == "weight_tying":
                kwargs[key] = section.getboolean(key)
            else:
                kwargs[key] = section.getfloat(key)
        return ModelSpec(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"incomplete model section: {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, PlanningError):
            raise
        raise ConfigError(str(exc)) from exc


def parse_ini(text: str, source: str = "<string>") -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return parser


def spec_from_ini(text: str, source: str = "<string>") -> ModelSpec:
    parser = parse_ini(text, source)
    if "model" not in parser:
        raise ConfigError(f"{source}: missing [model] section")
    return spec_from_section(parser["model"])


def bundled_spec_path(name: str) -> Path:
    return Path(__file__).parent / "specs" / name


def resolve_spec_path(path: PathLike) -> Path:
    """Accept a real path, or fall back to a bundled spec with the same file name."""
    p = Path(path)
    if p.exists():
        return p
    bundled = bundled_spec_path(p.name)
    if bundled.exists():
        return bundled
    raise ConfigError(f"spec file not found: {path}")


def load_spec(path: PathLike) -> ModelSpec:
    p = resolve_spec_path(path)
    return spec_from_ini(p.read_text(encoding="utf-8"), str(p))


def save_spec(spec: ModelSpec, path: PathLike) -> None:
    Path(path).write_text(spec_to_ini(spec), encoding="utf-8")
