"""Decoder-only transformer assembled from a ScalePlan.

Weights live in a :class:`Checkpoint` (name -> 2-D array). Inference goes
through :class:`Transformer`, which views those arrays in a compute dtype
and owns the rotary tables; training uses :func:`loss_and_grads`, which
runs the same math while keeping activations for the backward pass.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from . import nn
from .errors import ConfigError, ContextError, DataError, FormatError
from .plan import ModelSpec, ScalePlan, build_plan, tensor_shapes

FORMAT_VERSION = 1
INIT_STD = 0.02
INIT_TRUNCATION = 2.0


@dataclass
class Checkpoint:
    spec: ModelSpec
    tensors: dict[str, np.ndarray]
    format_version: int = FORMAT_VERSION
    header: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self._plan = build_plan(self.spec)

    @property
    def plan(self) -> ScalePlan:
        return self._plan

    def validate(self) -> None:
        expected = tensor_shapes(self.plan)
        missing = expected.keys() - self.tensors.keys()
        extra = self.tensors.keys() - expected.keys()
        if missing or extra:
            raise FormatError(f"tensor names disagree with spec: missing={sorted(missing)} extra={sorted(extra)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise FormatError(f"shape disagreement for {name}: {self.tensors[name].shape} vs {shape}")

    def num_parameters(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())

    def astype(self, dtype) -> "Checkpoint":
        tensors = {k: np.array(v, dtype=dtype) for k, v in self.tensors.items()}
        return Checkpoint(self.spec, tensors, self.format_version, dict(self.header))

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.spec, {k: v.copy() for k, v in self.tensors.items()}, self.format_version, dict(self.header))


def _truncated_normal(rng: np.random.Generator, shape, std: float, bound: float) -> np.ndarray:
    z = rng.standard_normal(shape)
    bad = np.abs(z) > bound
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > bound
    return z * std


def _is_norm(name: str) -> bool:
    return name.endswith("_norm")


def init_model(plan: ScalePlan, seed: int, dtype=np.float32) -> Checkpoint:
    """Fresh weights: N(0, 0.02) truncated at two sigma, unit norm gains.

    Attention output and FFN down projections are further scaled by
    1/sqrt(2N) so the residual stream variance does not grow with depth.
    """
    rng = np.random.default_rng(seed)
    residual_scale = 1.0 / np.sqrt(2.0 * plan.num_layers)
    tensors = {}
    for name, shape in tensor_shapes(plan).items():
        if _is_norm(name):
            w = np.ones(shape)
        else:
            w = _truncated_normal(rng, shape, INIT_STD, INIT_TRUNCATION)
            if name.endswith(("attn.wo", "ffn.w_down")):
                w *= residual_scale
        tensors[name] = w.astype(dtype)
    header = {
        "init": f"truncated_normal(std={INIT_STD}, bound={INIT_TRUNCATION}sigma) residual_scale=1/sqrt(2N)",
        "seed": str(seed),
    }
    return Checkpoint(plan.spec, tensors, header=header)


def _layer_weights(params: dict[str, np.ndarray], i: int) -> dict[str, np.ndarray]:
    prefix = f"layer.{i:02d}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


@dataclass
class KVCache:
    """Static per-layer key/value store of shape (1, n_kv, capacity, d_h)."""

    keys: list[np.ndarray]
    values: list[np.ndarray]
    filled: int = 0

    @property
    def capacity(self) -> int:
        return self.keys[0].shape[2]

    @property
    def num_layers(self) -> int:
        return len(self.keys)


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "greedy"
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "temperature"):
            raise ConfigError(f"unknown sampler mode {self.mode!r}")
        if self.mode == "temperature" and not self.temperature > 0:
            raise ConfigError("temperature must be positive")


@dataclass
class Generation:
    tokens: list[int]
    prefill_seconds: float
    generation_seconds: float
    decode_steps: int


class Transformer:
    """Inference view over a checkpoint.

    When the checkpoint already holds ``dtype`` arrays they are used in
    place, so later mutation of the checkpoint is visible here and the
    tied output projection is literally the embedding matrix.
    """

    def __init__(self, ckpt: Checkpoint, dtype=np.float64, norm: str = "reference"):
        if norm not in nn.NORM_VARIANTS:
            raise ConfigError(f"unknown norm variant {norm!r}")
        self.spec = ckpt.spec
        self.plan = ckpt.plan
        self.dtype = np.dtype(dtype)
        self.norm_name = norm
        self.norm = nn.NORM_VARIANTS[norm]
        self.params = {k: np.asarray(v, dtype=self.dtype) for k, v in ckpt.tensors.items()}
        self.layers = [_layer_weights(self.params, i) for i in range(self.plan.num_layers)]
        self.cos, self.sin = nn.rope_angles(
            np.arange(self.spec.context_length), self.spec.head_dim, self.spec.rope_theta, self.dtype
        )

    @property
    def embed(self) -> np.ndarray:
        return self.params["tok_embed"]

    @property
    def output_projection(self) -> np.ndarray:
        if self.spec.weight_tying:
            return self.embed.T
        return self.params["lm_head"]

    def new_cache(self) -> KVCache:
        dh, cap = self.spec.head_dim, self.spec.context_length
        keys = [np.zeros((1, lp.n_kv_heads, cap, dh), self.dtype) for lp in self.plan.layers]
        values = [np.zeros_like(k) for k in keys]
        return KVCache(keys, values)

    def _check_tokens(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens)
        if ids.ndim != 1 or ids.size == 0:
            raise DataError("expected a non-empty 1-D token sequence")
        if not np.issubdtype(ids.dtype, np.integer):
            raise DataError(f"token ids must be integers, got {ids.dtype}")
        if ids.min() < 0 or ids.max() >= self.spec.vocab_size:
            raise DataError(f"token id out of range [0, {self.spec.vocab_size})")
        return ids

    def _attention(self, x, w, lp, offset, cache: KVCache | None, li: int):
        spec, norm, eps = self.spec, self.norm, self.spec.norm_eps
        b, t, _ = x.shape
        dh, nh, nkv = spec.head_dim, lp.n_heads, lp.n_kv_heads
        h = norm(x, w["attn_norm"], eps)
        q = norm((h @ w["attn.wq"]).reshape(b, t, nh, dh), w["attn.q_norm"], eps)
        k = norm((h @ w["attn.wk"]).reshape(b, t, nkv, dh), w["attn.k_norm"], eps)
        v = (h @ w["attn.wv"]).reshape(b, t, nkv, dh)
        cos = self.cos[offset:offset + t, None, :]
        sin = self.sin[offset:offset + t, None, :]
        q = nn.rope_rotate(q, cos, sin).transpose(0, 2, 1, 3)
        k = nn.rope_rotate(k, cos, sin).transpose(0, 2, 1, 3)
        v = v.transpose(0, 2, 1, 3)
        if cache is not None:
            cache.keys[li][:, :, offset:offset + t] = k
            cache.values[li][:, :, offset:offset + t] = v
            k = cache.keys[li][:, :, :offset + t]
            v = cache.values[li][:, :, :offset + t]
        att = nn.gqa_attention(q, k, v, offset)
        return att.transpose(0, 2, 1, 3).reshape(b, t, nh * dh) @ w["attn.wo"]

    def _run(self, ids: np.ndarray, offset: int, cache: KVCache | None) -> np.ndarray:
        eps = self.spec.norm_eps
        x = self.embed[ids][None]
        for li, (w, lp) in enumerate(zip(self.layers, self.plan.layers)):
            x = x + self._attention(x, w, lp, offset, cache, li)
            h = self.norm(x, w["ffn_norm"], eps)
            x = x + nn.swiglu_ffn(h, w["ffn.w_gate"], w["ffn.w_up"], w["ffn.w_down"])
        x = self.norm(x, self.params["final_norm"], eps)
        return (x @ self.output_projection)[0]

    def forward(self, tokens, cache: KVCache | None = None) -> np.ndarray:
        """Logits (T, V) for a full sequence; fills ``cache`` from position 0 if given."""
        ids = self._check_tokens(tokens)
        if ids.size > self.spec.context_length:
            raise ContextError(f"sequence of {ids.size} exceeds context length {self.spec.context_length}")
        if cache is not None:
            cache.filled = 0
        logits = self._run(ids, 0, cache)
        if cache is not None:
            cache.filled = ids.size
        return logits

    def decode_step(self, cache: KVCache, token: int) -> np.ndarray:
        if cache.filled >= cache.capacity:
            raise ContextError(f"KV cache full ({cache.capacity} positions)")
        ids = self._check_tokens([token])
        logits = self._run(ids, cache.filled, cache)
        cache.filled += 1
        return logits[0]


ModelLike = Union[Checkpoint, Transformer]


def _runtime(model: ModelLike, dtype=np.float64, norm: str = "reference") -> Transformer:
    if isinstance(model, Transformer):
        return model
    return Transformer(model, dtype=dtype, norm=norm)


def forward(model: ModelLike, tokens, dtype=np.float64) -> np.ndarray:
    return _runtime(model, dtype).forward(tokens)


def decode_step(model: ModelLike, cache: KVCache, token: int, dtype=np.float64):
    rt = _runtime(model, dtype)
    return rt.decode_step(cache, token), cache


def new_cache(model: ModelLike, dtype=np.float64) -> KVCache:
    return _runtime(model, dtype).new_cache()


def sample_token(logits: np.ndarray, sampler: SamplerConfig, rng: np.random.Generator) -> int:
    if sampler.mode == "greedy":
        return int(np.argmax(logits))  # first maximum, i.e. lowest id on ties
    p = np.exp(nn.log_softmax(np.asarray(logits, dtype=np.float64) / sampler.temperature))
    cdf = np.cumsum(p)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(p) - 1))


def generate(
    model: ModelLike,
    prompt: Sequence[int],
    n_new: int,
    sampler: SamplerConfig = SamplerConfig(),
    *,
    dtype=np.float64,
    clock: Callable[[], float] = time.perf_counter,
) -> Generation:
    """Prefill the prompt, then run one decode step per new token.

    Each iteration samples from the current logits and feeds the sampled
    token back, so the cache ends holding ``len(prompt) + n_new`` positions.
    """
    rt = _runtime(model, dtype)
    prompt = [int(t) for t in prompt]
    if n_new < 0:
        raise ConfigError("n_new must be non-negative")
    if len(prompt) + n_new > rt.spec.context_length:
        raise ContextError(
            f"prompt ({len(prompt)}) + new tokens ({n_new}) exceed context length {rt.spec.context_length}"
        )
    rng = np.random.default_rng(sampler.seed)
    cache = rt.new_cache()
    t0 = clock()
    logits = rt.forward(prompt, cache)[-1]
    t1 = clock()
    out = list(prompt)
    for _ in range(n_new):
        tok = sample_token(logits, sampler, rng)
        out.append(tok)
        logits = rt.decode_step(cache, tok)
    t2 = clock() if n_new else t1
    return Generation(out, t1 - t0, t2 - t1, n_new)


# -- training path --------------------------------------------------------

def loss_and_grads(params: dict[str, np.ndarray], plan: ScalePlan, inputs, targets):
    """Mean cross-entropy over a (B, T) batch and its gradient for every tensor.

    Uses the reference RMSNorm; dtype follows ``params``.
    """
    spec = plan.spec
    eps, dh = spec.norm_eps, spec.head_dim
    inputs = np.asarray(inputs)
    if inputs.ndim == 1:
        inputs, targets = inputs[None], np.asarray(targets)[None]
    b, t = inputs.shape
    if t > spec.context_length:
        raise ContextError(f"sequence of {t} exceeds context length {spec.context_length}")
    if inputs.min() < 0 or inputs.max() >= spec.vocab_size:
        raise DataError("input token id out of range")
    embed = params["tok_embed"]
    dtype = embed.dtype
    cos, sin = nn.rope_angles(np.arange(t), dh, spec.rope_theta, dtype)
    cos, sin = cos[:, None, :], sin[:, None, :]

    x = embed[inputs]
    saved = []
    for i, lp in enumerate(plan.layers):
        w = _layer_weights(params, i)
        nh, nkv = lp.n_heads, lp.n_kv_heads
        h = nn.rmsnorm(x, w["attn_norm"], eps)
        q = (h @ w["attn.wq"]).reshape(b, t, nh, dh)
        k = (h @ w["attn.wk"]).reshape(b, t, nkv, dh)
        v = (h @ w["attn.wv"]).reshape(b, t, nkv, dh)
        qn = nn.rmsnorm(q, w["attn.q_norm"], eps)
        kn = nn.rmsnorm(k, w["attn.k_norm"], eps)
        qt = nn.rope_rotate(qn, cos, sin).transpose(0, 2, 1, 3)
        kt = nn.rope_rotate(kn, cos, sin).transpose(0, 2, 1, 3)
        vt = v.transpose(0, 2, 1, 3)
        att, probs = nn.gqa_attention(qt, kt, vt, 0, return_probs=True)
        a2 = att.transpose(0, 2, 1, 3).reshape(b, t, nh * dh)
        x1 = x + a2 @ w["attn.wo"]
        h2 = nn.rmsnorm(x1, w["ffn_norm"], eps)
        x2 = x1 + nn.swiglu_ffn(h2, w["ffn.w_gate"], w["ffn.w_up"], w["ffn.w_down"])
        saved.append((x, h, q, k, qt, kt, vt, probs, a2, x1, h2))
        x = x2
    hf = nn.rmsnorm(x, params["final_norm"], eps)
    head = embed.T if spec.weight_tying else params["lm_head"]
    logits = hf @ head
    loss, dlogits = nn.cross_entropy(logits, targets)

    grads = {name: np.zeros_like(p) for name, p in params.items()}
    d = spec.d_model
    dl2, hf2 = dlogits.reshape(-1, spec.vocab_size), hf.reshape(-1, d)
    if spec.weight_tying:
        grads["tok_embed"] += dl2.T @ hf2
    else:
        grads["lm_head"] += hf2.T @ dl2
    dhf = dlogits @ head.T
    dx, grads["final_norm"] = nn.rmsnorm_backward(dhf, x, params["final_norm"], eps)

    for i in reversed(range(plan.num_layers)):
        lp = plan.layers[i]
        w = _layer_weights(params, i)
        pre = f"layer.{i:02d}."
        nh, nkv = lp.n_heads, lp.n_kv_heads
        x0, h, q, k, qt, kt, vt, probs, a2, x1, h2 = saved[i]
        dh2, g_gate, g_up, g_down = nn.swiglu_ffn_backward(dx, h2, w["ffn.w_gate"], w["ffn.w_up"], w["ffn.w_down"])
        grads[pre + "ffn.w_gate"], grads[pre + "ffn.w_up"], grads[pre + "ffn.w_down"] = g_gate, g_up, g_down
        dx1_n, grads[pre + "ffn_norm"] = nn.rmsnorm_backward(dh2, x1, w["ffn_norm"], eps)
        dx1 = dx + dx1_n
        grads[pre + "attn.wo"] = a2.reshape(-1, nh * dh).T @ dx1.reshape(-1, d)
        datt = (dx1 @ w["attn.wo"].T).reshape(b, t, nh, dh).transpose(0, 2, 1, 3)
        dqt, dkt, dvt = nn.gqa_attention_backward(datt, qt, kt, vt, probs)
        dqn = nn.rope_rotate_backward(dqt.transpose(0, 2, 1, 3), cos, sin)
        dkn = nn.rope_rotate_backward(dkt.transpose(0, 2, 1, 3), cos, sin)
        dq, grads[pre + "attn.q_norm"] = nn.rmsnorm_backward(dqn, q, w["attn.q_norm"], eps)
        dk, grads[pre + "attn.k_norm"] = nn.rmsnorm_backward(dkn, k, w["attn.k_norm"], eps)
        dq2 = dq.reshape(-1, nh * dh)
        dk2 = dk.reshape(-1, nkv * dh)
        dv2 = dvt.transpose(0, 2, 1, 3).reshape(-1, nkv * dh)
        h_2 = h.reshape(-1, d)
        grads[pre + "attn.wq"] = h_2.T @ dq2
        grads[pre + "attn.wk"] = h_2.T @ dk2
        grads[pre + "attn.wv"] = h_2.T @ dv2
        dhid = (dq2 @ w["attn.wq"].T + dk2 @ w["attn.wk"].T + dv2 @ w["attn.wv"].T).reshape(b, t, d)
        dx0_n, grads[pre + "attn_norm"] = nn.rmsnorm_backward(dhid, x0, w["attn_norm"], eps)
        dx = dx1 + dx0_n
    np.add.at(grads["tok_embed"], inputs.reshape(-1), dx.reshape(-1, d))
    return loss, grads


def evaluate_loss(params: dict[str, np.ndarray], plan: ScalePlan, inputs, targets) -> float:
    """Forward-only cross-entropy, via the inference runtime."""
    ckpt = Checkpoint(plan.spec, params)
    rt = Transformer(ckpt, dtype=params["tok_embed"].dtype)
    inputs = np.atleast_2d(inputs)
    targets = np.atleast_2d(targets)
    total = 0.0
    for row, tgt in zip(inputs, targets):
        total += nn.cross_entropy(rt.forward(row), tgt)[0]
    return total / len(inputs)
