"""Numerical building blocks with hand-written backward passes.

All functions are pure numpy and work on arbitrary leading (batch) axes.
Backward functions take the upstream gradient plus whatever the forward
needs and return gradients in argument order. Nothing here owns a bias.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ShapeError

DEFAULT_EPS = 1e-6
DEFAULT_THETA = 10000.0


@dataclass(frozen=True)
class NormGain:
    gain: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError(f"norm epsilon must be positive, got {self.eps}")


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    theta: float = DEFAULT_THETA

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ConfigError(f"rotary head_dim must be even and positive, got {self.head_dim}")


# -- RMSNorm ---------------------------------------------------------------

def _check_gain(x: np.ndarray, g: np.ndarray) -> None:
    if g.ndim > x.ndim or x.shape[x.ndim - g.ndim:] != g.shape:
        # a (1, d) row gain is fine for any (..., d) input
        if not (g.ndim == 2 and g.shape[0] == 1 and x.shape[-1:] == g.shape[1:]):
            raise ShapeError(f"gain shape {g.shape} does not match input {x.shape}")


def rmsnorm(x, norm: NormGain | np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """y = g * x / sqrt(mean(x**2) + eps) over the last axis."""
    if isinstance(norm, NormGain):
        g, eps = norm.gain, norm.eps
    else:
        g = norm
    x = np.asarray(x)
    g = np.asarray(g)
    _check_gain(x, g)
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * inv * g


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


def rmsnorm_backward(dy, x, g, eps: float = DEFAULT_EPS):
    d = x.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    dxn = dy * g
    dx = inv * dxn - x * (inv ** 3) * np.sum(dxn * x, axis=-1, keepdims=True) / d
    dg = _reduce_to(dy * x * inv, g.shape)
    return dx, dg


def rmsnorm_naive(x, g, eps: float = DEFAULT_EPS):
    # one full pass per elementary step, each materialising its result
    sq = np.square(x)
    ms = np.mean(sq, axis=-1, keepdims=True)
    ms_eps = np.add(ms, eps)
    root = np.sqrt(ms_eps)
    inv = np.reciprocal(root)
    xn = np.multiply(x, inv)
    return np.multiply(xn, g)


def rmsnorm_fused(x, g, eps: float = DEFAULT_EPS):
    # one reduction pass, then a single scaled write
    inv = 1.0 / np.sqrt(np.einsum("...i,...i->...", x, x) * (1.0 / x.shape[-1]) + eps)
    return x * (inv[..., None] * g)


NORM_VARIANTS = {"reference": rmsnorm, "naive": rmsnorm_naive, "fused": rmsnorm_fused}


# -- rotary embeddings ----------------------------------------------------

def rope_angles(positions, head_dim: int, theta: float = DEFAULT_THETA, dtype=np.float64):
    """cos/sin tables of shape (len(positions), head_dim // 2)."""
    if head_dim % 2:
        raise ConfigError(f"rotary head_dim must be even, got {head_dim}")
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.outer(np.asarray(positions, dtype=np.float64), inv_freq)
    return np.cos(ang).astype(dtype, copy=False), np.sin(ang).astype(dtype, copy=False)


def rope_rotate(x, cos, sin):
    """Rotate interleaved pairs (2j, 2j+1) of the last axis.

    ``cos``/``sin`` must broadcast against ``x[..., ::2]``.
    """
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, cos.shape[:-1] + (x.shape[-1],)), dtype=np.result_type(x, cos))
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


def rope_rotate_backward(dy, cos, sin):
    # the transpose of a rotation is the rotation by the negated angle
    return rope_rotate(dy, cos, -sin)


def rope_apply(v, position: int, cfg: RopeConfig) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (cfg.head_dim,):
        raise ShapeError(f"expected vector of length {cfg.head_dim}, got shape {v.shape}")
    cos, sin = rope_angles([position], cfg.head_dim, cfg.theta)
    return rope_rotate(v, cos[0], sin[0])


# -- grouped-query attention ----------------------------------------------

def _softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def causal_mask(t: int, s: int, offset: int) -> np.ndarray:
    """Boolean (t, s) mask, True where query row may see key column."""
    return np.arange(s)[None, :] <= (offset + np.arange(t))[:, None]


def gqa_attention(q, k, v, causal_offset: int = 0, return_probs: bool = False):
    """Causal scaled dot-product attention with shared key/value heads.

    q: (..., n_h, T, d_h); k, v: (..., n_kv, S, d_h). Query head h reads
    key/value head h // (n_h // n_kv). Query row t sits at absolute
    position ``causal_offset + t``.
    """
    *lead, nh, t, dh = q.shape
    nkv, s = k.shape[-3], k.shape[-2]
    if k.shape != v.shape or k.shape[-1] != dh or nkv < 1 or nh % nkv:
        raise ShapeError(f"incompatible attention shapes q={q.shape} k={k.shape} v={v.shape}")
    if s < causal_offset + t:
        raise ShapeError(f"{s} keys cannot cover {t} queries at offset {causal_offset}")
    g = nh // nkv
    qg = q.reshape(*lead, nkv, g * t, dh)
    scores = (qg @ np.swapaxes(k, -1, -2)).reshape(*lead, nkv, g, t, s) * (1.0 / np.sqrt(dh))
    allowed = causal_mask(t, s, causal_offset)
    scores = np.where(allowed, scores, -np.inf)
    probs = _softmax(scores)
    out = (probs.reshape(*lead, nkv, g * t, s) @ v).reshape(*lead, nh, t, dh)
    if return_probs:
        return out, probs.reshape(*lead, nh, t, s)
    return out


def gqa_attention_backward(dout, q, k, v, probs):
    """Gradients of ``gqa_attention`` w.r.t. q, k, v given its softmax weights."""
    *lead, nh, t, dh = q.shape
    nkv, s = k.shape[-3], k.shape[-2]
    g = nh // nkv
    p = probs.reshape(*lead, nkv, g * t, s)
    dog = dout.reshape(*lead, nkv, g * t, dh)
    dv = np.swapaxes(p, -1, -2) @ dog
    dp = dog @ np.swapaxes(v, -1, -2)
    ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) * (1.0 / np.sqrt(dh))
    dq = (ds @ k).reshape(q.shape)
    dk = np.swapaxes(ds, -1, -2) @ q.reshape(*lead, nkv, g * t, dh)
    return dq, dk, dv


# -- SwiGLU ---------------------------------------------------------------

def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def silu(z):
    return z * sigmoid(z)


def swiglu_ffn(x, w_gate, w_up, w_down):
    x = np.asarray(x)
    if w_gate.shape != w_up.shape or x.shape[-1] != w_gate.shape[0] or w_down.shape != w_gate.shape[::-1]:
        raise ShapeError(
            f"incompatible FFN shapes x={x.shape} gate={w_gate.shape} up={w_up.shape} down={w_down.shape}"
        )
    return (silu(x @ w_gate) * (x @ w_up)) @ w_down


def swiglu_ffn_backward(dy, x, w_gate, w_up, w_down):
    a = x @ w_gate
    b = x @ w_up
    s = sigmoid(a)
    act = a * s
    h = act * b
    d_in, f = w_gate.shape
    x2, dy2, h2 = x.reshape(-1, d_in), dy.reshape(-1, w_down.shape[1]), h.reshape(-1, f)
    dw_down = h2.T @ dy2
    dh = dy @ w_down.T
    da = dh * b * (s + a * s * (1.0 - s))
    db = dh * act
    da2, db2 = da.reshape(-1, f), db.reshape(-1, f)
    dx = da @ w_gate.T + db @ w_up.T
    return dx, x2.T @ da2, x2.T @ db2, dw_down


# -- loss -----------------------------------------------------------------

def log_softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def cross_entropy(logits, targets):
    """Mean token cross-entropy and its gradient w.r.t. ``logits``.

    ``logits`` is (..., V) and ``targets`` the matching (...) integer ids.
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise DataError(f"target id out of range [0, {v})")
    flat = logits.reshape(-1, v)
    tgt = targets.reshape(-1)
    n = tgt.size
    logp = log_softmax(flat)
    rows = np.arange(n)
    loss = -logp[rows, tgt].sum() / n
    grad = np.exp(logp)
    grad[rows, tgt] -= 1.0
    grad /= n
    return float(loss), grad.reshape(logits.shape)
