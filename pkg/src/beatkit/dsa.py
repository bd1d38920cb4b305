"""Dilated self-attention (DSA).

A query at position ``i`` attends to keys at ``i + r*k`` for window offsets
``-m <= k <= n``. The kernel never builds a T x T matrix: keys and values are
padded, shifted ``l_win`` times and stacked, giving a ``(T, l_win, d_f)``
layout in which every row already holds exactly its window.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tn
from .tensor import Tensor

PAPER_HEADS: tuple[tuple[int, int], ...] = ((2, 2),) * 4 + ((0, 4), (1, 3), (3, 1), (4, 0))


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DSAConfig:
    """Window geometry of one attention layer.

    ``(m, n)`` is the window of a single-head call; ``heads`` lists the
    per-head windows used by :func:`multi_head_dsa` (defaults to ``((m, n),)``).
    """

    m: int = 2
    n: int = 2
    r: int = 1
    d_f: int = 32
    heads: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        if self.m < 0 or self.n < 0:
            raise ConfigError(f"window components must be >= 0, got m={self.m} n={self.n}")
        if self.r < 1:
            raise ConfigError(f"dilation rate must be >= 1, got {self.r}")
        if self.d_f < 1:
            raise ConfigError("d_f must be >= 1")
        heads = tuple((int(a), int(b)) for a, b in self.heads) or ((self.m, self.n),)
        if any(a < 0 or b < 0 for a, b in heads):
            raise ConfigError(f"invalid head windows {heads}")
        object.__setattr__(self, "heads", heads)

    @property
    def l_win(self) -> int:
        return self.m + self.n + 1

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    def head(self, h: int) -> "DSAConfig":
        m, n = self.heads[h]
        return DSAConfig(m=m, n=n, r=self.r, d_f=self.d_f)

    def with_dilation(self, r: int) -> "DSAConfig":
        return replace(self, r=r)


@dataclass
class RelativeBias:
    """Learned per-head offset embeddings, one ``d_f`` vector per window offset."""

    tables: list[Tensor]

    @classmethod
    def zeros(cls, cfg: DSAConfig) -> "RelativeBias":
        return cls([Tensor(np.zeros((cfg.head(h).l_win, cfg.d_f))) for h in range(cfg.num_heads)])

    def check(self, cfg: DSAConfig) -> None:
        if len(self.tables) != cfg.num_heads:
            raise ConfigError(f"{len(self.tables)} bias tables for {cfg.num_heads} heads")
        for h, tab in enumerate(self.tables):
            want = (cfg.head(h).l_win, cfg.d_f)
            if tab.shape != want:
                raise ConfigError(f"head {h}: bias table {tab.shape}, expected {want}")


@functools.lru_cache(maxsize=64)
def window_mask(T: int, cfg: DSAConfig) -> np.ndarray:
    """Boolean ``(T, l_win)``: True where ``i + r*(k - m)`` lies in ``[0, T)``.

    Cached per ``(T, cfg)``; the returned array is read-only.
    """
    src = np.arange(T)[:, None] + cfg.r * (np.arange(cfg.l_win)[None, :] - cfg.m)
    mask = (src >= 0) & (src < T)
    mask.flags.writeable = False
    return mask


def pad_and_roll(K, cfg: DSAConfig) -> tuple[Tensor, np.ndarray]:
    """Gather each row's dilated window along the time axis (axis -2).

    Returns the rolled tensor of shape ``(..., T, l_win, d)`` and the
    ``(T, l_win)`` validity mask; pad cells hold zeros and are False in the mask.
    """
    K = tn.as_tensor(K)
    if K.ndim < 2 or K.shape[-2] < 1:
        raise tn.ShapeError(f"pad_and_roll needs (..., T, d) with T >= 1, got {K.shape}")
    T = K.shape[-2]
    r = cfg.r
    padded = tn.pad_axis(K, -2, cfg.m * r, cfg.n * r, 0.0)
    # copy k rolled left by k*r and truncated to T rows is the slice [k*r, k*r + T)
    return tn.dilated_windows(padded, cfg.l_win, r, T), window_mask(T, cfg)


def _padded_shape(x: np.ndarray, cfg: DSAConfig) -> tuple[int, ...]:
    return x.shape[:-2] + (x.shape[-2] + (cfg.m + cfg.n) * cfg.r, x.shape[-1])


def _pad_rows(x: np.ndarray, cfg: DSAConfig) -> np.ndarray:
    out = np.zeros(_padded_shape(x, cfg))
    out[..., cfg.m * cfg.r:cfg.m * cfg.r + x.shape[-2], :] = x
    return out


def dsa_forward(Q, K, V, cfg: DSAConfig, bias: Tensor | None = None,
                return_weights: bool = False):
    """Single-head DSA in O(T * l_win) time and memory.

    ``Q``, ``K``, ``V``: ``(..., T, d_f)``. ``bias``: optional ``(l_win, d_f)``
    relative-position table added on the key side. With ``return_weights`` the
    ``(..., T, l_win)`` attention weights are returned as well, detached.

    One fused tape op: keys and values are padded once and read through
    strided window views (pad and roll without the copies), and the backward
    pass scatters window gradients back slot by slot.
    """
    Q, K, V = tn.as_tensor(Q), tn.as_tensor(K), tn.as_tensor(V)
    if not (Q.shape == K.shape == V.shape):
        raise tn.ShapeError(f"Q/K/V shapes differ: {Q.shape} {K.shape} {V.shape}")
    if Q.ndim < 2 or Q.shape[-2] < 1:
        raise tn.ShapeError(f"DSA needs (..., T, d) with T >= 1, got {Q.shape}")
    T, d_f = Q.shape[-2:]
    L, r = cfg.l_win, cfg.r
    inputs = [Q, K, V]
    if bias is not None:
        bias = tn.as_tensor(bias)
        if bias.shape != (L, d_f):
            raise tn.ShapeError(f"bias table {bias.shape}, expected {(L, d_f)}")
        inputs.append(bias)
    valid = window_mask(T, cfg)
    assert valid[:, cfg.m].all()
    scale = 1.0 / math.sqrt(d_f)
    q = Q.data
    Kr = tn.window_view(_pad_rows(K.data, cfg), L, r, T)
    Vr = tn.window_view(_pad_rows(V.data, cfg), L, r, T)
    # window contractions as batched (l_win, d_f) x (d_f, 1) products
    e = (Kr @ q[..., None])[..., 0]
    if bias is not None:
        e = e + q @ bias.data.T
    e = np.where(valid, e * scale, -np.inf)
    e = np.exp(e - e.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    z = (p[..., None, :] @ Vr)[..., 0, :]

    def bw(g):
        dp = (Vr @ g[..., None])[..., 0]
        ds = p * (dp - (p * dp).sum(axis=-1, keepdims=True)) * scale
        gq = (ds[..., None, :] @ Kr)[..., 0, :]
        gk, gv = np.zeros(_padded_shape(q, cfg)), np.zeros(_padded_shape(q, cfg))
        for k in range(L):
            rows = slice(k * r, k * r + T)
            gk[..., rows, :] += ds[..., k, None] * q
            gv[..., rows, :] += p[..., k, None] * g
        keep = slice(cfg.m * r, cfg.m * r + T)
        grads = [gq, gk[..., keep, :], gv[..., keep, :]]
        if bias is not None:
            grads[0] = gq + ds @ bias.data
            grads.append(ds.reshape(-1, L).T @ q.reshape(-1, d_f))
        return tuple(grads)

    z = tn.custom_op(z, "dsa", inputs, bw)
    return (z, Tensor(p)) if return_weights else z


def full_attention(Q, K, V, return_weights: bool = False):
    """Unmasked scaled dot-product attention over axis -2."""
    Q, K, V = tn.as_tensor(Q), tn.as_tensor(K), tn.as_tensor(V)
    logits = (Q @ tn.swapaxes(K, -1, -2)) * (1.0 / math.sqrt(Q.shape[-1]))
    p = tn.softmax_lastdim(logits)
    z = p @ V
    return (z, p) if return_weights else z


ATTN_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def _project(x: Tensor, params: Mapping[str, Tensor]):
    for key in ATTN_KEYS:
        if key not in params:
            raise ConfigError(f"missing attention parameter {key!r}")
    q = x @ params["wq"] + params["bq"]
    k = x @ params["wk"] + params["bk"]
    v = x @ params["wv"] + params["bv"]
    return q, k, v


def multi_head_dsa(x, params: Mapping[str, Tensor], cfg: DSAConfig, return_weights: bool = False):
    """Project ``x`` (``(..., T, d_model)``) into heads, run DSA per head with its
    own window, concatenate and apply the output projection.

    Relative-position tables are read from ``params["rpe{h}"]`` when present.
    """
    x = tn.as_tensor(x)
    d_model = x.shape[-1]
    heads = cfg.num_heads
    if d_model != heads * cfg.d_f:
        raise ConfigError(f"d_model={d_model} is not heads({heads}) x d_f({cfg.d_f})")
    q, k, v = _project(x, params)
    outs, weights = [], []
    for h in range(heads):
        sl = (Ellipsis, slice(h * cfg.d_f, (h + 1) * cfg.d_f))
        z, p = dsa_forward(q[sl], k[sl], v[sl], cfg.head(h), params.get(f"rpe{h}"),
                           return_weights=True)
        outs.append(z)
        weights.append(p)
    out = (outs[0] if heads == 1 else tn.concat(outs, axis=-1)) @ params["wo"] + params["bo"]
    return (out, weights) if return_weights else out


def multi_head_full(x, params: Mapping[str, Tensor], heads: int, return_weights: bool = False):
    """Multi-head vanilla self-attention over axis -2, no positional term."""
    x = tn.as_tensor(x)
    d_model = x.shape[-1]
    if d_model % heads:
        raise ConfigError(f"d_model={d_model} not divisible by {heads} heads")
    d_f = d_model // heads
    q, k, v = _project(x, params)
    outs, weights = [], []
    for h in range(heads):
        sl = (Ellipsis, slice(h * d_f, (h + 1) * d_f))
        z, p = full_attention(q[sl], k[sl], v[sl], return_weights=True)
        outs.append(z)
        weights.append(p)
    out = (outs[0] if heads == 1 else tn.concat(outs, axis=-1)) @ params["wo"] + params["bo"]
    return (out, weights) if return_weights else out


def receptive_field(layers: Sequence[DSAConfig], fps: float) -> tuple[int, float]:
    """Input span (frames, seconds) seen by one output frame of a DSA stack.

    Each layer contributes ``(m + n) * r`` frames for its widest head.
    """
    if not layers:
        raise ConfigError("receptive_field needs at least one layer")
    if fps <= 0:
        raise ConfigError("fps must be positive")
    frames = 1 + sum(max(a + b for a, b in cfg.heads) * cfg.r for cfg in layers)
    return frames, frames / fps


def paper_layer_configs(n_layers: int = 9, d_f: int = 32, base: int = 2) -> list[DSAConfig]:
    return [DSAConfig(m=2, n=2, r=base ** l, d_f=d_f, heads=PAPER_HEADS) for l in range(n_layers)]
