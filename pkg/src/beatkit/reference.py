"""Quadratic masked attention, kept as the correctness oracle for the DSA kernel."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as tn
from .dsa import DSAConfig


def dilated_mask(T: int, cfg: DSAConfig) -> np.ndarray:
    """Boolean ``(T, T)``: True where some ``-m <= k <= n`` solves ``j = i + r*k``."""
    idx = np.arange(T, dtype=np.int32)
    diff = idx[None, :] - idx[:, None]
    k, rem = np.divmod(diff, cfg.r)
    return (rem == 0) & (k >= -cfg.m) & (k <= cfg.n)


def masked_reference_attention(Q, K, V, cfg: DSAConfig, return_weights: bool = False):
    """Full ``T x T`` logits, unattainable positions set to ``-inf``, softmax, then ``@ V``."""
    Q, K, V = tn.as_tensor(Q), tn.as_tensor(K), tn.as_tensor(V)
    if not (Q.shape[-2] == K.shape[-2] == V.shape[-2]):
        raise tn.ShapeError("Q, K and V must share the sequence length")
    T = Q.shape[-2]
    logits = (Q @ tn.swapaxes(K, -1, -2)) * (1.0 / math.sqrt(Q.shape[-1]))
    logits = tn.masked_fill(logits, ~dilated_mask(T, cfg), -np.inf)
    p = tn.softmax_lastdim(logits)
    z = p @ V
    return (z, p) if return_weights else z
