"""Temporal attention read as Markov transition matrices.

A layer's windowed attention ``(T, l_win)`` is scattered into a dense
``T x T`` row-stochastic matrix; the product over layers 1..L gives the
L-step transition matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .dsa import DSAConfig
from .model import BeatTransformer, DemixedClip

MAX_FRAMES = 2048


class MarkovError(ValueError):
    pass


@dataclass
class TransitionMatrix:
    data: np.ndarray
    steps: int = 1
    layers: tuple[int, ...] = ()
    head: str = "avg"

    @property
    def size(self) -> int:
        return int(self.data.shape[0])

    def row_sums(self) -> np.ndarray:
        return self.data.sum(axis=1)


def densify(weights: np.ndarray, cfg: DSAConfig) -> np.ndarray:
    """Scatter ``(T, l_win)`` window weights of one head into ``(T, T)``."""
    weights = np.asarray(weights, dtype=np.float64)
    T, L = weights.shape
    if L != cfg.l_win:
        raise MarkovError(f"weights have {L} window slots, config has {cfg.l_win}")
    if T > MAX_FRAMES:
        raise MarkovError(f"dense export is capped at {MAX_FRAMES} frames, got {T}")
    out = np.zeros((T, T))
    rows = np.repeat(np.arange(T), L)
    cols = (np.arange(T)[:, None] + cfg.r * (np.arange(L)[None, :] - cfg.m)).ravel()
    ok = (cols >= 0) & (cols < T)
    out[rows[ok], cols[ok]] = weights.ravel()[ok]
    return out


def layer_attention_matrix(layer_index: int, clip: DemixedClip, model: BeatTransformer,
                           head: int | str = "avg", channel: int | str = "drum",
                           attention=None) -> TransitionMatrix:
    """Dense attention of one temporal layer for one channel.

    ``head`` is a head index or ``"avg"`` (mean of the per-head matrices).
    ``attention`` may carry weights captured by an earlier forward pass.
    """
    cfg = model.cfg
    if not 0 <= layer_index < cfg.n_ttl:
        raise MarkovError(f"layer {layer_index} out of range 0..{cfg.n_ttl - 1}")
    if clip.n_frames > MAX_FRAMES:
        raise MarkovError(f"dense export is capped at {MAX_FRAMES} frames, got {clip.n_frames}")
    if isinstance(channel, str):
        if channel not in clip.channel_names:
            raise MarkovError(f"clip has no channel {channel!r}")
        channel = list(clip.channel_names).index(channel)
    if attention is None:
        attention = capture_attention(model, clip)
    dsa_cfg = cfg.layer_dsa(layer_index)
    heads = range(dsa_cfg.num_heads) if head == "avg" else [int(head)]
    mats = [densify(attention[layer_index][h][channel], dsa_cfg.head(h)) for h in heads]
    return TransitionMatrix(np.mean(mats, axis=0), 1, (layer_index,), str(head))


def capture_attention(model: BeatTransformer, clip: DemixedClip) -> list[list[np.ndarray]]:
    with tn.no_grad():
        return model.forward(clip, capture_attention=True).attention


def multi_step_product(matrices: Sequence[TransitionMatrix | np.ndarray]) -> TransitionMatrix:
    """``P1 @ P2 @ ... @ PL`` in layer order."""
    if not matrices:
        raise MarkovError("need at least one matrix")
    arrays = [m.data if isinstance(m, TransitionMatrix) else np.asarray(m, dtype=np.float64)
              for m in matrices]
    T = arrays[0].shape[0]
    for a in arrays:
        if a.shape != (T, T):
            raise MarkovError(f"matrix shape {a.shape} does not match {(T, T)}")
    out = arrays[0].copy()
    for a in arrays[1:]:
        out = out @ a
    layers = tuple(l for m in matrices if isinstance(m, TransitionMatrix) for l in m.layers)
    head = matrices[0].head if isinstance(matrices[0], TransitionMatrix) else "avg"
    return TransitionMatrix(out, len(arrays), layers, head)


def export_name(steps: int, head: int | str, fmt: str) -> str:
    return f"P_L{steps}_head{head}.{fmt}"


def graymap_bytes(data: np.ndarray) -> bytes:
    """Binary PGM, each row scaled by its maximum."""
    data = np.asarray(data, dtype=np.float64)
    peak = data.max(axis=1, keepdims=True)
    scaled = np.divide(data, peak, out=np.zeros_like(data), where=peak > 0)
    pixels = np.floor(np.clip(scaled, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def csv_text(data: np.ndarray) -> str:
    return "\n".join(",".join(f"{v:.17g}" for v in row) for row in np.asarray(data)) + "\n"


def export_matrix(P: TransitionMatrix | np.ndarray, path, fmt: str | None = None) -> Path:
    path = Path(path)
    data = P.data if isinstance(P, TransitionMatrix) else np.asarray(P, dtype=np.float64)
    fmt = fmt or path.suffix.lstrip(".")
    if fmt == "csv":
        path.write_text(csv_text(data))
    elif fmt == "pgm":
        path.write_bytes(graymap_bytes(data))
    else:
        raise MarkovError(f"unknown export format {fmt!r}")
    return path


def read_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def column_mass_ratio(P: np.ndarray, beat_frames: np.ndarray) -> float:
    """Mean column mass at ``beat_frames`` over the mean at the other frames."""
    mass = np.asarray(P).sum(axis=0)
    on = np.zeros(mass.size, bool)
    on[np.asarray(beat_frames, dtype=np.int64)] = True
    if on.all() or not on.any():
        raise MarkovError("need both beat and non-beat frames")
    return float(mass[on].mean() / mass[~on].mean())
