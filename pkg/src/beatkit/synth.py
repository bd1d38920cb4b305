"""Synthetic five-stem clips with exact metrical annotations.

The drum stem carries a burst at every beat (louder, with a low kick band, at
downbeats) plus faint off-beat hats; the bass stem holds one note per bar and
changes pitch at downbeats; piano, vocal and other are temporally correlated
noise with slow harmonic drift. Values are log(1 + magnitude).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import CHANNELS, DEFAULT_FPS, DemixedClip
from .targets import Annotation


@dataclass(frozen=True)
class SynthParams:
    n_frames: int = 2048
    n_mels: int = 128
    fps: float = DEFAULT_FPS
    bpm: float | None = None
    beats_per_bar: int | None = None
    tempo_range: tuple[float, float] = (80.0, 160.0)
    meters: tuple[int, ...] = (3, 4)
    noise: float = 0.15

    def __post_init__(self):
        if not 1 <= self.n_frames <= 8192:
            raise ValueError("n_frames must be in [1, 8192]")
        lo, hi = self.bpm, self.bpm
        if self.bpm is None:
            lo, hi = self.tempo_range
        if not (40.0 <= lo <= hi <= 240.0):
            raise ValueError("tempo must lie in [40, 240] BPM")
        meters = (self.beats_per_bar,) if self.beats_per_bar is not None else self.meters
        if any(m not in (3, 4) for m in meters):
            raise ValueError("beats_per_bar must be 3 or 4")


def _smooth_noise(rng, shape, alpha: float) -> np.ndarray:
    """AR(1) noise along axis 0 with unit marginal variance."""
    white = rng.standard_normal(shape)
    out = np.empty(shape)
    out[0] = white[0]
    scale = np.sqrt(1.0 - alpha * alpha)
    for t in range(1, shape[0]):
        out[t] = alpha * out[t - 1] + scale * white[t]
    return out


def _band(F: int, centre: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((np.arange(F) - centre) / width) ** 2)


def synth_clip(params: SynthParams, rng: np.random.Generator) -> tuple[DemixedClip, Annotation]:
    T, F, fps = params.n_frames, params.n_mels, params.fps
    bpm = params.bpm if params.bpm is not None else float(rng.uniform(*params.tempo_range))
    bpb = params.beats_per_bar if params.beats_per_bar is not None else int(rng.choice(params.meters))
    period = 60.0 / bpm
    t0 = float(rng.uniform(0.0, period))
    n_beats = int(np.floor(((T - 1) / fps - t0) / period)) + 1
    times = t0 + period * np.arange(max(n_beats, 0))
    times = times[np.rint(times * fps) <= T - 1]
    first_pos = int(rng.integers(1, bpb + 1))
    positions = (first_pos - 1 + np.arange(times.size)) % bpb + 1
    frames = np.rint(times * fps).astype(np.int64)

    mag = np.zeros((T, len(CHANNELS), F))
    t_idx = np.arange(T)
    vocal, piano, drum, bass, other = range(5)

    # drums
    snare = 0.6 * _band(F, 50, 18) + 0.25
    kick = _band(F, 8, 6)
    decay = 0.06 * fps
    for fr, pos in zip(frames, positions):
        env = np.where(t_idx >= fr, np.exp(-np.maximum(t_idx - fr, 0) / decay), 0.0)
        if pos == 1:
            mag[:, drum] += 3.0 * env[:, None] * (snare + 1.5 * kick)[None, :]
        else:
            mag[:, drum] += 1.6 * env[:, None] * snare[None, :]
    hat = _band(F, 112, 8)
    for fr in np.rint((times + period / 2) * fps).astype(np.int64):
        if fr < T:
            env = np.where(t_idx >= fr, np.exp(-np.maximum(t_idx - fr, 0) / (0.5 * decay)), 0.0)
            mag[:, drum] += 0.5 * env[:, None] * hat[None, :]

    # bass and piano: one note / chord per bar, changing at downbeats
    bar_starts = np.concatenate(([0], frames[positions == 1], [T]))
    bar_starts = np.unique(bar_starts)
    for a, b in zip(bar_starts[:-1], bar_starts[1:]):
        centre = rng.uniform(6, 36)
        accent = np.exp(-(t_idx[a:b] - a) / (0.4 * fps))
        mag[a:b, bass] += (0.6 + 1.2 * accent)[:, None] * _band(F, centre, 2.5)[None, :]
        chord = sum(_band(F, rng.uniform(30, 90), 2.0) for _ in range(3))
        mag[a:b, piano] += (0.4 + 0.6 * accent)[:, None] * chord[None, :]

    # correlated background in every stem
    for c, level in ((vocal, 0.8), (piano, 0.3), (drum, 0.15), (bass, 0.2), (other, 0.8)):
        drift = _band(F, rng.uniform(20, 100), rng.uniform(10, 30))
        mod = 0.5 + 0.5 * np.tanh(_smooth_noise(rng, (T,), 0.98))
        mag[:, c] += level * mod[:, None] * drift[None, :]
    mag += params.noise * np.abs(_smooth_noise(rng, (T, len(CHANNELS), F), 0.7))

    clip = DemixedClip(np.log1p(mag), fps, list(CHANNELS))
    return clip, Annotation(times, positions, bpb)
