"""Supervision targets, multi-task loss and partial-demix augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .model import N_TEMPO, DemixedClip, EncoderOutput
from .tensor import Tensor

WIDEN_WEIGHTS = (1.0, 0.5, 0.25)
TEMPO_SMOOTHING = (0.25, 0.5, 0.25)
PRED_CLIP = 1e-7
# probabilities of merging 0 (no-op), 2, 3 or 4 channels
MERGE_CHOICES = (0, 2, 3, 4)
MERGE_PROBS = (0.5, 0.3, 0.1, 0.1)


class AnnotationError(ValueError):
    pass


@dataclass
class Annotation:
    beat_times: np.ndarray
    beat_positions: np.ndarray
    beats_per_bar: int

    def __post_init__(self):
        self.beat_times = np.asarray(self.beat_times, dtype=np.float64)
        self.beat_positions = np.asarray(self.beat_positions, dtype=np.int64)
        if self.beat_times.shape != self.beat_positions.shape:
            raise AnnotationError("times and positions differ in length")
        if self.beat_times.size > 1 and not (np.diff(self.beat_times) > 0).all():
            raise AnnotationError("beat times must be strictly ascending")
        if self.beat_positions.size and (
                self.beat_positions.min() < 1 or self.beat_positions.max() > self.beats_per_bar):
            raise AnnotationError("positions must lie in 1..beats_per_bar")

    @property
    def downbeat_times(self) -> np.ndarray:
        return self.beat_times[self.beat_positions == 1]

    @classmethod
    def from_events(cls, events) -> "Annotation":
        ev = np.asarray(events, dtype=np.float64).reshape(-1, 2)
        bpb = int(ev[:, 1].max()) if ev.size else 1
        return cls(ev[:, 0], ev[:, 1].astype(np.int64), bpb)


@dataclass
class TargetTrack:
    beat: np.ndarray
    downbeat: np.ndarray
    tempo: np.ndarray


def _frames(times: np.ndarray, T: int, fps: float) -> np.ndarray:
    frames = np.rint(np.asarray(times) * fps).astype(np.int64)
    if frames.size and (frames.max() >= T or frames.min() < 0):
        raise AnnotationError(f"beat at frame {frames.max()} outside clip of {T} frames")
    return frames


def widen(frames: np.ndarray, T: int) -> np.ndarray:
    """1.0 at each frame, 0.5 at +-1, 0.25 at +-2; overlaps take the maximum."""
    out = np.zeros(T)
    for dist, w in enumerate(WIDEN_WEIGHTS):
        for sign in ((1,) if dist == 0 else (-1, 1)):
            idx = frames + sign * dist
            idx = idx[(idx >= 0) & (idx < T)]
            np.maximum.at(out, idx, w)
    return out


def widen_targets(ann: Annotation, T: int, fps: float) -> TargetTrack:
    beat = widen(_frames(ann.beat_times, T, fps), T)
    down = widen(_frames(ann.downbeat_times, T, fps), T)
    return TargetTrack(beat, down, np.zeros(N_TEMPO))


def bpm_of(ann: Annotation) -> float:
    if ann.beat_times.size < 2:
        raise AnnotationError("need at least two beats to derive a tempo")
    return 60.0 / float(np.median(np.diff(ann.beat_times)))


def derive_tempo_target(ann: Annotation, fps: float | None = None, n_classes: int = N_TEMPO) -> np.ndarray:
    """Tempo class ``c`` covers ``c`` BPM (1-based, 1..n_classes); the unit mass
    is smoothed 0.25/0.5/0.25 over neighbouring classes and renormalised."""
    bpm = float(np.clip(np.rint(bpm_of(ann)), 1, n_classes))
    centre = int(bpm) - 1
    dist = np.zeros(n_classes)
    for off, w in zip((-1, 0, 1), TEMPO_SMOOTHING):
        if 0 <= centre + off < n_classes:
            dist[centre + off] += w
    return dist / dist.sum()


def build_targets(ann: Annotation, T: int, fps: float) -> TargetTrack:
    tgt = widen_targets(ann, T, fps)
    tgt.tempo = derive_tempo_target(ann, fps)
    return tgt


def _bce(pred: Tensor, target: np.ndarray) -> Tensor:
    p = tn.clip(pred, PRED_CLIP, 1.0 - PRED_CLIP)
    ll = target * tn.log(p) + (1.0 - target) * tn.log(1.0 - p)
    return -tn.mean(ll)


def multitask_loss(out: EncoderOutput, tgt: TargetTrack, parts: bool = False):
    """Equal-weight mean of beat BCE, downbeat BCE and tempo cross entropy."""
    if out.beat.shape != tgt.beat.shape or out.downbeat.shape != tgt.downbeat.shape:
        raise tn.ShapeError(f"prediction length {out.beat.shape} vs target {tgt.beat.shape}")
    l_beat = _bce(out.beat, tgt.beat)
    l_down = _bce(out.downbeat, tgt.downbeat)
    l_tempo = -tn.tsum(tgt.tempo * tn.log(tn.clip(out.tempo, PRED_CLIP, 1.0 - PRED_CLIP)))
    total = (l_beat + l_down + l_tempo) * (1.0 / 3.0)
    if parts:
        return total, {"beat": l_beat.item(), "downbeat": l_down.item(), "tempo": l_tempo.item()}
    return total


def merge_channels(clip: DemixedClip, chosen) -> DemixedClip:
    """Sum the chosen channels in linear magnitude; the merged channel takes the
    slot of the lowest chosen index."""
    chosen = sorted(int(c) for c in chosen)
    lin = np.expm1(clip.values)
    merged = np.log1p(lin[:, chosen, :].sum(axis=1))
    keep, names = [], []
    for c in range(clip.n_channels):
        if c == chosen[0]:
            keep.append(merged)
            names.append("&".join(clip.channel_names[i] for i in chosen))
        elif c not in chosen:
            keep.append(clip.values[:, c, :])
            names.append(clip.channel_names[c])
    return DemixedClip(np.stack(keep, axis=1), clip.fps, names)


def sample_merge(rng: np.random.Generator, n_channels: int = 5) -> tuple[int, ...]:
    k = MERGE_CHOICES[rng.choice(len(MERGE_CHOICES), p=MERGE_PROBS)]
    if k == 0:
        return ()
    return tuple(sorted(rng.choice(n_channels, size=k, replace=False).tolist()))


def partial_demix_augment(clip: DemixedClip, rng: np.random.Generator) -> DemixedClip:
    if clip.n_channels != 5:
        raise tn.ContractError(f"partial demix expects 5 stems, got {clip.n_channels}")
    chosen = sample_merge(rng, 5)
    return merge_channels(clip, chosen) if chosen else clip
