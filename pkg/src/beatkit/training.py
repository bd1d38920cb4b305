"""Single-sequence training loop with Adam and a plateau learning-rate schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as tn
from .model import BeatTransformer, DemixedClip
from .targets import (Annotation, TargetTrack, build_targets, derive_tempo_target,
                      multitask_loss, partial_demix_augment, widen_targets)

log = logging.getLogger(__name__)


class DivergenceError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_factor: float = 5.0
    plateau_patience: int = 2
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-7
    max_frames: int = 8192
    val_fraction: float = 0.2
    augment: bool = True
    seed: int = 0


class Adam:
    def __init__(self, params: Mapping[str, tn.Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array([float(self.step_count)])}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.step_count = int(arrays["adam.step"][0])
        for k in self.params:
            self.m[k] = np.array(arrays[f"adam.m.{k}"])
            self.v[k] = np.array(arrays[f"adam.v.{k}"])


class PlateauScheduler:
    """Divide the learning rate by ``factor`` after ``patience`` consecutive
    epochs without validation improvement; never go below ``min_lr``."""

    def __init__(self, lr: float, factor: float = 5.0, patience: int = 2,
                 min_lr: float = 1e-7, threshold: float = 1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> bool:
        if val_loss < self.best * (1.0 - self.threshold):
            self.best = val_loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.bad_epochs = 0
            new = max(self.lr / self.factor, self.min_lr)
            reduced = new < self.lr
            self.lr = new
            return reduced
        return False

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"sched.lr": np.array([self.lr]), "sched.best": np.array([self.best if math.isfinite(self.best) else -1.0]),
                "sched.bad": np.array([float(self.bad_epochs)])}

    def load_state(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.lr = float(arrays["sched.lr"][0])
        best = float(arrays["sched.best"][0])
        self.best = math.inf if best < 0 else best
        self.bad_epochs = int(arrays["sched.bad"][0])


@dataclass
class Example:
    clip: DemixedClip
    ann: Annotation
    targets: TargetTrack


def split_example(clip: DemixedClip, ann: Annotation, max_frames: int) -> list[Example]:
    """Cut clips longer than ``max_frames`` into consecutive chunks; the tempo
    target of every chunk comes from the whole annotation."""
    T = clip.n_frames
    tempo = derive_tempo_target(ann, clip.fps)
    out = []
    for start in range(0, T, max_frames):
        stop = min(start + max_frames, T)
        vals = clip.values[start:stop]
        lo, hi = start / clip.fps, (stop - 0.5) / clip.fps
        sel = (ann.beat_times >= lo - 0.5 / clip.fps) & (ann.beat_times < hi)
        sub = Annotation(ann.beat_times[sel] - lo, ann.beat_positions[sel], ann.beats_per_bar)
        sub_clip = DemixedClip(vals, clip.fps, list(clip.channel_names))
        tgt = widen_targets(sub, stop - start, clip.fps)
        tgt.tempo = tempo
        out.append(Example(sub_clip, sub, tgt))
    return out


def make_examples(dataset: Sequence[tuple[DemixedClip, Annotation]], max_frames: int = 8192) -> list[Example]:
    out = []
    for clip, ann in dataset:
        if clip.n_frames > max_frames:
            out.extend(split_example(clip, ann, max_frames))
        else:
            out.append(Example(clip, ann, build_targets(ann, clip.n_frames, clip.fps)))
    return out


def validation_split(n: int, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    if n < 2 or fraction <= 0:
        return list(range(n)), []
    perm = np.random.default_rng([seed, 0x5A17]).permutation(n)
    n_val = max(1, int(round(fraction * n)))
    return sorted(perm[n_val:].tolist()), sorted(perm[:n_val].tolist())


def evaluate_loss(model: BeatTransformer, examples: Sequence[Example]) -> float:
    if not examples:
        return math.nan
    try:
        with tn.no_grad():
            losses = [multitask_loss(model.forward(ex.clip), ex.targets).item() for ex in examples]
    except tn.NonFiniteError as exc:
        raise DivergenceError(f"evaluation: {exc}") from exc
    value = float(np.mean(losses))
    if not math.isfinite(value):
        raise DivergenceError(f"evaluation loss is {value}")
    return value


@dataclass
class TrainState:
    optimizer: Adam
    scheduler: PlateauScheduler
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"train.epoch": np.array([float(self.epoch)])}
        out.update(self.optimizer.state_arrays())
        out.update(self.scheduler.state_arrays())
        if self.history:
            out["train.history"] = np.array([[h["epoch"], h["train_loss"], h["val_loss"], h["lr"]]
                                             for h in self.history])
        return out

    def load(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.epoch = int(arrays["train.epoch"][0])
        self.optimizer.load_state(arrays)
        self.scheduler.load_state(arrays)
        self.history = [dict(epoch=int(r[0]), train_loss=float(r[1]), val_loss=float(r[2]), lr=float(r[3]))
                        for r in arrays.get("train.history", np.zeros((0, 4)))]


def new_state(model: BeatTransformer, cfg: TrainConfig) -> TrainState:
    opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    sched = PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr,
                             cfg.plateau_threshold)
    return TrainState(opt, sched)


def train_loop(model: BeatTransformer, dataset: Sequence[tuple[DemixedClip, Annotation]],
               cfg: TrainConfig, state: TrainState | None = None,
               on_epoch: Callable[[dict, TrainState], None] | None = None) -> TrainState:
    """Train in place. Epoch 0 of the history is the evaluation-mode loss of the
    untrained model; epochs 1..N hold the mean training-mode loss.

    Each epoch draws its shuffling, augmentation and dropout from a generator
    seeded by ``(seed, epoch)``, so resuming from a saved state reproduces the
    remaining epochs exactly.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    examples = make_examples(dataset, cfg.max_frames)
    train_idx, val_idx = validation_split(len(examples), cfg.val_fraction, cfg.seed)
    train_ex = [examples[i] for i in train_idx]
    val_ex = [examples[i] for i in val_idx]
    state = state or new_state(model, cfg)
    opt, sched = state.optimizer, state.scheduler

    if state.epoch == 0 and not state.history:
        row = dict(epoch=0, train_loss=evaluate_loss(model, train_ex),
                   val_loss=evaluate_loss(model, val_ex), lr=sched.lr)
        state.history.append(row)
        log.info("epoch 0: train %.4f val %.4f", row["train_loss"], row["val_loss"])
        if on_epoch:
            on_epoch(row, state)

    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        losses = []
        for i in rng.permutation(len(train_ex)):
            ex = train_ex[i]
            clip = partial_demix_augment(ex.clip, rng) if cfg.augment and ex.clip.n_channels == 5 else ex.clip
            opt.lr = sched.lr
            opt.zero_grad()
            try:
                loss = multitask_loss(model.forward(clip, rng=rng), ex.targets)
            except tn.NonFiniteError as exc:
                tn.current_tape().clear()
                raise DivergenceError(f"epoch {epoch}, example {i}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                tn.current_tape().clear()
                raise DivergenceError(f"epoch {epoch}, example {i}: loss is {value}")
            tn.backward(loss)
            if not all(p.grad is None or np.isfinite(p.grad).all() for p in model.params.values()):
                raise DivergenceError(f"epoch {epoch}, example {i}: non-finite gradient")
            opt.step()
            losses.append(value)
        val = evaluate_loss(model, val_ex)
        row = dict(epoch=epoch, train_loss=float(np.mean(losses)), val_loss=val, lr=sched.lr)
        if val_ex:
            sched.step(val)
        state.epoch = epoch
        state.history.append(row)
        log.info("epoch %d: train %.4f val %.4f lr %.1e", epoch, row["train_loss"], val, row["lr"])
        if on_epoch:
            on_epoch(row, state)
    return state
