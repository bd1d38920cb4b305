"""Bar-pointer dynamic Bayesian network for joint beat and downbeat decoding.

Each (meter B, beat interval tau) pair owns a cyclic chain of ``B * tau``
position states. Inside a bar the pointer advances one frame at a time with
probability 1; only at the bar wrap may the interval change, with probability
proportional to ``exp(-transition_lambda * |tau'/tau - 1|)``. Meters never mix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

OBS_FLOOR = 1e-12
NON_BEAT, BEAT, DOWNBEAT = 0, 1, 2


class DBNConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DBNConfig:
    min_bpm: float = 55.0
    max_bpm: float = 215.0
    beats_per_bar: tuple[int, ...] = (3, 4)
    observation_lambda: float = 6.0
    transition_lambda: float = 100.0
    threshold: float = 0.2
    fps: float = 43.07
    # place each beat on the activation peak inside its beat-state run
    correct: bool = True

    def __post_init__(self):
        object.__setattr__(self, "beats_per_bar", tuple(int(b) for b in self.beats_per_bar))
        if not 0 < self.min_bpm < self.max_bpm:
            raise DBNConfigError(f"need 0 < min_bpm < max_bpm, got {self.min_bpm}, {self.max_bpm}")
        if self.observation_lambda < 1:
            raise DBNConfigError("observation_lambda must be >= 1")
        if self.transition_lambda < 0:
            raise DBNConfigError("transition_lambda must be >= 0")
        if not 0 <= self.threshold < 1:
            raise DBNConfigError("threshold must lie in [0, 1)")
        if self.fps <= 0:
            raise DBNConfigError("fps must be positive")
        if not self.beats_per_bar or min(self.beats_per_bar) < 1:
            raise DBNConfigError("beats_per_bar needs at least one meter >= 1")

    @property
    def intervals(self) -> np.ndarray:
        lo = math.ceil(self.fps * 60.0 / self.max_bpm - 1e-9)
        hi = math.floor(self.fps * 60.0 / self.min_bpm + 1e-9)
        return np.arange(max(lo, 1), hi + 1)


@dataclass(frozen=True)
class StateSpace:
    """Flat state layout; block ``b`` occupies ``[start[b], start[b] + length[b])``."""

    cfg: DBNConfig
    block_meter: np.ndarray
    block_tau: np.ndarray
    block_start: np.ndarray
    block_length: np.ndarray
    state_block: np.ndarray
    state_pos: np.ndarray
    state_class: np.ndarray
    # per meter: block indices and the (src, dst) wrap log-transition matrix
    meter_blocks: dict = field(default_factory=dict)
    wrap_logprob: dict = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return int(self.state_pos.size)

    @property
    def n_blocks(self) -> int:
        return int(self.block_tau.size)

    def describe(self, s: int) -> tuple[int, int, int]:
        """``(beats_per_bar, tau, position)`` of state ``s``."""
        b = self.state_block[s]
        return int(self.block_meter[b]), int(self.block_tau[b]), int(self.state_pos[s])

    def beat_number(self, s: int) -> int:
        return int(self.state_pos[s] // self.block_tau[self.state_block[s]]) + 1


def _wrap_matrix(taus: np.ndarray, lam: float) -> np.ndarray:
    ratio = np.abs(taus[None, :] / taus[:, None] - 1.0)
    logits = -lam * ratio
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


def build_state_space(cfg: DBNConfig) -> StateSpace:
    taus = cfg.intervals
    if taus.size == 0:
        raise DBNConfigError(f"no beat interval fits {cfg.min_bpm}-{cfg.max_bpm} BPM at {cfg.fps} fps")
    meters, tau_col, starts, lengths = [], [], [], []
    meter_blocks, wrap = {}, {}
    start = 0
    for B in cfg.beats_per_bar:
        if B in meter_blocks:
            continue
        meter_blocks[B] = np.arange(len(meters), len(meters) + taus.size)
        wrap[B] = _wrap_matrix(taus.astype(np.float64), cfg.transition_lambda)
        for tau in taus:
            meters.append(B)
            tau_col.append(int(tau))
            starts.append(start)
            lengths.append(B * int(tau))
            start += B * int(tau)
    lengths_a = np.array(lengths)
    state_block = np.repeat(np.arange(len(lengths)), lengths_a)
    state_pos = np.arange(start) - np.repeat(np.array(starts), lengths_a)
    tau_s = np.array(tau_col)[state_block]
    in_beat = state_pos % tau_s
    is_beat = in_beat * cfg.observation_lambda < tau_s
    cls = np.where(is_beat, np.where(state_pos < tau_s, DOWNBEAT, BEAT), NON_BEAT)
    return StateSpace(cfg, np.array(meters), np.array(tau_col), np.array(starts), lengths_a,
                      state_block, state_pos, cls, meter_blocks, wrap)


def transition_logprob(space: StateSpace, src: int, dst: int) -> float:
    bs, bd = space.state_block[src], space.state_block[dst]
    ps, pd = space.state_pos[src], space.state_pos[dst]
    if ps < space.block_length[bs] - 1:
        return 0.0 if (bd == bs and pd == ps + 1) else -math.inf
    B = int(space.block_meter[bs])
    if pd != 0 or space.block_meter[bd] != B:
        return -math.inf
    blocks = space.meter_blocks[B]
    i = int(np.searchsorted(blocks, bs))
    j = int(np.searchsorted(blocks, bd))
    return float(space.wrap_logprob[B][i, j])


def class_log_emissions(beat_act, downbeat_act, observation_lambda: float) -> np.ndarray:
    """``(T, 3)`` log emissions for the non-beat, beat and downbeat classes."""
    beat = np.asarray(beat_act, dtype=np.float64)
    down = np.asarray(downbeat_act, dtype=np.float64)
    out = np.empty(beat.shape + (3,))
    out[..., NON_BEAT] = (1.0 - beat) / max(observation_lambda - 1.0, 1.0)
    out[..., BEAT] = beat - down
    out[..., DOWNBEAT] = down
    return np.log(np.maximum(out, OBS_FLOOR))


def observation_logprob(space: StateSpace, s: int, beat_act: float, downbeat_act: float) -> float:
    return float(class_log_emissions(beat_act, downbeat_act, space.cfg.observation_lambda)[space.state_class[s]])


def viterbi(space: StateSpace, T: int, log_em: Callable[[int], np.ndarray]) -> tuple[np.ndarray, float]:
    """Most likely state path given per-frame log emissions ``log_em(t)``.

    Initial distribution is uniform. Ties resolve to the smaller state index.
    Returns ``(path, log_probability)``.
    """
    if T < 1:
        return np.zeros(0, dtype=np.int64), 0.0
    S = space.n_states
    starts = space.block_start
    ends = starts + space.block_length - 1
    delta = np.full(S, -math.log(S)) + log_em(0)
    back = np.zeros((T, space.n_blocks), dtype=np.int64)
    for t in range(1, T):
        new = np.empty(S)
        new[1:] = delta[:-1]
        for B, blocks in space.meter_blocks.items():
            cand = delta[ends[blocks]][:, None] + space.wrap_logprob[B]
            arg = np.argmax(cand, axis=0)
            new[starts[blocks]] = cand[arg, np.arange(blocks.size)]
            back[t, blocks] = blocks[arg]
        delta = new + log_em(t)
    path = np.empty(T, dtype=np.int64)
    s = int(np.argmax(delta))
    score = float(delta[s])
    path[-1] = s
    for t in range(T - 1, 0, -1):
        b = space.state_block[s]
        if space.state_pos[s] > 0:
            s -= 1
        else:
            s = int(ends[back[t, b]])
        path[t - 1] = s
    return path, score


def viterbi_matrix(space: StateSpace, log_em: np.ndarray) -> tuple[np.ndarray, float]:
    log_em = np.asarray(log_em, dtype=np.float64)
    if log_em.ndim != 2 or log_em.shape[1] != space.n_states:
        raise ValueError(f"emission matrix must be (T, {space.n_states}), got {log_em.shape}")
    return viterbi(space, log_em.shape[0], lambda t: log_em[t])


@dataclass
class BeatSequence:
    times: np.ndarray
    positions: np.ndarray
    fps: float
    beats_per_bar: int | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.times.size)

    @property
    def downbeat_times(self) -> np.ndarray:
        return self.times[self.positions == 1]


def _beat_frames(space: StateSpace, path: np.ndarray, beat: np.ndarray, correct: bool) -> np.ndarray:
    on = space.state_class[path] != NON_BEAT
    edges = np.diff(on.astype(np.int8))
    enters = np.flatnonzero(edges == 1) + 1
    if on[0]:
        enters = np.r_[0, enters]
    if not correct:
        return enters
    leaves = np.flatnonzero(edges == -1) + 1
    if on[-1]:
        leaves = np.r_[leaves, on.size]
    return np.array([a + int(np.argmax(beat[a:b])) for a, b in zip(enters, leaves)], dtype=np.int64)


def viterbi_decode(acts, cfg: DBNConfig | None = None, space: StateSpace | None = None) -> BeatSequence:
    """Decode an activation track (anything with ``beat``/``downbeat``/``fps``).

    Margins where the beat activation is below ``threshold`` are trimmed
    before decoding; a track entirely below it yields no beats.
    """
    cfg = cfg or DBNConfig(fps=acts.fps)
    space = space or build_state_space(cfg)
    beat = np.asarray(acts.beat, dtype=np.float64)
    down = np.asarray(acts.downbeat, dtype=np.float64)
    above = np.flatnonzero(beat >= cfg.threshold)
    if above.size == 0:
        return BeatSequence(np.zeros(0), np.zeros(0, dtype=np.int64), cfg.fps)
    first, last = int(above[0]), int(above[-1]) + 1
    beat, down = beat[first:last], down[first:last]
    em = class_log_emissions(beat, down, cfg.observation_lambda)
    cls = space.state_class
    path, _ = viterbi(space, beat.size, lambda t: em[t][cls])
    frames = _beat_frames(space, path, beat, cfg.correct)
    positions = np.array([space.beat_number(s) for s in path[frames]], dtype=np.int64)
    meter = int(space.block_meter[space.state_block[path[-1]]])
    return BeatSequence((frames + first) / cfg.fps, positions, cfg.fps, meter)
