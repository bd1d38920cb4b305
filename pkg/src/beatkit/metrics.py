"""Beat and downbeat evaluation: F-measure and continuity (CMLt, AMLt).

Conventions follow the community-standard beat evaluation toolkit: a 70 ms
window for the F-measure and a 17.5 % phase/period tolerance for continuity,
with the double, half and off-beat variants of the reference for AMLt.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

F_TOLERANCE = 0.070
CONTINUITY_TOLERANCE = 0.175


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MatchCounts:
    hits: int
    false_positives: int
    misses: int

    @property
    def precision(self) -> float:
        n = self.hits + self.false_positives
        return self.hits / n if n else 0.0

    @property
    def recall(self) -> float:
        n = self.hits + self.misses
        return self.hits / n if n else 0.0


def _times(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).ravel()
    if a.size > 1 and (np.diff(a) < 0).any():
        raise MetricError("beat times must be ascending")
    return a


def match_counts(est, ref, tol: float = F_TOLERANCE) -> MatchCounts:
    """Greedy one-to-one matching: candidate pairs within ``tol`` are accepted
    closest first (ties by reference then estimate index)."""
    est, ref = _times(est), _times(ref)
    if est.size == 0 or ref.size == 0:
        return MatchCounts(0, int(est.size), int(ref.size))
    diff = np.abs(ref[:, None] - est[None, :])
    ri, ei = np.nonzero(diff <= tol)
    order = np.lexsort((ei, ri, diff[ri, ei]))
    used_r = np.zeros(ref.size, bool)
    used_e = np.zeros(est.size, bool)
    hits = 0
    for k in order:
        r, e = ri[k], ei[k]
        if not used_r[r] and not used_e[e]:
            used_r[r] = used_e[e] = True
            hits += 1
    return MatchCounts(hits, int(est.size) - hits, int(ref.size) - hits)


def f_measure(est, ref, tol: float = F_TOLERANCE) -> float:
    est, ref = _times(est), _times(ref)
    if est.size == 0 and ref.size == 0:
        return 1.0
    c = match_counts(est, ref, tol)
    p, r = c.precision, c.recall
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def reference_variations(ref: np.ndarray) -> list[np.ndarray]:
    """Same, off-beat, double, half (odd beats), half (even beats)."""
    double = np.interp(np.arange(0, ref.size - 0.5, 0.5), np.arange(ref.size), ref)
    return [ref, double[1::2], double, ref[::2], ref[1::2]]


def _continuity_hits(est: np.ndarray, ref: np.ndarray, tol: float) -> int:
    if ref.size < 2 or est.size < 2:
        return 0
    used = np.zeros(ref.size, bool)
    hits = 0
    for m in range(est.size):
        diffs = np.abs(est[m] - ref)
        near = int(np.argmin(diffs))
        if used[near]:
            continue
        if m == 0 or near == 0:
            # nothing behind us: look forward, or backward at the last beat
            ref_iv = ref[near + 1] - ref[near] if near + 1 < ref.size else ref[near] - ref[near - 1]
            est_iv = est[m + 1] - est[m] if m + 1 < est.size else est[m] - est[m - 1]
        else:
            ref_iv = ref[near] - ref[near - 1]
            est_iv = est[m] - est[m - 1]
        if ref_iv <= 0:
            continue
        if diffs[near] / ref_iv < tol and abs(1.0 - est_iv / ref_iv) < tol:
            used[near] = True
            hits += 1
    return hits


def continuity_scores(est, ref, tol: float = CONTINUITY_TOLERANCE) -> tuple[float, float]:
    """``(CMLt, AMLt)``: fraction of beats tracked at the correct metrical
    level, and at the best of the allowed levels. Each level is normalised by
    the longer of its reference variant and the estimate."""
    est, ref = _times(est), _times(ref)
    if ref.size < 2:
        raise MetricError("continuity needs at least two reference beats")
    if est.size < 2:
        return 0.0, 0.0
    scores = [_continuity_hits(est, v, tol) / max(v.size, est.size) for v in reference_variations(ref)]
    return scores[0], max(scores)


@dataclass(frozen=True)
class MetricReport:
    beat_f: float
    beat_cmlt: float
    beat_amlt: float
    downbeat_f: float
    downbeat_cmlt: float
    downbeat_amlt: float
    beat_counts: MatchCounts
    downbeat_counts: MatchCounts

    COLUMNS = ("beat_f", "beat_cmlt", "beat_amlt", "downbeat_f", "downbeat_cmlt", "downbeat_amlt")

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, c) for c in self.COLUMNS)

    def as_dict(self) -> dict:
        return asdict(self)


def _continuity_or_nan(est, ref) -> tuple[float, float]:
    try:
        return continuity_scores(est, ref)
    except MetricError:
        return float("nan"), float("nan")


def evaluate(est_times, est_positions, ref_times, ref_positions) -> MetricReport:
    """Score one track; continuity is NaN when the reference has < 2 beats."""
    est_times, ref_times = _times(est_times), _times(ref_times)
    est_down = est_times[np.asarray(est_positions) == 1]
    ref_down = ref_times[np.asarray(ref_positions) == 1]
    bc, ba = _continuity_or_nan(est_times, ref_times)
    dc, da = _continuity_or_nan(est_down, ref_down)
    return MetricReport(f_measure(est_times, ref_times), bc, ba,
                        f_measure(est_down, ref_down), dc, da,
                        match_counts(est_times, ref_times), match_counts(est_down, ref_down))
