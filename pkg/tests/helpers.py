"""Shared test utilities: central finite differences against the tape."""

from __future__ import annotations

import numpy as np

from beatkit import tensor as tn


def numeric_grad(f, arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        hi = f()
        arr[i] = old - eps
        lo = f()
        arr[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a), np.asarray(b)
    return float((np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)).max())


def check_grads(build, inputs: list[np.ndarray], eps: float = 1e-6) -> float:
    """``build(*tensors) -> scalar Tensor``; returns the worst relative error."""
    ts = [tn.Tensor(x, requires_grad=True) for x in inputs]
    tn.backward(build(*ts))
    worst = 0.0
    for t, x in zip(ts, inputs):
        def f():
            with tn.no_grad():
                return build(*[tn.Tensor(v) for v in inputs]).item()
        worst = max(worst, rel_error(t.grad, numeric_grad(f, x, eps)))
    return worst


def enumerate_best_path(space, log_em: np.ndarray) -> tuple[list[int], float]:
    """Exhaustive search over every path with non-zero probability.

    Successors come from ``transition_logprob`` evaluated on all state pairs,
    so nothing here shares code with the vectorised decoder.
    """
    import math

    from beatkit.dbn import transition_logprob

    T, S = log_em.shape
    succ = []
    for s in range(S):
        row = [(d, transition_logprob(space, s, d)) for d in range(S)]
        succ.append([(d, lp) for d, lp in row if lp > -math.inf])
    best = [-math.inf, None]
    path = []

    def walk(t, s, score):
        path.append(s)
        if t == T - 1:
            if score > best[0]:
                best[0], best[1] = score, list(path)
        else:
            for d, lp in succ[s]:
                walk(t + 1, d, score + lp + log_em[t + 1, d])
        path.pop()

    for s in range(S):
        walk(0, s, -math.log(S) + log_em[0, s])
    return best[1], best[0]
