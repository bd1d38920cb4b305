import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beatkit import tensor as tn
from beatkit.dsa import (PAPER_HEADS, ConfigError, DSAConfig, RelativeBias, dsa_forward,
                         full_attention, multi_head_dsa, pad_and_roll, paper_layer_configs,
                         receptive_field, window_mask)
from beatkit.reference import dilated_mask, masked_reference_attention
from beatkit.tensor import Tensor

from helpers import check_grads

WINDOWS = [(2, 2), (0, 4), (1, 3), (3, 1), (4, 0)]


def qkv(T, d, seed):
    rng = np.random.default_rng(seed)
    return [rng.uniform(-1, 1, (T, d)) for _ in range(3)]


# pad_and_roll ------------------------------------------------------------------

def test_roll_figure_geometry():
    T = 12
    K = np.arange(T, dtype=float)[:, None] * np.ones((1, 3))
    rolled, valid = pad_and_roll(Tensor(K), DSAConfig(m=2, n=2, r=2, d_f=3))
    i = 6
    np.testing.assert_array_equal(rolled.data[i, :, 0], [2, 4, 6, 8, 10])
    assert valid[i].all()
    # near the start the two leftmost offsets fall outside the clip
    np.testing.assert_array_equal(valid[1], [False, False, True, True, True])
    np.testing.assert_array_equal(rolled.data[1, :2], 0.0)


def test_roll_single_frame():
    K = np.array([[1.0, 2.0, 3.0]])
    rolled, valid = pad_and_roll(Tensor(K), DSAConfig(m=0, n=0, r=1, d_f=3))
    assert rolled.shape == (1, 1, 3) and valid.all()
    np.testing.assert_array_equal(rolled.data[0, 0], K[0])


@settings(max_examples=60, deadline=None)
@given(T=st.integers(1, 64), r=st.sampled_from([1, 2, 3, 4, 8]), w=st.sampled_from(WINDOWS),
       seed=st.integers(0, 1000))
def test_roll_matches_brute_gather(T, r, w, seed):
    cfg = DSAConfig(m=w[0], n=w[1], r=r, d_f=2)
    K = np.random.default_rng(seed).normal(size=(T, 2))
    rolled, valid = pad_and_roll(Tensor(K), cfg)
    assert rolled.shape == (T, cfg.l_win, 2)
    for i in range(T):
        for k in range(cfg.l_win):
            j = i + r * (k - cfg.m)
            assert valid[i, k] == (0 <= j < T)
            if 0 <= j < T:
                np.testing.assert_array_equal(rolled.data[i, k], K[j])
            else:
                np.testing.assert_array_equal(rolled.data[i, k], 0.0)


# masked reference ---------------------------------------------------------------

def test_reference_all_pass_equals_plain_attention():
    Q, K, V = qkv(10, 4, 0)
    cfg = DSAConfig(m=10, n=10, r=1, d_f=4)
    assert dilated_mask(10, cfg).all()
    np.testing.assert_allclose(masked_reference_attention(Q, K, V, cfg).data,
                               full_attention(Q, K, V).data, atol=1e-12)


def test_reference_zero_window_returns_v():
    Q, K, V = qkv(9, 3, 1)
    np.testing.assert_allclose(masked_reference_attention(Q, K, V, DSAConfig(0, 0, 3, 3)).data, V,
                               atol=1e-15)


def test_reference_attainable_set():
    mask = dilated_mask(8, DSAConfig(m=2, n=2, r=2, d_f=1))
    assert set(np.flatnonzero(mask[4])) == {0, 2, 4, 6}


# kernel ------------------------------------------------------------------------

@pytest.mark.parametrize("r", [1, 2, 4])
@pytest.mark.parametrize("w", WINDOWS)
def test_kernel_equals_reference_T32(r, w):
    Q, K, V = qkv(32, 4, r * 10 + w[0])
    cfg = DSAConfig(m=w[0], n=w[1], r=r, d_f=4)
    np.testing.assert_allclose(dsa_forward(Q, K, V, cfg).data,
                               masked_reference_attention(Q, K, V, cfg).data, atol=1e-9, rtol=0)


def test_kernel_constant_keys_average_values():
    T, cfg = 11, DSAConfig(m=2, n=2, r=2, d_f=3)
    Q, _, V = qkv(T, 3, 2)
    K = np.ones((T, 3))
    z, p = dsa_forward(Q, K, V, cfg, return_weights=True)
    valid = window_mask(T, cfg)
    for i in range(T):
        np.testing.assert_allclose(p.data[i][valid[i]], 1.0 / valid[i].sum(), atol=1e-12)
        idx = i + cfg.r * (np.flatnonzero(valid[i]) - cfg.m)
        np.testing.assert_allclose(z.data[i], V[idx].mean(axis=0), atol=1e-12)


def test_kernel_zero_window_returns_v():
    Q, K, V = qkv(7, 2, 3)
    np.testing.assert_allclose(dsa_forward(Q, K, V, DSAConfig(0, 0, 1, 2)).data, V, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(T=st.integers(1, 40), r=st.sampled_from([1, 2, 4, 8]), w=st.sampled_from(WINDOWS),
       seed=st.integers(0, 10_000))
def test_kernel_rows_stochastic(T, r, w, seed):
    Q, K, V = qkv(T, 4, seed)
    cfg = DSAConfig(m=w[0], n=w[1], r=r, d_f=4)
    bias = Tensor(np.random.default_rng(seed + 1).normal(size=(cfg.l_win, 4)))
    _, p = dsa_forward(Q, K, V, cfg, bias=bias, return_weights=True)
    np.testing.assert_allclose(p.data.sum(-1), 1.0, atol=1e-9)
    assert (p.data[~window_mask(T, cfg)] == 0).all()


def test_kernel_bias_term():
    """Hand evaluation of e_ik = (q.k + q.a_k) / sqrt(d) for one row."""
    T, cfg = 6, DSAConfig(m=1, n=1, r=1, d_f=2)
    Q, K, V = qkv(T, 2, 4)
    a = np.random.default_rng(5).normal(size=(3, 2))
    _, p = dsa_forward(Q, K, V, cfg, bias=Tensor(a), return_weights=True)
    i = 3
    e = np.array([Q[i] @ K[i + k - 1] + Q[i] @ a[k] for k in range(3)]) / math.sqrt(2)
    np.testing.assert_allclose(p.data[i], np.exp(e) / np.exp(e).sum(), atol=1e-12)


def test_kernel_locality():
    T, cfg = 40, DSAConfig(m=1, n=3, r=4, d_f=3)
    Q, K, V = qkv(T, 3, 6)
    base = dsa_forward(Q, K, V, cfg).data
    j = 17
    K2, V2 = K.copy(), V.copy()
    K2[j] += 0.5
    V2[j] -= 0.3
    delta = np.abs(dsa_forward(Q, K2, V2, cfg).data - base).max(axis=1)
    reach = {j - cfg.r * k for k in range(-cfg.m, cfg.n + 1)}
    for i in range(T):
        if i in reach:
            assert delta[i] > 0
        else:
            assert delta[i] == 0.0


def test_kernel_grad_fd():
    cfg = DSAConfig(m=1, n=3, r=2, d_f=3)
    Q, K, V = qkv(9, 3, 7)
    a = np.random.default_rng(8).uniform(-1, 1, (cfg.l_win, 3))
    w = np.random.default_rng(9).uniform(-1, 1, (9, 3))
    err = check_grads(lambda q, k, v, b: tn.tsum(dsa_forward(q, k, v, cfg, bias=b) * w), [Q, K, V, a])
    assert err < 1e-4


def test_kernel_grad_fd_batched():
    cfg = DSAConfig(m=0, n=2, r=3, d_f=2)
    rng = np.random.default_rng(11)
    Q, K, V = (rng.normal(size=(2, 3, 8, 2)) for _ in range(3))
    a = rng.uniform(-1, 1, (cfg.l_win, 2))
    w = rng.uniform(-1, 1, (2, 3, 8, 2))
    err = check_grads(lambda q, k, v, b: tn.tsum(dsa_forward(q, k, v, cfg, bias=b) * w), [Q, K, V, a])
    assert err < 1e-4


def test_kernel_shape_checks():
    Q, K, V = qkv(5, 2, 0)
    with pytest.raises(tn.ShapeError):
        dsa_forward(Q, K[:4], V, DSAConfig(1, 1, 1, 2))
    with pytest.raises(tn.ShapeError):
        dsa_forward(Q, K, V, DSAConfig(1, 1, 1, 2), bias=Tensor(np.zeros((2, 2))))


def test_config_validation():
    with pytest.raises(ConfigError):
        DSAConfig(m=-1)
    with pytest.raises(ConfigError):
        DSAConfig(r=0)
    assert DSAConfig(m=2, n=2).l_win == 5


# multi-head ----------------------------------------------------------------------

def _attn_params(d, rng, identity=False):
    p = {}
    for name in "qkvo":
        p[f"w{name}"] = Tensor(np.eye(d) if identity else rng.uniform(-0.5, 0.5, (d, d)))
        p[f"b{name}"] = Tensor(np.zeros(d) if identity else rng.uniform(-0.1, 0.1, d))
    return p


def test_paper_head_set():
    assert PAPER_HEADS[:4] == ((2, 2),) * 4
    assert [m for m, _ in PAPER_HEADS[4:]] == [0, 1, 3, 4]
    assert all(m + n == 4 for m, n in PAPER_HEADS)
    assert DSAConfig(heads=PAPER_HEADS).num_heads == 8


def test_single_head_zero_window_passes_x_through():
    x = np.random.default_rng(0).normal(size=(6, 4))
    out = multi_head_dsa(Tensor(x), _attn_params(4, None, identity=True), DSAConfig(0, 0, 1, 4))
    np.testing.assert_allclose(out.data, x, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(T=st.integers(1, 20), heads=st.lists(st.sampled_from(WINDOWS), min_size=1, max_size=4),
       d_f=st.integers(1, 3), r=st.sampled_from([1, 2, 4]))
def test_multi_head_shape(T, heads, d_f, r):
    d = len(heads) * d_f
    cfg = DSAConfig(m=heads[0][0], n=heads[0][1], r=r, d_f=d_f, heads=tuple(heads))
    params = _attn_params(d, np.random.default_rng(T))
    for h, (m, n) in enumerate(heads):
        params[f"rpe{h}"] = Tensor(np.zeros((m + n + 1, d_f)))
    assert multi_head_dsa(Tensor(np.ones((T, d))), params, cfg).shape == (T, d)


def test_multi_head_indivisible():
    with pytest.raises(ConfigError):
        multi_head_dsa(Tensor(np.ones((3, 5))), _attn_params(5, np.random.default_rng(0)),
                       DSAConfig(d_f=2, heads=((1, 1), (1, 1))))


def test_relative_bias_table_shapes():
    cfg = DSAConfig(d_f=4, heads=((2, 2), (0, 4), (1, 0)))
    bias = RelativeBias.zeros(cfg)
    assert [t.shape for t in bias.tables] == [(5, 4), (5, 4), (2, 4)]
    bias.check(cfg)
    with pytest.raises(ConfigError):
        RelativeBias(bias.tables[:2]).check(cfg)


# receptive field -----------------------------------------------------------------

def test_receptive_field_paper_config():
    frames, seconds = receptive_field(paper_layer_configs(), 43.07)
    assert frames == 1 + 4 * 511 == 2045
    assert abs(seconds - 47.51) <= 0.1
    assert 47.47 < seconds < 47.49


def test_receptive_field_single_layer():
    assert receptive_field([DSAConfig(2, 2, 1)], 43.07)[0] == 5


def test_receptive_field_matches_graph_reachability():
    layers = [DSAConfig(2, 2, r) for r in (1, 2, 4)]
    # ancestors of the centre frame through the layered window graph
    T = 200
    frontier = {T // 2}
    for cfg in reversed(layers):
        frontier = {i + cfg.r * k for i in frontier for k in range(-cfg.m, cfg.n + 1)
                    if 0 <= i + cfg.r * k < T}
    assert len(frontier) == receptive_field(layers, 43.07)[0] == 29


def test_receptive_field_errors():
    with pytest.raises(ConfigError):
        receptive_field([], 43.07)
    with pytest.raises(ConfigError):
        receptive_field([DSAConfig()], 0)
