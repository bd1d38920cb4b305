import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beatkit import markov
from beatkit.dsa import DSAConfig
from beatkit.markov import (MarkovError, TransitionMatrix, column_mass_ratio, densify, export_matrix,
                            export_name, graymap_bytes, layer_attention_matrix, multi_step_product,
                            read_csv)
from beatkit.model import BeatTransformer, DemixedClip, EncoderConfig

TINY = EncoderConfig(n_ttl=3, demix_layers=(1,), d_model=8, d_ff=16, d_f=4,
                     heads=((2, 2), (0, 4)), n_mels=16, conv_filters=(2, 2, 2), pool=2)


@pytest.fixture(scope="module")
def trained_like():
    model = BeatTransformer(TINY, seed=2)
    v = np.random.default_rng(0).uniform(0, 2, (40, 3, 16))
    clip = DemixedClip(v, 43.07, ["drum", "bass", "other"])
    return model, clip, markov.capture_attention(model, clip)


def _support(cfg, T):
    out = np.zeros((T, T), bool)
    for i in range(T):
        for k in range(-cfg.m, cfg.n + 1):
            if 0 <= i + cfg.r * k < T:
                out[i, i + cfg.r * k] = True
    return out


# densify -------------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.sampled_from([(2, 2), (0, 4), (4, 0), (1, 3)]),
       st.sampled_from([1, 2, 4]), st.integers(0, 1000))
def test_densify_places_window_weights(T, w, r, seed):
    cfg = DSAConfig(m=w[0], n=w[1], r=r, d_f=1)
    rng = np.random.default_rng(seed)
    weights = rng.uniform(0.1, 1, (T, cfg.l_win))
    dense = densify(weights, cfg)
    for i in range(T):
        for k in range(cfg.l_win):
            j = i + r * (k - cfg.m)
            if 0 <= j < T:
                assert dense[i, j] == weights[i, k]
    assert ((dense != 0) == _support(cfg, T)).all()


def test_densify_errors():
    with pytest.raises(MarkovError):
        densify(np.ones((4, 3)), DSAConfig(2, 2, 1))
    with pytest.raises(MarkovError):
        densify(np.ones((markov.MAX_FRAMES + 1, 5)), DSAConfig(2, 2, 1))


# model matrices ---------------------------------------------------------------------

def test_layer_matrices_row_stochastic(trained_like):
    model, clip, att = trained_like
    mats = [layer_attention_matrix(l, clip, model, attention=att) for l in range(TINY.n_ttl)]
    for L in range(1, TINY.n_ttl + 1):
        P = multi_step_product(mats[:L])
        assert P.steps == L and P.layers == tuple(range(L))
        np.testing.assert_allclose(P.row_sums(), 1.0, atol=1e-6)


def test_single_step_support(trained_like):
    model, clip, att = trained_like
    for l in range(TINY.n_ttl):
        P = layer_attention_matrix(l, clip, model, attention=att)
        hull = np.zeros((40, 40), bool)
        for m, n in TINY.heads:
            hull |= _support(DSAConfig(m, n, TINY.dilation(l)), 40)
        assert ((P.data > 0) == hull).all()


def test_two_step_support_is_composition(trained_like):
    model, clip, att = trained_like
    P1 = layer_attention_matrix(0, clip, model, attention=att)
    P2 = layer_attention_matrix(1, clip, model, attention=att)
    A, B = P1.data > 0, P2.data > 0
    reach = np.zeros_like(A)
    for i in range(40):
        for k in np.flatnonzero(A[i]):
            reach[i] |= B[k]
    assert ((multi_step_product([P1, P2]).data > 0) == reach).all()


def test_head_average(trained_like):
    model, clip, att = trained_like
    heads = [layer_attention_matrix(2, clip, model, head=h, attention=att).data for h in range(2)]
    avg = layer_attention_matrix(2, clip, model, attention=att).data
    np.testing.assert_allclose(avg, (heads[0] + heads[1]) / 2, atol=1e-15)


def test_channel_selection(trained_like):
    model, clip, att = trained_like
    by_name = layer_attention_matrix(0, clip, model, channel="bass", attention=att).data
    by_index = layer_attention_matrix(0, clip, model, channel=1, attention=att).data
    np.testing.assert_array_equal(by_name, by_index)
    with pytest.raises(MarkovError):
        layer_attention_matrix(0, clip, model, channel="vocal", attention=att)
    with pytest.raises(MarkovError):
        layer_attention_matrix(5, clip, model, attention=att)


def test_product_shape_errors():
    with pytest.raises(MarkovError):
        multi_step_product([])
    with pytest.raises(MarkovError):
        multi_step_product([np.eye(3), np.eye(4)])


def test_product_order():
    A = np.array([[0.0, 1.0], [1.0, 0.0]])
    B = np.array([[1.0, 0.0], [0.5, 0.5]])
    np.testing.assert_array_equal(multi_step_product([A, B]).data, A @ B)


# export -------------------------------------------------------------------------------

def test_export_name():
    assert export_name(3, "avg", "pgm") == "P_L3_headavg.pgm"
    assert export_name(1, 2, "csv") == "P_L1_head2.csv"


def test_graymap_bytes():
    data = np.array([[0.5, 0.25, 0.0], [0.1, 0.2, 0.4], [0.0, 0.0, 0.0]])
    blob = graymap_bytes(data)
    header = b"P5\n3 3\n255\n"
    assert blob.startswith(header)
    pixels = np.frombuffer(blob[len(header):], np.uint8).reshape(3, 3)
    np.testing.assert_array_equal(pixels, [[255, 128, 0], [64, 128, 255], [0, 0, 0]])


def test_csv_round_trip_exact(tmp_path):
    P = np.random.default_rng(3).dirichlet(np.ones(7), size=7)
    path = export_matrix(TransitionMatrix(P), tmp_path / "p.csv")
    np.testing.assert_array_equal(read_csv(path), P)


def test_export_unknown_format(tmp_path):
    with pytest.raises(MarkovError):
        export_matrix(np.eye(2), tmp_path / "p.png")


# column mass -----------------------------------------------------------------------------

def test_column_mass_ratio_hand():
    P = np.array([[0.5, 0.5, 0.0, 0.0],
                  [0.5, 0.0, 0.5, 0.0],
                  [1.0, 0.0, 0.0, 0.0],
                  [0.0, 0.0, 0.5, 0.5]])
    # column masses 2.0, 0.5, 1.0, 0.5
    assert column_mass_ratio(P, np.array([0, 2])) == 1.5 / 0.5


def test_column_mass_ratio_needs_both_sets():
    with pytest.raises(MarkovError):
        column_mass_ratio(np.eye(3), np.array([0, 1, 2]))
    with pytest.raises(MarkovError):
        column_mass_ratio(np.eye(3), np.array([], dtype=int))
