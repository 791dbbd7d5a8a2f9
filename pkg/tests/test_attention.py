import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from modit import attention as at
from modit import numeric as nm


def _params(rng, C, scale=0.5):
    p = {k: rng.uniform(-scale, scale, (C, C)) for k in ("W_q", "W_k", "W_v", "W_o")}
    p.update({k: rng.uniform(-0.1, 0.1, C) for k in ("b_q", "b_v", "b_o")})
    return p


# ---------------------------------------------------------------- masks

def test_diagonal_examples():
    np.testing.assert_array_equal(at.build_diagonal_bias(3, 3, 0).values, np.eye(3))
    np.testing.assert_array_equal(at.build_diagonal_bias(3, 3, 2).values, np.ones((3, 3)))
    m = at.build_diagonal_bias(4, 8, 0).values
    for i in range(4):
        for j in range(8):
            assert m[i, j] == (1.0 if math.floor(j / 2 + 0.5) == i else 0.0)


def test_diagonal_degenerate_row():
    with pytest.raises(nm.DegenerateMaskError):
        at.build_diagonal_bias(8, 2, 0)


def test_dispersed_examples():
    m = at.build_dispersed_bias(3, 3, 1.0).values
    assert m[0, 2] == pytest.approx(math.exp(-2))
    np.testing.assert_array_equal(np.diag(m), 1.0)
    np.testing.assert_allclose(at.build_dispersed_bias(4, 4, 1e6).values, 1.0, atol=1e-10)
    with pytest.raises(ValueError):
        at.build_dispersed_bias(3, 3, 0.0)


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 4))
def test_diagonal_row_max_on_diagonal(Tq, Tk, bw):
    try:
        m = at.build_diagonal_bias(Tq, Tk, bw)
    except nm.DegenerateMaskError:
        return
    assert np.all(m.values >= 0) and np.all(m.values.max(axis=1) > 0)


def test_phase_config_validation():
    with pytest.raises(ValueError):
        at.PhaseConfig(t_threshold=0)
    with pytest.raises(ValueError):
        at.PhaseConfig(order="sideways")
    with pytest.raises(ValueError):
        at.PhaseConfig(bias_targets=frozenset({"ffn"}))


def test_apply_phase_bias_examples():
    ones = at.BiasMask("diagonal", np.ones((3, 3)), 0)
    w = np.random.default_rng(0).dirichlet(np.ones(3), size=3)
    np.testing.assert_allclose(at.apply_phase_bias(w, 5, at.PhaseConfig(t_threshold=10), ones, ones), w)

    band = at.build_diagonal_bias(3, 3, 1)
    disp = at.BiasMask("dispersed", band.values * 1.0, 1.0)
    out = at.apply_phase_bias(np.full((3, 3), 1 / 3), 50, at.PhaseConfig(t_threshold=10), band, disp)
    expected = np.array([[0.5, 0.5, 0], [1 / 3, 1 / 3, 1 / 3], [0, 0.5, 0.5]])
    np.testing.assert_allclose(out, expected)


def test_phase_branches_and_boundary():
    M_D = at.build_diagonal_bias(4, 4, 0)
    M_E = at.build_dispersed_bias(4, 4, 2.0)
    lit = at.PhaseConfig(t_threshold=10)
    prose = at.PhaseConfig(t_threshold=10, order="prose_order")
    np.testing.assert_array_equal(at.phase_mask(9, lit, M_D, M_E), M_D.values + M_E.values)
    np.testing.assert_array_equal(at.phase_mask(10, lit, M_D, M_E), M_E.values)
    np.testing.assert_array_equal(at.phase_mask(9, prose, M_D, M_E), M_E.values)
    np.testing.assert_array_equal(at.phase_mask(10, prose, M_D, M_E), M_D.values + M_E.values)


@given(st.integers(1, 20), st.integers(0, 1000))
def test_equal_masks_make_branches_identical(t, seed):
    r = np.random.default_rng(seed)
    M = at.BiasMask("dispersed", r.uniform(0.1, 1, (4, 5)), 1.0)
    w = r.dirichlet(np.ones(5), size=4)
    cfg = at.PhaseConfig(t_threshold=10)
    np.testing.assert_allclose(at.apply_phase_bias(w, t, cfg, M, M), at.apply_phase_bias(w, 15, cfg, M, M))
    np.testing.assert_allclose(at.apply_phase_bias(w, t, cfg, M, M).sum(axis=1), 1.0)


def test_apply_phase_bias_degenerate():
    zero = at.BiasMask("diagonal", np.zeros((2, 2)), 0)
    with pytest.raises(nm.DegenerateMaskError):
        at.apply_phase_bias(np.full((2, 2), 0.5), 1, at.PhaseConfig(t_threshold=5), zero, zero)


def test_layer_mask_layout():
    cfg = at.PhaseConfig(t_threshold=5, bias_targets=frozenset({"self", "cross"}))
    assert at.layer_mask("temporal", 1, cfg, 4) is None
    assert at.layer_mask("cross", 1, None, 4) is None
    m = at.layer_mask("self", 1, cfg, 4, 1)
    assert m.shape == (4, 5)
    np.testing.assert_array_equal(m[:, 0], 1.0)
    c = at.layer_mask("cross", 1, cfg, 4, 4, prefix_aligned=True)
    np.testing.assert_array_equal(c[:, :4], c[:, 4:])
    off = at.PhaseConfig(t_threshold=5, enabled=False)
    assert at.layer_mask("cross", 1, off, 4, 4, True) is None


# ---------------------------------------------------------------- attention

def test_forced_attention_on_beta0(rng):
    C, T = 4, 3
    p = _params(rng, C)
    X, b0 = rng.standard_normal((T, C)), rng.standard_normal((1, C))
    bias = np.full((T, T + 1), -np.inf)
    bias[:, 0] = 0.0
    Y, _ = at.attention_forward(X, np.concatenate([b0, X]), p, 1, score_bias=bias)
    expected = (b0 @ p["W_v"] + p["b_v"]) @ p["W_o"] + p["b_o"]
    np.testing.assert_allclose(Y, np.repeat(expected, T, axis=0), rtol=1e-12)


def test_self_attention_beta0_equal_to_single_row(rng):
    p = _params(rng, 4)
    x = rng.standard_normal((1, 4))
    Y, c = at.biased_self_attention(x, x, p, 2)
    Y1, _ = at.attention_forward(x, x, p, 2)
    np.testing.assert_allclose(Y, Y1, rtol=1e-12)
    assert c["Af"].shape == (2, 1, 2)


def test_hand_computed_single_head(rng):
    X = np.array([[1.0, 0.0, 2.0, -1.0], [0.5, 1.0, 0.0, 0.0]])
    eye = np.eye(4)
    p = {"W_q": eye, "W_k": eye, "W_v": eye, "W_o": eye, "b_q": np.zeros(4), "b_v": np.zeros(4),
         "b_o": np.zeros(4)}
    Y, c = at.attention_forward(X, X, p, 1)
    # scores / 2: [[6, 0.5], [0.5, 1.25]] / 2
    s = np.array([[3.0, 0.25], [0.25, 0.625]])
    w = np.exp(s) / np.exp(s).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(c["Af"][0], w, atol=1e-3)
    np.testing.assert_allclose(Y, w @ X, atol=1e-3)


def test_cross_attention_zero_audio_and_single_key(rng):
    C = 4
    p = _params(rng, C)
    p["b_v"] = np.zeros(C)
    p["W_v"] = np.zeros((C, C))
    H = rng.standard_normal((3, C))
    Y, _ = at.biased_cross_attention(H, np.zeros((3, C)), p, 2)
    np.testing.assert_allclose(Y, np.tile(p["b_o"], (3, 1)))
    p = _params(rng, C)
    _, c = at.attention_forward(H[:1], rng.standard_normal((1, C)), p, 2)
    np.testing.assert_array_equal(c["Af"], 1.0)


def test_cross_attention_diagonal_concentrates(rng):
    C, T = 8, 4
    p = _params(rng, C)
    cfg = at.PhaseConfig(t_threshold=10, bandwidth=0, sigma=1e-3)
    mask = at.layer_mask("cross", 1, cfg, T, T, prefix_aligned=True)
    H, A = rng.standard_normal((T, C)), rng.standard_normal((T, C))
    _, c = at.biased_cross_attention(H, A, p, 1, mask)
    w = c["Af"][0]
    raw = c["A"][0]
    for i in range(T):
        # brute force: mass survives only where the mask is non-zero
        m = mask[i]
        expected = raw[i] * m / np.sum(raw[i] * m)
        np.testing.assert_allclose(w[i], expected, rtol=1e-10)
        assert w[i, i] + w[i, T + i] > 0.99


def test_temporal_zero_and_constant_bias(rng):
    C, T = 8, 5
    p = _params(rng, C)
    H = rng.standard_normal((T, C))
    plain, _ = at.revised_temporal_attention(H, None, p, 2)
    lat = {"z": rng.standard_normal((2 * T - 1, 3)), "W_f1": np.zeros((3, 16)), "b_f1": np.zeros(16),
           "W_f2": np.zeros((16, 1))}
    Y, _ = at.revised_temporal_attention(H, lat, p, 2)
    np.testing.assert_allclose(Y, plain, atol=1e-12)
    lat["b_f1"] = np.full(16, 0.7)
    lat["W_f2"] = rng.standard_normal((16, 1))
    Y, _ = at.revised_temporal_attention(H, lat, p, 2)
    np.testing.assert_allclose(Y, plain, atol=1e-6)


def test_temporal_near_identity_with_large_offsets_penalty(rng):
    C, T = 4, 4
    p = _params(rng, C)
    H = rng.standard_normal((T, C))
    lat = {"z": np.zeros((2 * T - 1, 1)), "W_f1": np.ones((1, 1)), "b_f1": np.zeros(1), "W_f2": np.ones((1, 1))}
    lat["z"][:, 0] = -1e4
    lat["z"][T - 1, 0] = 0.0
    Y, c = at.revised_temporal_attention(H, lat, p, 1)
    expected = (H @ p["W_v"] + p["b_v"]) @ p["W_o"] + p["b_o"]
    np.testing.assert_allclose(Y, expected, atol=1e-6)


def test_relative_bias_offset_indexing():
    T = 3
    z = np.arange(2 * T - 1, dtype=float)[:, None]
    lat = {"z": z, "W_f1": np.ones((1, 1)), "b_f1": np.zeros(1), "W_f2": np.ones((1, 1))}
    B, _ = at.relative_bias(lat, T)
    # entry (i, j) reads row (j - i) + centre of the table
    for i in range(T):
        for j in range(T):
            assert B[i, j] == j - i + (T - 1)
    with pytest.raises(ValueError):
        at.relative_bias(lat, T + 1)


def test_self_attention_permutation_equivariant(rng):
    C, T = 4, 3
    p = _params(rng, C)
    X, b0 = rng.standard_normal((T, C)), rng.standard_normal((1, C))
    Y, _ = at.biased_self_attention(X, b0, p, 2)
    for perm in itertools.permutations(range(T)):
        Yp, _ = at.biased_self_attention(X[list(perm)], b0, p, 2)
        np.testing.assert_allclose(Yp, Y[list(perm)], atol=1e-12)


@given(st.integers(0, 10_000), st.sampled_from(["multiplicative", "additive"]))
def test_weights_row_stochastic(seed, mode):
    r = np.random.default_rng(seed)
    C, T = 4, 4
    cfg = at.PhaseConfig(t_threshold=5, bias_targets=frozenset(at.BIAS_TARGETS), mode=mode)
    mask = at.layer_mask("cross", int(r.integers(1, 10)), cfg, T, T, prefix_aligned=True)
    _, c = at.biased_cross_attention(r.standard_normal((T, C)), r.standard_normal((T, C)),
                                     _params(r, C), 2, mask, mode)
    np.testing.assert_allclose(c["Af"].sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(c["Af"] >= 0)


def test_width_mismatch(rng):
    with pytest.raises(ValueError):
        at.attention_forward(rng.standard_normal((2, 4)), rng.standard_normal((2, 3)), _params(rng, 4), 1)
    with pytest.raises(ValueError):
        at.attention_forward(rng.standard_normal((2, 4)), rng.standard_normal((2, 4)), _params(rng, 4), 3)


def test_attention_backward_gradcheck(rng):
    from modit import gradcheck
    with nm.precision("f64"):
        results = gradcheck.check_attention(rng, gradcheck.DEFAULT_STEP)
    bad = [(r.module, r.block, r.report.max_relative_error) for r in results if not r.passed]
    assert not bad
