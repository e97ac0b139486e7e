"""The numba and numpy kernel variants must agree; the active alias works."""

import numpy as np
import pytest

from groundcap import kernels


needs_numba = pytest.mark.skipif(
    not kernels.NUMBA_AVAILABLE, reason="numba not importable"
)


def _random_gate_inputs(rng, batch=7, d=5):
    pre = rng.normal(size=(batch, 4 * d))
    c_prev = rng.normal(size=(batch, d))
    return pre, c_prev


@needs_numba
def test_lstm_gates_forward_variants_agree(rng):
    pre, c_prev = _random_gate_inputs(rng)
    got_np = kernels.lstm_gates_forward_numpy(pre, c_prev)
    got_nb = kernels.lstm_gates_forward_numba(pre, c_prev)
    for a, b in zip(got_np, got_nb):
        np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-15)


@needs_numba
def test_lstm_gates_backward_variants_agree(rng):
    pre, c_prev = _random_gate_inputs(rng)
    h, c, i, f, o, g, tc = kernels.lstm_gates_forward_numpy(pre, c_prev)
    dh = rng.normal(size=h.shape)
    dc = rng.normal(size=c.shape)
    a = kernels.lstm_gates_backward_numpy(dh, dc, i, f, o, g, tc, c_prev)
    b = kernels.lstm_gates_backward_numba(dh, dc, i, f, o, g, tc, c_prev)
    np.testing.assert_allclose(a[0], b[0], rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-13, atol=1e-15)


@needs_numba
def test_pair_cosines_variants_agree(rng):
    vecs = rng.normal(size=(9, 4))
    left = rng.integers(0, 9, size=20)
    right = rng.integers(0, 9, size=20)
    np.testing.assert_allclose(
        kernels.pair_cosines_forward_numpy(vecs, left, right),
        kernels.pair_cosines_forward_numba(vecs, left, right),
        rtol=1e-13,
    )
    dsims = rng.normal(size=20)
    np.testing.assert_allclose(
        kernels.pair_cosines_backward_numpy(dsims, vecs, left, right),
        kernels.pair_cosines_backward_numba(dsims, vecs, left, right),
        rtol=1e-12,
        atol=1e-14,
    )


@needs_numba
def test_lcs_variants_agree(rng):
    for _ in range(25):
        a = rng.integers(0, 6, size=rng.integers(0, 15)).astype(np.int64)
        b = rng.integers(0, 6, size=rng.integers(0, 15)).astype(np.int64)
        assert kernels.lcs_length_numpy(a, b) == kernels.lcs_length_numba(a, b)


@needs_numba
def test_iou_matrix_variants_agree(rng):
    def boxes(n):
        x0 = rng.uniform(0, 0.8, size=n)
        y0 = rng.uniform(0, 0.8, size=n)
        return np.stack(
            [x0, y0, x0 + rng.uniform(0.05, 0.2, n), y0 + rng.uniform(0.05, 0.2, n)],
            axis=1,
        )

    a, b = boxes(12), boxes(8)
    np.testing.assert_allclose(
        kernels.iou_matrix_numpy(a, b), kernels.iou_matrix_numba(a, b), rtol=1e-14
    )


def test_lcs_known_values():
    lcs = kernels.lcs_length
    assert lcs(np.array([1, 2, 3], dtype=np.int64), np.array([1, 2, 3], dtype=np.int64)) == 3
    assert lcs(np.array([1, 2, 3], dtype=np.int64), np.array([4, 5], dtype=np.int64)) == 0
    assert lcs(np.array([1, 3, 2, 4], dtype=np.int64), np.array([1, 2, 3, 4], dtype=np.int64)) == 3
    assert lcs(np.array([], dtype=np.int64), np.array([1], dtype=np.int64)) == 0


def test_active_aliases_point_at_selected_variant():
    expected = "numba" if kernels.USE_NUMBA else "numpy"
    if expected == "numba":
        assert kernels.lstm_gates_forward is kernels.lstm_gates_forward_numba
    else:
        assert kernels.lstm_gates_forward is kernels.lstm_gates_forward_numpy
