from __future__ import annotations

import numpy as np
import pytest

from cmestorm import kernels
from cmestorm.kernels import JIT_KERNELS, NUMPY_KERNELS

needs_numba = pytest.mark.skipif(JIT_KERNELS is None, reason="numba unavailable")


def _naive_im2col(x):
    n, h, w, c = x.shape
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n * h * w, 9 * c), x.dtype)
    r = 0
    for i in range(n):
        for y in range(h):
            for xx in range(w):
                out[r] = pad[i, y:y + 3, xx:xx + 3, :].reshape(-1)
                r += 1
    return out


def test_im2col_matches_naive(rng):
    x = rng.standard_normal((2, 5, 4, 3))
    np.testing.assert_allclose(NUMPY_KERNELS.im2col3x3(x), _naive_im2col(x))


def test_col2im_is_adjoint_of_im2col(rng):
    x = rng.standard_normal((2, 4, 4, 3))
    cols = rng.standard_normal((2 * 16, 27))
    lhs = np.sum(NUMPY_KERNELS.im2col3x3(x) * cols)
    rhs = np.sum(x * NUMPY_KERNELS.col2im3x3(cols, 2, 4, 4, 3))
    assert lhs == pytest.approx(rhs, rel=1e-10)


@needs_numba
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_agree_on_im2col_col2im(rng, dtype):
    x = rng.standard_normal((3, 8, 8, 5)).astype(dtype)
    np.testing.assert_allclose(JIT_KERNELS.im2col3x3(x), NUMPY_KERNELS.im2col3x3(x), rtol=1e-6)
    cols = rng.standard_normal((3 * 64, 45)).astype(dtype)
    np.testing.assert_allclose(JIT_KERNELS.col2im3x3(cols, 3, 8, 8, 5),
                               NUMPY_KERNELS.col2im3x3(cols, 3, 8, 8, 5), rtol=1e-5, atol=1e-6)


@needs_numba
def test_backends_agree_on_resize(rng):
    img = rng.random((37, 53, 2))
    np.testing.assert_allclose(JIT_KERNELS.resize_bilinear(img, 8, 11),
                               NUMPY_KERNELS.resize_bilinear(img, 8, 11), rtol=1e-12)


@needs_numba
def test_backends_agree_on_adam(rng):
    grad = rng.standard_normal(1000).astype(np.float32)
    states = []
    for k in (NUMPY_KERNELS, JIT_KERNELS):
        p = np.ones(1000, np.float32)
        m = np.zeros_like(p)
        v = np.zeros_like(p)
        for t in (1, 2, 3):
            k.adam_step(p, grad, m, v, 1e-3, 0.9, 0.999, 1e-8, t)
        states.append((p, m, v))
    for a, b in zip(*states):
        np.testing.assert_allclose(a, b, rtol=1e-5)


@needs_numba
def test_backends_agree_on_sweep(rng):
    y = rng.integers(0, 2, 300)
    p = np.round(rng.random(300), 2)
    th = np.round(np.arange(1, 20) * 0.05, 2)
    np.testing.assert_array_equal(JIT_KERNELS.sweep_counts(y, p, th), NUMPY_KERNELS.sweep_counts(y, p, th))


def test_adam_first_step_moves_by_lr():
    p = np.zeros(4)
    g = np.array([1.0, -2.0, 0.5, -0.1])
    m, v = np.zeros(4), np.zeros(4)
    kernels.adam_step(p, g, m, v, 0.01, 0.9, 0.999, 1e-12, 1)
    np.testing.assert_allclose(p, -0.01 * np.sign(g), rtol=1e-6)


def test_resize_identity_and_constant():
    img = np.arange(12.0).reshape(3, 4)
    np.testing.assert_allclose(kernels.resize_bilinear(img, 3, 4), img)
    const = np.full((10, 7), 3.5)
    np.testing.assert_allclose(kernels.resize_bilinear(const, 4, 4), 3.5)


def test_env_flag_selects_numpy(monkeypatch):
    monkeypatch.setenv("CMESTORM_JIT", "0")
    assert kernels.active_kernels() is NUMPY_KERNELS
    monkeypatch.setenv("CMESTORM_JIT", "1")
    assert kernels.active_kernels() is (JIT_KERNELS or NUMPY_KERNELS)


def test_sweep_counts_inclusive_boundary():
    counts = kernels.sweep_counts([1, 0], [0.6, 0.6], [0.6, 0.65])
    np.testing.assert_array_equal(counts, [[1, 1, 0, 0], [0, 0, 1, 1]])
