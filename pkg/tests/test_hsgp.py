import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snapgp import hsgp


def test_eigenvalues_closed_form():
    b = hsgp.basis_with_halfwidth(1, 1.0)
    assert b.eigenvalues[0] == pytest.approx(2.4674011, abs=1e-7)
    b = hsgp.basis_with_halfwidth(3, 2.0)
    np.testing.assert_allclose(b.eigenvalues, [(math.pi / 4) ** 2, (math.pi / 2) ** 2,
                                               (3 * math.pi / 4) ** 2], rtol=1e-15)


@pytest.mark.parametrize("bf", [1.5, 2.0, 2.5, 3.0])
def test_make_basis_accepts_search_grid(bf):
    b = hsgp.make_basis(4, [-0.5, 0.2, 1.0], bf)
    assert b.J == pytest.approx(bf)


@pytest.mark.parametrize("bf", [1.0, 0.5])
def test_make_basis_rejects_boundary_touching(bf):
    with pytest.raises(ValueError, match="boundary_factor"):
        hsgp.make_basis(4, [0.0, 1.0], bf)


@given(J=st.floats(0.1, 50), M=st.integers(2, 40))
def test_eigenvalues_strictly_increasing(J, M):
    assert np.all(np.diff(hsgp.basis_with_halfwidth(M, J).eigenvalues) > 0)


def test_eval_basis_values():
    b1 = hsgp.basis_with_halfwidth(2, 1.0)
    phi = hsgp.eval_basis(b1, 0.0)
    assert phi[0] == pytest.approx(1.0, abs=1e-15)
    assert phi[1] == pytest.approx(0.0, abs=1e-15)
    b = hsgp.basis_with_halfwidth(7, 2.5)
    np.testing.assert_allclose(hsgp.eval_basis(b, -2.5), 0.0, atol=1e-15)
    rows = hsgp.eval_basis(b, np.array([-1.0, 0.3]))
    np.testing.assert_array_equal(rows[1], hsgp.eval_basis(b, 0.3))


def test_eval_basis_warns_outside_domain():
    with pytest.warns(UserWarning, match="outside"):
        hsgp.eval_basis(hsgp.basis_with_halfwidth(3, 1.0), 1.5)


def test_spectral_density_values():
    r2p = math.sqrt(2 * math.pi)
    assert float(hsgp.se_spectral_density(1.0, 1.0, 0.0)) == pytest.approx(2.5066283, abs=1e-7)
    assert float(hsgp.se_spectral_density(1.0, 2.0, 0.0)) == pytest.approx(4 * r2p, rel=1e-15)
    assert float(hsgp.se_spectral_density(1.0, 1.0, 1.0)) == pytest.approx(1.5203469, abs=1e-7)


@given(ell=st.floats(0.05, 5), w=st.floats(0, 20))
def test_spectral_density_even_and_sigma_scaling(ell, w):
    s1 = float(hsgp.se_spectral_density(ell, 1.0, w))
    assert float(hsgp.se_spectral_density(ell, 1.0, -w)) == s1
    assert float(hsgp.se_spectral_density(ell, 2.0, w)) == 4.0 * s1


def test_approx_kernel_symmetry_positivity():
    b = hsgp.basis_with_halfwidth(20, 2.0)
    h = hsgp.SEKernelHyper(0.7, 1.3)
    assert hsgp.approx_kernel(b, h, 0.3, -0.2) == hsgp.approx_kernel(b, h, -0.2, 0.3)
    for t in np.linspace(-2, 2, 11):
        assert hsgp.approx_kernel(b, h, t, t) >= 0


def _grid_error(M, J=3.0, lim=1.0, dtype=np.longdouble):
    b = hsgp.basis_with_halfwidth(M, J)
    return hsgp.kernel_grid_error(b, hsgp.SEKernelHyper(0.5, 1.0), np.linspace(-lim, lim, 21), dtype)


def test_approximation_error_small_and_decreasing():
    errs = [_grid_error(M) for M in (8, 16, 32, 64)]
    assert errs[-1] < 1e-3
    assert all(a > b for a, b in zip(errs, errs[1:]))
    inner = [_grid_error(M, lim=1.5) for M in (8, 16, 32, 64)]
    assert all(a > b for a, b in zip(inner, inner[1:]))


def test_float64_and_extended_kernels_agree():
    b = hsgp.basis_with_halfwidth(16, 2.0)
    h = hsgp.SEKernelHyper(0.8, 1.2)
    t = np.linspace(-1, 1, 9)
    lo = hsgp.approx_kernel(b, h, t, t[::-1])
    hi = hsgp.approx_kernel(b, h, t, t[::-1], np.longdouble)
    np.testing.assert_allclose(lo, hi.astype(np.float64), rtol=1e-13, atol=1e-15)
    assert _grid_error(64, dtype=np.float64) < 1e-3


def test_categorical_decompose_cases():
    cb = hsgp.categorical_decompose(np.eye(3))
    np.testing.assert_allclose(cb.eigenvalues, 1.0)
    np.testing.assert_allclose(cb.kernel(), np.eye(3), atol=1e-15)
    cb = hsgp.categorical_decompose([[1.0, 0.5], [0.5, 1.0]])
    np.testing.assert_allclose(cb.eigenvalues, [1.5, 0.5], rtol=1e-12)


@settings(max_examples=25)
@given(seed=st.integers(0, 10_000))
def test_random_psd_reconstruction(seed):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(5, 5))
    K = B @ B.T
    cb = hsgp.categorical_decompose(K)
    assert np.max(np.abs(cb.kernel() - K)) < 1e-10
    assert np.max(np.abs(cb.U.T @ cb.U - np.eye(5))) < 1e-10
    assert np.all(np.diff(cb.eigenvalues) <= 0)
    np.testing.assert_allclose(np.sort(cb.eigenvalues), np.linalg.eigvalsh(K), atol=1e-9)


def test_categorical_decompose_rejects_bad_kernels():
    with pytest.raises(ValueError, match="symmetric"):
        hsgp.categorical_decompose([[1.0, 0.2], [0.0, 1.0]])
    with pytest.raises(ValueError, match="indefinite"):
        hsgp.categorical_decompose([[1.0, 2.0], [2.0, 1.0]])
    # rounding-level negatives are clamped
    cb = hsgp.categorical_decompose([[1.0, 1.0], [1.0, 1.0]])
    assert cb.eigenvalues.min() >= 0


def test_kron_features_layout_and_boundary():
    b = hsgp.basis_with_halfwidth(3, 2.0)
    cb = hsgp.categorical_decompose([[1.0, 0.3], [0.3, 1.0]])
    f = hsgp.kron_features(b, cb, 0.4, 1)
    phi = hsgp.eval_basis(b, 0.4)
    for m in range(3):
        for j in range(2):
            assert f[m * 2 + j] == phi[m] * cb.U[1, j]
    np.testing.assert_allclose(hsgp.kron_features(b, cb, -2.0, 0), 0.0, atol=1e-15)
    one = hsgp.categorical_decompose([[1.0]])
    b1 = hsgp.basis_with_halfwidth(1, 2.0)
    assert abs(one.U[0, 0]) == 1.0
    np.testing.assert_allclose(np.abs(hsgp.kron_features(b1, one, 0.3, 0)),
                               np.abs(hsgp.eval_basis(b1, 0.3)), rtol=1e-15)
    with pytest.raises(IndexError):
        hsgp.kron_features(b, cb, 0.0, 2)


def test_product_kernel_identity():
    b = hsgp.basis_with_halfwidth(12, 2.0)
    h = hsgp.SEKernelHyper(0.6, 1.1)
    K_C = np.array([[1.0, 0.4], [0.4, 0.8]])
    cb = hsgp.categorical_decompose(K_C)
    s = hsgp.spectral_weights(b, h.lengthscale, h.signal_sd)
    w = hsgp.kron_spectral(s, cb)
    times = [-0.7, 0.1, 0.9]
    # explicit Kronecker construction as the reference
    S_full = np.kron(np.diag(s), np.diag(cb.eigenvalues))
    for t in times:
        for t2 in times:
            for c in range(2):
                for c2 in range(2):
                    f1 = hsgp.kron_features(b, cb, t, c)
                    f2 = hsgp.kron_features(b, cb, t2, c2)
                    lhs = f1 @ (w * f2)
                    ref = f1 @ S_full @ f2
                    k = hsgp.approx_kernel(b, h, t, t2) * K_C[c, c2]
                    assert abs(lhs - ref) < 1e-10
                    assert abs(lhs - k) < 1e-10
