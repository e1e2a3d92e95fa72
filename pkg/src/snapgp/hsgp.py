"""Reduced-rank GP machinery: Dirichlet Laplacian eigenpairs on [-J, J],
the squared-exponential spectral density, and categorical (Kronecker) bases.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class HilbertBasis:
    """M Laplacian eigenfunctions on the interval [-J, J]."""

    M: int
    J: float
    boundary_factor: float

    def __post_init__(self):
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if not (self.J > 0 and math.isfinite(self.J)):
            raise ValueError(f"J must be positive and finite, got {self.J}")

    @property
    def eigenvalues(self) -> np.ndarray:
        m = np.arange(1, self.M + 1, dtype=np.float64)
        return (np.pi * m / (2.0 * self.J)) ** 2

    @property
    def frequencies(self) -> np.ndarray:
        """sqrt of the eigenvalues, i.e. pi*m/(2J)."""
        return np.pi * np.arange(1, self.M + 1, dtype=np.float64) / (2.0 * self.J)


def make_basis(M: int, times, boundary_factor: float) -> HilbertBasis:
    """Basis whose half-width is ``boundary_factor`` times the largest |time|."""
    t = np.asarray(times, dtype=np.float64).ravel()
    if t.size == 0 or not np.all(np.isfinite(t)):
        raise ValueError("times must be non-empty and finite")
    if boundary_factor <= 1.0:
        raise ValueError(
            f"boundary_factor must exceed 1 (got {boundary_factor}); inputs would "
            "touch the Dirichlet boundary where every eigenfunction vanishes"
        )
    tmax = float(np.max(np.abs(t)))
    if tmax == 0.0:
        raise ValueError("times are all zero; cannot set the domain width")
    return HilbertBasis(M=int(M), J=boundary_factor * tmax, boundary_factor=float(boundary_factor))


def basis_with_halfwidth(M: int, J: float) -> HilbertBasis:
    """Construct directly from J (boundary factor recorded relative to unit inputs)."""
    return HilbertBasis(M=int(M), J=float(J), boundary_factor=float(J))


def eval_basis(basis: HilbertBasis, t):
    """phi_m(t) = sin(sqrt(lambda_m) (t + J)) / sqrt(J).

    Scalar ``t`` gives shape (M,); a 1-D array or Var of n times gives (n, M).
    """
    tv = dc.value(t)
    if np.any(np.abs(tv) > basis.J * (1 + 1e-12)):
        warnings.warn(f"evaluating basis outside [-J, J] with J={basis.J:.4g}", stacklevel=2)
    w = basis.frequencies
    scale = 1.0 / math.sqrt(basis.J)
    if isinstance(t, dc.Var):
        col = dc.reshape(t, (-1, 1)) if t.ndim == 1 else t
        return dc.mul(dc.sin(dc.mul(dc.add(col, basis.J), w)), scale)
    if tv.ndim == 0:
        return np.sin(w * (float(tv) + basis.J)) * scale
    return np.sin(np.outer(tv + basis.J, w)) * scale


@dataclass(frozen=True)
class SEKernelHyper:
    lengthscale: float
    signal_sd: float

    def __post_init__(self):
        for name in ("lengthscale", "signal_sd"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive and finite, got {v}")


def se_spectral_density(lengthscale, signal_sd, omega):
    """s(w) = sigma^2 sqrt(2 pi) ell exp(-ell^2 w^2 / 2).

    Broadcasts; ``lengthscale``/``signal_sd`` may be Vars so gradients reach
    the sampled hyperparameters.
    """
    w2 = np.asarray(omega, dtype=np.float64) ** 2
    ell2 = dc.mul(lengthscale, lengthscale)
    return dc.mul(
        dc.mul(dc.mul(signal_sd, signal_sd), dc.mul(lengthscale, SQRT_2PI)),
        dc.exp(dc.mul(ell2, -0.5 * w2)),
    )


def spectral_weights(basis: HilbertBasis, lengthscale, signal_sd):
    """Prior variances of the basis weights, shape (L, M) for length-L hyperparameters."""
    ell = lengthscale if isinstance(lengthscale, dc.Var) else np.asarray(lengthscale, dtype=np.float64)
    sig = signal_sd if isinstance(signal_sd, dc.Var) else np.asarray(signal_sd, dtype=np.float64)
    if dc.value(ell).ndim == 0:
        return se_spectral_density(ell, sig, basis.frequencies)
    ell = dc.reshape(ell, (-1, 1))
    sig = dc.reshape(sig, (-1, 1))
    return se_spectral_density(ell, sig, basis.frequencies[None, :])


def exact_se_kernel(hyper: SEKernelHyper, t, t2, dtype=np.float64):
    t, t2 = np.asarray(t, dtype=dtype), np.asarray(t2, dtype=dtype)
    ell, sig = dtype(hyper.lengthscale), dtype(hyper.signal_sd)
    return sig**2 * np.exp(-((t - t2) ** 2) / (2 * ell**2))


def approx_kernel(basis: HilbertBasis, hyper: SEKernelHyper, t, t2, dtype=np.float64):
    """sum_m s(sqrt(lambda_m)) phi_m(t) phi_m(t2); symmetric in its time arguments.

    ``dtype=np.longdouble`` evaluates in extended precision, which resolves
    truncation errors that are smaller than float64 rounding.
    """
    if dtype is np.float64:
        s = se_spectral_density(hyper.lengthscale, hyper.signal_sd, basis.frequencies)
        p1 = eval_basis(basis, np.asarray(t, dtype=np.float64))
        p2 = eval_basis(basis, np.asarray(t2, dtype=np.float64))
    else:
        J = dtype(basis.J)
        w = dtype(np.pi) * np.arange(1, basis.M + 1).astype(dtype) / (2 * J)
        ell, sig = dtype(hyper.lengthscale), dtype(hyper.signal_sd)
        s = sig**2 * np.sqrt(2 * dtype(np.pi)) * ell * np.exp(-(ell**2) * w**2 / 2)

        def phi(x):
            x = np.asarray(x, dtype=dtype)
            return np.sin(np.multiply.outer(x + J, w)) / np.sqrt(J)

        p1, p2 = phi(t), phi(t2)
    # product is formed symmetrically so swapping t and t2 is bitwise exact
    return np.sum(s * (p1 * p2), axis=-1)


def kernel_grid_error(basis: HilbertBasis, hyper: SEKernelHyper, grid, dtype=np.longdouble) -> float:
    """max |approx - exact| over all pairs of ``grid`` points, evaluated in ``dtype``."""
    g = np.asarray(grid, dtype=np.float64)
    T, T2 = (a.ravel() for a in np.meshgrid(g, g, indexing="ij"))
    err = approx_kernel(basis, hyper, T, T2, dtype) - exact_se_kernel(hyper, T, T2, dtype)
    return float(np.max(np.abs(err)))


# -- categorical kernels -----------------------------------------------------

@dataclass(frozen=True)
class CategoricalBasis:
    """K_C = U diag(d) U^T; row c of U is the feature vector of category c."""

    eigenvalues: np.ndarray
    U: np.ndarray

    @property
    def C(self) -> int:
        return int(self.eigenvalues.shape[0])

    def kernel(self) -> np.ndarray:
        return (self.U * self.eigenvalues) @ self.U.T


def jacobi_eigh(A: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Cyclic Jacobi eigen-decomposition of a symmetric matrix.

    Returns (eigenvalues, V) with A = V diag(w) V^T, unsorted.
    """
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    V = np.eye(n)
    scale = max(float(np.abs(A).max()), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(A, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                # rotate rows/cols p and q
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap, aq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        warnings.warn("Jacobi eigensolver hit the sweep limit", stacklevel=2)
    return np.diag(A).copy(), V


def categorical_decompose(K_C) -> CategoricalBasis:
    K = np.asarray(K_C, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1] or K.shape[0] < 1:
        raise ValueError(f"categorical kernel must be square, got shape {K.shape}")
    if np.max(np.abs(K - K.T)) > 1e-10:
        raise ValueError("categorical kernel is not symmetric within 1e-10")
    w, V = jacobi_eigh(0.5 * (K + K.T))
    if np.min(w) < -1e-10:
        raise ValueError(f"categorical kernel is indefinite (min eigenvalue {np.min(w):.3g})")
    w = np.where(w < 0, 0.0, w)
    order = np.argsort(-w, kind="stable")
    return CategoricalBasis(eigenvalues=w[order], U=V[:, order])


def kron_features(basis: HilbertBasis, cat: CategoricalBasis, t, c):
    """phi(t) kron u(c). Entry m*C + j equals phi_m(t) * U[c, j].

    Scalar t and c give shape (M*C,); arrays of n times/categories give (n, M*C).
    """
    c_arr = np.asarray(c)
    if np.any(c_arr < 0) or np.any(c_arr >= cat.C):
        raise IndexError(f"category index out of range [0, {cat.C})")
    phi = eval_basis(basis, t)
    u = cat.U[c_arr]
    if dc.value(phi).ndim == 1:
        return dc.reshape(dc.mul(dc.reshape(phi, (-1, 1)), u[None, :]), (-1,))
    n = dc.value(phi).shape[0]
    prod = dc.mul(dc.reshape(phi, (n, basis.M, 1)), u.reshape(n, 1, cat.C))
    return dc.reshape(prod, (n, basis.M * cat.C))


def kron_spectral(spectral, cat: CategoricalBasis):
    """Prior variances s kron d for each latent row of ``spectral`` (shape (..., M))."""
    sv = dc.value(spectral)
    lead = sv.shape[:-1]
    M = sv.shape[-1]
    s3 = dc.reshape(spectral, lead + (M, 1))
    return dc.reshape(dc.mul(s3, cat.eigenvalues.reshape((1,) * len(lead) + (1, cat.C))), lead + (M * cat.C,))
