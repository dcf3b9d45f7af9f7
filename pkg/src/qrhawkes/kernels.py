"""Sum-of-exponentials Hawkes kernels.

A kernel set is a decay grid ``betas`` (length U) together with a
coefficient tensor ``alphas`` of shape (D, D, U).  Kernel ``(l, m)`` is

    phi_lm(t) = sum_u alphas[l, m, u] * betas[u] * exp(-betas[u] * t)

so that its integral over [0, inf) is simply ``alphas[l, m, :].sum()``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from .errors import ConvergenceError, DomainError


@dataclass(frozen=True)
class DecaySet:
    """Decay rates in 1/seconds, strictly positive and increasing."""

    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=float).reshape(-1)
        if b.size == 0:
            raise DomainError("at least one decay rate is required")
        if not np.all(np.isfinite(b)) or np.any(b <= 0):
            raise DomainError(f"decay rates must be finite and positive, got {b}")
        if np.any(np.diff(b) <= 0):
            raise DomainError(f"decay rates must be strictly increasing, got {b}")
        b.setflags(write=False)
        object.__setattr__(self, "betas", b)

    def __len__(self):
        return self.betas.size


def as_betas(decays) -> np.ndarray:
    if isinstance(decays, DecaySet):
        return decays.betas
    return DecaySet(decays).betas


def eval_kernel(alphas, decays, l, m, t):
    """Evaluate ``phi_lm`` at lag(s) ``t >= 0``."""
    betas = as_betas(decays)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("kernel lag must be non-negative")
    a = np.asarray(alphas, dtype=float)[l, m]
    vals = (a * betas) * np.exp(-np.multiply.outer(t, betas))
    return vals.sum(axis=-1)


def kernel_norms(alphas) -> np.ndarray:
    """Matrix of kernel integrals, entry (l, m) = sum_u alphas[l, m, u]."""
    return np.asarray(alphas, dtype=float).sum(axis=-1)


def spectral_radius(matrix, rtol=1e-12, max_iter=100_000):
    """Perron root of a non-negative square matrix by power iteration.

    The matrix is split into its strongly connected components; the
    spectrum is the union of the spectra of the irreducible diagonal blocks.
    On each block we iterate on ``A + I``, which is primitive, so the
    Collatz-Wielandt bounds ``min/max_i (Bx)_i / x_i`` close geometrically.
    """
    A = np.asarray(matrix, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DomainError(f"expected a square matrix, got shape {A.shape}")
    if np.any(A < 0):
        raise DomainError("spectral_radius expects a non-negative matrix")
    n = A.shape[0]
    if n == 0 or not np.any(A):
        return 0.0
    n_comp, labels = connected_components(A > 0, directed=True, connection="strong")
    rho = 0.0
    for c in range(n_comp):
        idx = np.flatnonzero(labels == c)
        if idx.size == 1:
            rho = max(rho, float(A[idx[0], idx[0]]))
        else:
            rho = max(rho, _perron_irreducible(A[np.ix_(idx, idx)], rtol, max_iter))
    return rho


def _perron_irreducible(A, rtol, max_iter):
    B = A + np.eye(A.shape[0])
    x = np.ones(A.shape[0])
    trace = []
    for _ in range(max_iter):
        y = B @ x
        ratios = y / x
        upper, lower = ratios.max(), ratios.min()
        trace.append(upper - 1.0)
        if upper - lower <= rtol * upper:
            return float(0.5 * (upper + lower) - 1.0)
        x = y / y.max()
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations", trace=trace[-20:]
    )


@dataclass(frozen=True)
class Stability:
    stable: bool
    rho: float

    def as_dict(self):
        return {"stable": self.stable, "spectral_radius": self.rho}


def stability_check(alphas) -> Stability:
    """Stable iff the spectral radius of the kernel-norm matrix is below 1.

    Negative entries (least-squares fits) are replaced by their absolute
    value, which gives a sufficient condition for the clamped model.
    """
    norms = np.abs(kernel_norms(alphas))
    rho = spectral_radius(norms)
    return Stability(stable=bool(rho < 1.0), rho=rho)
