"""Numerical kernels: normal distribution functions, B-spline bases,
Gauss-Legendre quadrature, and penalized/minimum-norm least squares.

All functions here are pure and safe to call from multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "BasisSpec",
    "SolverConfig",
    "normal_cdf",
    "normal_pdf",
    "normal_quantile",
    "bspline_basis",
    "bspline_deriv",
    "bspline_design",
    "bspline_deriv_design",
    "gauss_legendre_integrate",
    "solve_penalized_lsq",
]

# CDF values are kept strictly inside (0, 1) so downstream logs never hit -inf.
_CDF_LO = 1e-300
_CDF_HI = 1.0 - 1e-16


def normal_cdf(x):
    """Standard normal CDF, clamped into (0, 1) in the extreme tails."""
    return np.clip(special.ndtr(x), _CDF_LO, _CDF_HI)


def normal_pdf(x):
    """Standard normal density."""
    x = np.asarray(x, dtype=float)
    out = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return out if out.ndim else float(out)


def normal_quantile(q):
    """Standard normal quantile; rejects probabilities outside (0, 1)."""
    q_arr = np.asarray(q, dtype=float)
    if np.any(q_arr <= 0.0) or np.any(q_arr >= 1.0):
        raise ValueError(f"quantile argument must lie in (0, 1), got {q!r}")
    out = special.ndtri(q_arr)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class BasisSpec:
    """Clamped B-spline basis on [0, 1] with equally spaced interior knots.

    ``order`` follows the de Boor convention (polynomial degree + 1), so
    order 3 gives quadratic pieces. The basis dimension is
    ``K = order + inner_knots``.
    """

    order: int = 3
    inner_knots: int = 1

    def __post_init__(self):
        if self.order < 2:
            raise ValueError(f"order must be >= 2, got {self.order}")
        if self.inner_knots < 0:
            raise ValueError(f"inner_knots must be >= 0, got {self.inner_knots}")

    @property
    def K(self) -> int:
        return self.order + self.inner_knots

    def knots(self) -> np.ndarray:
        """Full clamped knot vector of length K + order."""
        interior = np.linspace(0.0, 1.0, self.inner_knots + 2)[1:-1]
        return np.concatenate(
            [np.zeros(self.order), interior, np.ones(self.order)]
        )


def _basis_all_degrees(p: np.ndarray, spec: BasisSpec) -> list[np.ndarray]:
    """Cox-de Boor recursion, vectorized over p.

    Returns the list of basis matrices for degrees 0 .. order-1; the matrix
    for degree k has shape (len(p), K + order - 1 - k).
    """
    t = spec.knots()
    n_zero = len(t) - 1
    p_col = p[:, None]

    # Degree 0: right-open intervals, except the last non-empty one which
    # also absorbs p == 1 so the basis is well defined on the closed interval.
    left = t[None, :n_zero]
    right = t[None, 1 : n_zero + 1]
    b = ((p_col >= left) & (p_col < right)).astype(float)
    last = spec.K - 1  # index of the last non-empty knot interval
    b[:, last] = np.where((p >= t[last]) & (p <= t[last + 1]), 1.0, b[:, last])

    out = [b]
    for k in range(1, spec.order):
        m = n_zero - k
        prev = out[-1]
        b = np.zeros((len(p), m))
        for i in range(m):
            den1 = t[i + k] - t[i]
            if den1 > 0:
                b[:, i] += (p - t[i]) / den1 * prev[:, i]
            den2 = t[i + k + 1] - t[i + 1]
            if den2 > 0:
                b[:, i] += (t[i + k + 1] - p) / den2 * prev[:, i + 1]
        out.append(b)
    return out


def _check_unit_interval(p: np.ndarray):
    if np.any(p < 0.0) or np.any(p > 1.0) or not np.all(np.isfinite(p)):
        raise ValueError("spline evaluation points must lie in [0, 1]")


def bspline_design(p, spec: BasisSpec) -> np.ndarray:
    """Evaluate all K basis functions at each point; shape (len(p), K)."""
    p = np.atleast_1d(np.asarray(p, dtype=float))
    _check_unit_interval(p)
    return _basis_all_degrees(p, spec)[-1]


def bspline_deriv_design(p, spec: BasisSpec) -> np.ndarray:
    """First derivatives of all K basis functions; shape (len(p), K)."""
    p = np.atleast_1d(np.asarray(p, dtype=float))
    _check_unit_interval(p)
    t = spec.knots()
    k = spec.order - 1  # polynomial degree
    if k == 0:
        return np.zeros((len(p), spec.K))
    lower = _basis_all_degrees(p, spec)[k - 1]  # degree k-1 basis, K+1 columns
    d = np.zeros((len(p), spec.K))
    for i in range(spec.K):
        den1 = t[i + k] - t[i]
        if den1 > 0:
            d[:, i] += k / den1 * lower[:, i]
        den2 = t[i + k + 1] - t[i + 1]
        if den2 > 0:
            d[:, i] -= k / den2 * lower[:, i + 1]
    return d


def bspline_basis(p: float, spec: BasisSpec) -> np.ndarray:
    """Basis vector b_K(p) of length K at a single point."""
    return bspline_design([p], spec)[0]


def bspline_deriv(p: float, spec: BasisSpec) -> np.ndarray:
    """Derivative vector of the basis at a single point."""
    return bspline_deriv_design([p], spec)[0]


def gauss_legendre_integrate(f, a: float, b: float, nodes_per_interval: int,
                             breakpoints=()) -> float:
    """Composite Gauss-Legendre quadrature of f over [a, b].

    ``breakpoints`` split [a, b] into sub-intervals (useful when f is only
    piecewise smooth, e.g. across spline knots). Exact for polynomials of
    degree <= 2 * nodes_per_interval - 1 on each sub-interval.
    """
    if nodes_per_interval < 1:
        raise ValueError("nodes_per_interval must be >= 1")
    if not a < b:
        raise ValueError(f"need a < b, got a={a}, b={b}")
    cuts = np.asarray(sorted(breakpoints), dtype=float)
    if cuts.size and (cuts[0] <= a or cuts[-1] >= b):
        raise ValueError("breakpoints must lie strictly inside (a, b)")
    edges = np.concatenate([[a], cuts, [b]])
    x, w = np.polynomial.legendre.leggauss(nodes_per_interval)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        mid = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        vals = np.asarray(f(mid + half * x), dtype=float)
        total += half * float(np.dot(w, vals))
    return total


@dataclass(frozen=True)
class SolverConfig:
    """Least-squares solver settings.

    With ridge_lambda == 0 the solver returns the minimum-norm solution of
    the normal equations via singular-value truncation at ``pinv_rel_tol``
    (relative to the largest singular value). With ridge_lambda > 0 it
    minimizes (1/n)||y - X theta||^2 + ridge_lambda * ||theta||^2.
    """

    ridge_lambda: float = 0.0
    pinv_rel_tol: float = 1e-10

    def __post_init__(self):
        if self.ridge_lambda < 0:
            raise ValueError("ridge_lambda must be nonnegative")
        if not 0.0 < self.pinv_rel_tol < 1.0:
            raise ValueError("pinv_rel_tol must lie in (0, 1)")


def solve_penalized_lsq(design, response, cfg: SolverConfig) -> np.ndarray:
    design = np.asarray(design, dtype=float)
    response = np.asarray(response, dtype=float)
    if design.ndim != 2 or response.ndim != 1:
        raise ValueError("design must be 2-d and response 1-d")
    if design.shape[0] != response.shape[0]:
        raise ValueError("design and response row counts differ")
    if not (np.all(np.isfinite(design)) and np.all(np.isfinite(response))):
        raise ValueError("non-finite values in least-squares inputs")
    n = design.shape[0]
    if cfg.ridge_lambda == 0.0:
        theta, *_ = np.linalg.lstsq(design, response, rcond=cfg.pinv_rel_tol)
        return theta
    gram = design.T @ design / n + cfg.ridge_lambda * np.eye(design.shape[1])
    rhs = design.T @ response / n
    return np.linalg.solve(gram, rhs)
