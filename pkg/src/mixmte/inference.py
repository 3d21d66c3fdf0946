"""Plug-in sandwich variance estimation for the MTE and pointwise CIs.

The variance of the MTE estimate at (group j, p) combines the two
arm-specific sandwich terms with twice the cross-arm covariance; the
covariance term is nonzero here because the latent membership indicator
is replaced by the membership probability in the stacked regressors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .numerics import bspline_deriv, normal_quantile
from .series import MteCurve, OutcomeStageFit, build_regressors, mte

__all__ = ["InferenceMatrices", "build_inference_matrices", "mte_se", "mte_ci"]

VARIANCE_FLOOR = 1e-12


@dataclass
class InferenceMatrices:
    psi1: np.ndarray
    psi0: np.ndarray
    sigma1: np.ndarray
    sigma0: np.ndarray
    cross: np.ndarray       # (1/n) sum xi0 xi1 R0 R1'
    resid1: np.ndarray
    resid0: np.ndarray
    n: int
    floor_events: int = 0

    def psi(self, arm):
        return self.psi1 if arm == 1 else self.psi0

    def sigma(self, arm):
        return self.sigma1 if arm == 1 else self.sigma0


def build_inference_matrices(data: Dataset,
                             fit: OutcomeStageFit) -> InferenceMatrices:
    """Empirical second-moment, weighted, and cross matrices plus residuals."""
    r1 = build_regressors(data, fit.stage_input, fit.basis, arm=1)
    r0 = build_regressors(data, fit.stage_input, fit.basis, arm=0)
    n = data.n
    xi1 = data.d * data.y - r1 @ fit.theta1
    xi0 = (1.0 - data.d) * data.y - r0 @ fit.theta0
    psi1 = r1.T @ r1 / n
    psi0 = r0.T @ r0 / n
    sigma1 = (xi1[:, None] * r1).T @ (xi1[:, None] * r1) / n
    sigma0 = (xi0[:, None] * r0).T @ (xi0[:, None] * r0) / n
    cross = (xi0[:, None] * r0).T @ (xi1[:, None] * r1) / n
    return InferenceMatrices(psi1=psi1, psi0=psi0, sigma1=sigma1,
                             sigma0=sigma0, cross=cross, resid1=xi1,
                             resid0=xi0, n=n)


def _psi_inverse(psi: np.ndarray, fit: OutcomeStageFit) -> np.ndarray:
    # Mirror the estimator: truncated pseudo-inverse at lambda = 0, ridge
    # inverse otherwise, so the variance lives on the same subspace as the
    # coefficients.
    lam = fit.solver.ridge_lambda
    if lam > 0.0:
        return np.linalg.inv(psi + lam * np.eye(psi.shape[0]))
    return np.linalg.pinv(psi, rcond=fit.solver.pinv_rel_tol)


def _spline_direction(fit: OutcomeStageFit, group: int, p: float) -> np.ndarray:
    """Selection of group j's spline block contracted with grad b_K(p)."""
    d_sxk = fit.theta1.shape[0]
    vec = np.zeros(d_sxk)
    off = fit.n_groups * fit.dim_x + group * fit.basis.K
    vec[off:off + fit.basis.K] = bspline_deriv(p, fit.basis)
    return vec


def mte_se(mats: InferenceMatrices, fit: OutcomeStageFit, group: int,
           p: float) -> float:
    """Standard error of the MTE estimate at (group, p)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p={p} outside [0, 1]")
    v = _spline_direction(fit, group, p)
    inv1 = _psi_inverse(mats.psi1, fit)
    inv0 = _psi_inverse(mats.psi0, fit)
    a1 = inv1 @ v
    a0 = inv0 @ v
    var1 = float(a1 @ mats.sigma1 @ a1)
    var0 = float(a0 @ mats.sigma0 @ a0)
    cov = float(a0 @ mats.cross @ a1)
    total = var1 + 2.0 * cov + var0
    if total < VARIANCE_FLOOR:
        mats.floor_events += 1
        warnings.warn(
            f"variance estimate {total:.3e} at p={p} fell below the floor; "
            f"clamping",
            stacklevel=2,
        )
        total = VARIANCE_FLOOR
    return float(np.sqrt(total / mats.n))


def mte_ci(fit: OutcomeStageFit, mats: InferenceMatrices, group: int, x,
           grid, level: float = 0.95) -> MteCurve:
    """MTE curve with symmetric pointwise normal confidence bands."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    grid = np.asarray(grid, dtype=float)
    x = np.asarray(x, dtype=float)
    z = normal_quantile(1.0 - (1.0 - level) / 2.0)
    values = np.array([mte(fit, group, x, p) for p in grid])
    se = np.array([mte_se(mats, fit, group, p) for p in grid])
    return MteCurve(group=group, x=x, grid=grid, values=values, se=se,
                    ci_low=values - z * se, ci_high=values + z * se,
                    level=level)
