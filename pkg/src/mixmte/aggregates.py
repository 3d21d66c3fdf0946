"""Treatment-effect summaries built on the fitted MTR/MTE functions:
group-wise CATE, group and population ATE, policy-relevant treatment
effects under a counterfactual propensity, and Wald LATE with binary IVs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DataError, Dataset
from .mixture import EstimationError
from .numerics import bspline_design, gauss_legendre_integrate
from .series import OutcomeStageFit, mte

__all__ = ["CounterfactualPolicy", "BinaryIvDataset", "cate", "ate", "prte",
           "wald_late"]


def cate(fit: OutcomeStageFit, group: int, x) -> float:
    """Group-wise conditional ATE: the MTE integrated over the unit interval.

    Gauss-Legendre with breakpoints at the interior knots is exact for the
    piecewise-polynomial integrand.
    """
    x = np.asarray(x, dtype=float)
    knots = np.linspace(0.0, 1.0, fit.basis.inner_knots + 2)[1:-1]
    nodes = max(fit.basis.order, 2)

    def integrand(v):
        return np.array([mte(fit, group, x, float(p)) for p in np.atleast_1d(v)])

    return gauss_legendre_integrate(integrand, 0.0, 1.0, nodes,
                                    breakpoints=knots)


def ate(fit: OutcomeStageFit, data: Dataset):
    """Per-group ATEs (CATE averaged over the sample X) and the overall
    pi-weighted ATE."""
    if data.dim_x != fit.dim_x:
        raise ValueError("dataset covariate dimension does not match the fit")
    spec = fit.basis
    # CATE_j(x) is affine in x: x' (beta1_j - beta0_j) plus a constant
    # spline term, so the sample average collapses to the mean covariate.
    b1 = bspline_design([1.0], spec)[0]
    b0 = bspline_design([0.0], spec)[0]
    endpoint = b1 - b0
    per_group = []
    x_mean = data.x.mean(axis=0)
    for j in range(fit.n_groups):
        lin = float(x_mean @ (fit.beta(1, j) - fit.beta(0, j)))
        spl = float(endpoint @ (fit.alpha(1, j) + fit.alpha(0, j)))
        per_group.append(lin + spl)
    per_group = np.asarray(per_group)
    overall = float(fit.stage_input.pi @ per_group)
    return per_group, overall


@dataclass(frozen=True)
class CounterfactualPolicy:
    """Counterfactual propensity draws, shape (n_draws, n, S).

    Each draw supplies one counterfactual propensity vector per
    observation; the distribution of the counterfactual propensity is
    represented by the empirical frequency over draws. A single draw
    encodes a deterministic policy.
    """

    draws: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.draws, dtype=float)
        if arr.ndim == 2:
            arr = arr[None, :, :]
        if arr.ndim != 3:
            raise ValueError("policy draws must have shape (draws, n, S)")
        if arr.shape[0] == 0:
            raise ValueError("policy must contain at least one draw")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise ValueError("counterfactual propensities must lie in [0, 1]")
        object.__setattr__(self, "draws", arr)


def _mean_counterfactual_outcome(fit: OutcomeStageFit, data: Dataset,
                                 qs: np.ndarray) -> float:
    """Sample mean of E[Y*|X] for one deterministic policy draw (n x S).

    Uses the exact spline antiderivative: the integral of the MTR up to
    (or from) the cutoff collapses to endpoint differences of b_K.
    """
    spec = fit.basis
    b_at_q = {j: bspline_design(qs[:, j], spec) for j in range(fit.n_groups)}
    b0 = bspline_design([0.0], spec)[0]
    b1 = bspline_design([1.0], spec)[0]
    total = np.zeros(data.n)
    for j in range(fit.n_groups):
        q = qs[:, j]
        bq = b_at_q[j]
        treated = q * (data.x @ fit.beta(1, j)) + (bq - b0) @ fit.alpha(1, j)
        untreated = (1.0 - q) * (data.x @ fit.beta(0, j)) \
            - (b1 - bq) @ fit.alpha(0, j)
        total += fit.stage_input.pi[j] * (treated + untreated)
    return float(total.mean())


def prte(fit: OutcomeStageFit, data: Dataset,
         policy: CounterfactualPolicy) -> float:
    """Policy-relevant treatment effect: mean counterfactual outcome minus
    the observed mean outcome."""
    if policy.draws.shape[1] != data.n or \
            policy.draws.shape[2] != fit.n_groups:
        raise ValueError("policy draws are not dimensioned to the dataset")
    counterfactual = np.mean([
        _mean_counterfactual_outcome(fit, data, policy.draws[k])
        for k in range(policy.draws.shape[0])
    ])
    return float(counterfactual - data.y.mean())


@dataclass(frozen=True)
class BinaryIvDataset:
    """Outcome, treatment, and an n x S matrix of binary instruments."""

    y: np.ndarray
    d: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        d = np.asarray(self.d, dtype=float)
        z = np.asarray(self.z, dtype=float)
        n = y.shape[0]
        if d.shape != (n,) or z.ndim != 2 or z.shape[0] != n:
            raise DataError("inconsistent shapes in BinaryIvDataset")
        if not np.all(np.isin(d, (0.0, 1.0))):
            raise DataError("treatment entries must be 0 or 1")
        if not np.all(np.isin(z, (0.0, 1.0))):
            raise DataError("instrument entries must be 0 or 1")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "z", z)

    @property
    def n_groups(self) -> int:
        return self.z.shape[1]


def wald_late(data: BinaryIvDataset, contrast="pooled") -> float:
    """Wald ratio between two instrument cells.

    ``contrast="pooled"`` compares the all-ones instrument cell with the
    all-zeros cell (a complier-share-weighted average of group LATEs);
    ``contrast=j`` compares the unit-vector cell e_j with all-zeros,
    recovering group j's complier LATE.
    """
    s = data.n_groups
    if contrast == "pooled":
        target = np.ones(s)
    else:
        j = int(contrast)
        if not 0 <= j < s:
            raise ValueError(f"group index {contrast} out of range")
        target = np.zeros(s)
        target[j] = 1.0
    in_a = np.all(data.z == target, axis=1)
    in_b = np.all(data.z == 0.0, axis=1)
    if not in_a.any():
        raise EstimationError(f"no observations with instrument cell {target}")
    if not in_b.any():
        raise EstimationError("no observations in the all-zeros instrument cell")
    dy = data.y[in_a].mean() - data.y[in_b].mean()
    dd = data.d[in_a].mean() - data.d[in_b].mean()
    if dd == 0.0:
        raise EstimationError("zero first stage: treatment rates are equal "
                              "in the two instrument cells")
    return float(dy / dd)
