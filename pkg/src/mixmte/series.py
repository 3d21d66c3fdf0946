"""Second-stage series estimation of the marginal treatment response and
marginal treatment effect functions.

Each treatment arm is fit separately: the arm-1 response D*Y (arm-0:
(1-D)*Y) is regressed on stacked regressors combining covariate blocks
scaled by pi_j * P_j (arm 0: pi_j * (1 - P_j)) and spline blocks
pi_j * b_K(P_j). The derivative of the fitted spline part recovers the
nonparametric MTR component; note the sign flip on the arm-0 derivative.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .mixture import EstimationError, MixtureProbitFit
from .numerics import (BasisSpec, SolverConfig, bspline_design,
                       bspline_deriv_design, solve_penalized_lsq)

__all__ = ["StageInput", "OutcomeStageFit", "MteCurve", "build_regressors",
           "fit_outcome_stage", "mtr", "mte", "mte_curve", "default_grid"]

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class StageInput:
    """Membership probabilities and propensities feeding the second stage."""

    pi: np.ndarray
    propensities: np.ndarray  # n x S
    source: str               # "feasible" | "infeasible"
    degenerate: bool = False

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        prop = np.asarray(self.propensities, dtype=float)
        if self.source not in ("feasible", "infeasible"):
            raise ValueError(f"unknown stage-input source {self.source!r}")
        if pi.ndim != 1 or abs(pi.sum() - 1.0) > 1e-8 or np.any(pi <= 0):
            raise ValueError("pi must lie on the simplex")
        if prop.ndim != 2 or prop.shape[1] != pi.shape[0]:
            raise ValueError("propensity matrix must be n x S")
        if np.any(prop <= 0.0) or np.any(prop >= 1.0):
            raise ValueError("propensities must lie strictly inside (0, 1)")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "propensities", prop)

    @classmethod
    def from_mixture_fit(cls, fit: MixtureProbitFit) -> "StageInput":
        return cls(pi=fit.params.pi, propensities=fit.propensities,
                   source="feasible", degenerate=fit.degenerate)

    @classmethod
    def from_true(cls, pi, propensities) -> "StageInput":
        return cls(pi=np.asarray(pi, dtype=float),
                   propensities=np.asarray(propensities, dtype=float),
                   source="infeasible")

    @property
    def n_groups(self) -> int:
        return self.pi.shape[0]


def build_regressors(data: Dataset, stage: StageInput, basis: BasisSpec,
                     arm: int) -> np.ndarray:
    """Stacked regressor matrix, n x S*(dim(X) + K).

    Row layout: covariate blocks for groups 1..S, then spline blocks for
    groups 1..S. Arm 0 swaps P_j for 1 - P_j in the covariate blocks only.
    """
    if arm not in (0, 1):
        raise ValueError("arm must be 0 or 1")
    if stage.propensities.shape[0] != data.n:
        raise ValueError("stage input rows do not match the dataset")
    s = stage.n_groups
    blocks = []
    for j in range(s):
        p = stage.propensities[:, j]
        weight = p if arm == 1 else 1.0 - p
        blocks.append(stage.pi[j] * weight[:, None] * data.x)
    for j in range(s):
        p = stage.propensities[:, j]
        blocks.append(stage.pi[j] * bspline_design(p, basis))
    return np.hstack(blocks)


@dataclass
class OutcomeStageFit:
    """Stacked coefficients for both arms plus the solving configuration.

    theta vectors are partitioned as (beta_1, ..., beta_S, alpha_1, ...,
    alpha_S); ``beta``/``alpha`` slice out the per-group blocks. Under a
    zero ridge penalty the raw alpha blocks are basis-dependent (the
    design is rank-deficient through the spline partition of unity); only
    fitted values and MTE/MTR evaluations are contractual.
    """

    theta1: np.ndarray
    theta0: np.ndarray
    basis: BasisSpec
    solver: SolverConfig
    stage_input: StageInput
    dim_x: int

    @property
    def n_groups(self) -> int:
        return self.stage_input.n_groups

    def theta(self, arm: int) -> np.ndarray:
        return self.theta1 if arm == 1 else self.theta0

    def beta(self, arm: int, group: int) -> np.ndarray:
        self._check_group(group)
        off = group * self.dim_x
        return self.theta(arm)[off:off + self.dim_x]

    def alpha(self, arm: int, group: int) -> np.ndarray:
        self._check_group(group)
        off = self.n_groups * self.dim_x + group * self.basis.K
        return self.theta(arm)[off:off + self.basis.K]

    def _check_group(self, group: int):
        if not 0 <= group < self.n_groups:
            raise ValueError(f"group index {group} out of range")

    def to_dict(self, include_propensities: bool = True) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "theta1": self.theta1.tolist(),
            "theta0": self.theta0.tolist(),
            "basis": {"order": self.basis.order,
                      "inner_knots": self.basis.inner_knots},
            "solver": {"ridge_lambda": self.solver.ridge_lambda,
                       "pinv_rel_tol": self.solver.pinv_rel_tol},
            "stage_input": {
                "pi": self.stage_input.pi.tolist(),
                "source": self.stage_input.source,
                "degenerate": self.stage_input.degenerate,
            },
            "dim_x": self.dim_x,
        }
        if include_propensities:
            out["stage_input"]["propensities"] = \
                self.stage_input.propensities.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "OutcomeStageFit":
        stage = StageInput(
            pi=np.asarray(d["stage_input"]["pi"]),
            propensities=np.asarray(d["stage_input"]["propensities"]),
            source=d["stage_input"]["source"],
            degenerate=d["stage_input"].get("degenerate", False),
        )
        return cls(
            theta1=np.asarray(d["theta1"]),
            theta0=np.asarray(d["theta0"]),
            basis=BasisSpec(order=d["basis"]["order"],
                            inner_knots=d["basis"]["inner_knots"]),
            solver=SolverConfig(ridge_lambda=d["solver"]["ridge_lambda"],
                                pinv_rel_tol=d["solver"]["pinv_rel_tol"]),
            stage_input=stage,
            dim_x=d["dim_x"],
        )

    def save_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)


def fit_outcome_stage(data: Dataset, stage: StageInput, basis: BasisSpec,
                      solver: SolverConfig,
                      force: bool = False) -> OutcomeStageFit:
    """Solve the two arm-specific penalized least-squares problems."""
    if stage.degenerate and not force:
        raise EstimationError(
            "mixture fit is flagged as degenerate (a component probability "
            "collapsed); pass force=True to proceed anyway"
        )
    d_sxk = stage.n_groups * (data.dim_x + basis.K)
    if data.n <= d_sxk:
        raise EstimationError(
            f"need n > S*(dim(X)+K) = {d_sxk}, got n = {data.n}"
        )
    r1 = build_regressors(data, stage, basis, arm=1)
    r0 = build_regressors(data, stage, basis, arm=0)
    theta1 = solve_penalized_lsq(r1, data.d * data.y, solver)
    theta0 = solve_penalized_lsq(r0, (1.0 - data.d) * data.y, solver)
    return OutcomeStageFit(theta1=theta1, theta0=theta0, basis=basis,
                           solver=solver, stage_input=stage, dim_x=data.dim_x)


def _check_eval_point(p: float):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"evaluation point p={p} outside [0, 1]")
    if p in (0.0, 1.0):
        warnings.warn(
            "MTR/MTE evaluated at the boundary of the unit interval, where "
            "series estimates are unreliable",
            stacklevel=3,
        )


def mtr(fit: OutcomeStageFit, group: int, arm: int, x, p: float) -> float:
    """Marginal treatment response m_j^(d)(x, p)."""
    if arm not in (0, 1):
        raise ValueError("arm must be 0 or 1")
    _check_eval_point(p)
    x = np.asarray(x, dtype=float)
    if x.shape != (fit.dim_x,):
        raise ValueError(f"x must have length {fit.dim_x}")
    from .numerics import bspline_deriv
    grad = bspline_deriv(p, fit.basis)
    spline_part = float(grad @ fit.alpha(arm, group))
    linear = float(x @ fit.beta(arm, group))
    return linear + spline_part if arm == 1 else linear - spline_part


def mte(fit: OutcomeStageFit, group: int, x, p: float) -> float:
    """Marginal treatment effect, the arm difference of the MTRs."""
    return mtr(fit, group, 1, x, p) - mtr(fit, group, 0, x, p)


@dataclass
class MteCurve:
    group: int
    x: np.ndarray
    grid: np.ndarray
    values: np.ndarray
    se: np.ndarray | None = None
    ci_low: np.ndarray | None = None
    ci_high: np.ndarray | None = None
    level: float | None = None


def default_grid() -> np.ndarray:
    return np.round(np.arange(0.01, 1.0, 0.01), 10)


def mte_curve(fit: OutcomeStageFit, group: int, x, grid=None) -> MteCurve:
    """Pointwise MTE over a propensity grid (no standard errors)."""
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)
    x = np.asarray(x, dtype=float)
    values = np.array([mte(fit, group, x, p) for p in grid])
    return MteCurve(group=group, x=x, grid=grid, values=values)
