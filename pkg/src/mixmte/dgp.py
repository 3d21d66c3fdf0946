"""Synthetic data generating process, analytic truths, and the Monte Carlo
replication harness.

The default configuration is a two-group design: group membership is
drawn with probabilities (0.35, 0.65); each group's treatment choice is a
Probit on (1, X1, zeta_j) with a group-specific continuous instrument
zeta_j; potential outcomes are linear in (1, X1) with group-specific
coefficients plus an error whose conditional mean given the resistance V
is V (untreated) or V^2 (treated).

Random draws use numpy's PCG64 generator. Within a replication the draw
order is fixed (X1, zeta_1, zeta_2, membership, choice shocks, outcome
noise, each as a full n-vector), and per-replication streams derive from
SeedSequence(base_seed, replication), so results do not depend on
scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .aggregates import BinaryIvDataset
from .data import Dataset
from .inference import build_inference_matrices, mte_se
from .mixture import EmSettings, EstimationError, em_fit
from .numerics import BasisSpec, SolverConfig, normal_cdf, normal_quantile
from .series import StageInput, fit_outcome_stage, mte

__all__ = ["DgpConfig", "SimulatedDataset", "BinaryIvSimulation",
           "McSettings", "McCell", "McReport", "simulate",
           "simulate_binary_iv", "true_mte", "mc_run",
           "DEFAULT_MTE_GRID", "DEFAULT_MTE_X"]

DEFAULT_MTE_GRID = (0.2, 0.4, 0.6, 0.8)
DEFAULT_MTE_X = (1.0, 0.5)


@dataclass(frozen=True)
class DgpConfig:
    n: int = 1000
    pi: tuple[float, float] = (0.35, 0.65)
    gamma1: tuple[float, ...] = (0.0, -0.5, 0.5)
    gamma2: tuple[float, ...] = (0.0, 0.3, -0.7)
    beta1_0: tuple[float, float] = (-1.0, 1.0)
    beta2_0: tuple[float, float] = (1.0, 2.0)
    beta1_1: tuple[float, float] = (1.0, -1.0)
    beta2_1: tuple[float, float] = (2.0, 1.0)
    eta_sd: float = 0.5

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if abs(sum(self.pi) - 1.0) > 1e-12 or any(p <= 0 for p in self.pi):
            raise ValueError("pi must be a probability vector")

    @property
    def gammas(self):
        return (np.asarray(self.gamma1), np.asarray(self.gamma2))

    def beta(self, arm: int, group: int) -> np.ndarray:
        table = ((self.beta1_0, self.beta2_0), (self.beta1_1, self.beta2_1))
        return np.asarray(table[arm][group], dtype=float)


@dataclass(frozen=True)
class SimulatedDataset:
    """Observed Dataset plus the latent bookkeeping columns."""

    dataset: Dataset
    s: np.ndarray         # group membership, 0-based
    v: np.ndarray         # n x S resistances
    p_true: np.ndarray    # n x S true propensities
    y0: np.ndarray
    y1: np.ndarray


def simulate(config: DgpConfig, seed: int) -> SimulatedDataset:
    """Draw one dataset; identical seeds give bitwise-identical output."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n = config.n
    x1 = rng.standard_normal(n)
    zeta1 = rng.standard_normal(n)
    zeta2 = rng.standard_normal(n)
    u_member = rng.random(n)
    eps1 = rng.standard_normal(n)
    eps2 = rng.standard_normal(n)
    eta0 = config.eta_sd * rng.standard_normal(n)
    eta1 = config.eta_sd * rng.standard_normal(n)

    s = (u_member >= config.pi[0]).astype(int)  # 0 w.p. pi_1, else 1
    x = np.column_stack([np.ones(n), x1])
    z_blocks = (np.column_stack([np.ones(n), x1, zeta1]),
                np.column_stack([np.ones(n), x1, zeta2]))
    eps = np.column_stack([eps1, eps2])
    v = normal_cdf(eps)
    p_true = np.column_stack([
        normal_cdf(z_blocks[j] @ config.gammas[j]) for j in (0, 1)
    ])
    rows = np.arange(n)
    d = (p_true[rows, s] >= v[rows, s]).astype(float)

    v_own = v[rows, s]
    beta0 = np.column_stack([x @ config.beta(0, j) for j in (0, 1)])
    beta1_ = np.column_stack([x @ config.beta(1, j) for j in (0, 1)])
    y0 = beta0[rows, s] + v_own + eta0
    y1 = beta1_[rows, s] + v_own ** 2 + eta1
    y = d * y1 + (1.0 - d) * y0

    dataset = Dataset(
        y=y, d=d, x=x, z_blocks=z_blocks,
        x_names=("const", "x1"),
        z_names=(("const", "x1", "zeta1"), ("const", "x1", "zeta2")),
    )
    return SimulatedDataset(dataset=dataset, s=s, v=v, p_true=p_true,
                            y0=y0, y1=y1)


def true_mte(config: DgpConfig, group: int, x, v: float) -> float:
    """Closed-form MTE implied by the design: x'(beta1 - beta0) + v^2 - v."""
    if not 0.0 <= v <= 1.0:
        raise ValueError("v must lie in [0, 1]")
    x = np.asarray(x, dtype=float)
    lin = float(x @ (config.beta(1, group) - config.beta(0, group)))
    return lin + v * v - v


@dataclass(frozen=True)
class BinaryIvSimulation:
    """Binary-instrument variant exposing complier status for oracles.

    The continuous instruments are replaced by Bernoulli(0.5) draws that
    enter each group's choice equation with a positive coefficient, so
    there are compliers but no defiers. ``d_off``/``d_on`` are the
    potential treatments with the own-group instrument switched off/on.
    """

    data: BinaryIvDataset
    s: np.ndarray
    d_off: np.ndarray
    d_on: np.ndarray
    y0: np.ndarray
    y1: np.ndarray

    @property
    def complier(self) -> np.ndarray:
        return (self.d_on == 1.0) & (self.d_off == 0.0)


def simulate_binary_iv(config: DgpConfig, seed: int) -> BinaryIvSimulation:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n = config.n
    x1 = rng.standard_normal(n)
    z = (rng.random((n, 2)) < 0.5).astype(float)
    u_member = rng.random(n)
    eps1 = rng.standard_normal(n)
    eps2 = rng.standard_normal(n)
    eta0 = config.eta_sd * rng.standard_normal(n)
    eta1 = config.eta_sd * rng.standard_normal(n)

    s = (u_member >= config.pi[0]).astype(int)
    rows = np.arange(n)
    eps = np.column_stack([eps1, eps2])
    eps_own = eps[rows, s]
    x = np.column_stack([np.ones(n), x1])

    # Instrument coefficient made positive so switching it on can only
    # push individuals into treatment (no defiers).
    base = np.column_stack([
        x @ np.asarray(config.gammas[j][:2]) for j in (0, 1)
    ])
    strength = np.array([abs(config.gammas[0][2]), abs(config.gammas[1][2])])
    base_own = base[rows, s]
    strength_own = strength[s]
    d_off = (base_own >= eps_own).astype(float)
    d_on = (base_own + strength_own >= eps_own).astype(float)
    z_own = z[rows, s]
    d = np.where(z_own == 1.0, d_on, d_off)

    v_own = normal_cdf(eps_own)
    beta0 = np.column_stack([x @ config.beta(0, j) for j in (0, 1)])
    beta1_ = np.column_stack([x @ config.beta(1, j) for j in (0, 1)])
    y0 = beta0[rows, s] + v_own + eta0
    y1 = beta1_[rows, s] + v_own ** 2 + eta1
    y = d * y1 + (1.0 - d) * y0

    return BinaryIvSimulation(
        data=BinaryIvDataset(y=y, d=d, z=z),
        s=s, d_off=d_off, d_on=d_on, y0=y0, y1=y1,
    )


@dataclass(frozen=True)
class McSettings:
    """Estimator configuration for one Monte Carlo experiment."""

    basis: BasisSpec = BasisSpec(order=3, inner_knots=1)
    ridge: bool = True                   # penalty 10/n (on the SSR) when on
    em: EmSettings = EmSettings()
    estimators: tuple[str, ...] = ("feasible", "infeasible")
    grid: tuple[float, ...] = DEFAULT_MTE_GRID
    x_point: tuple[float, ...] = DEFAULT_MTE_X
    second_stage: bool = True
    compute_se: bool = False
    ci_level: float = 0.95


@dataclass
class McCell:
    """Bias/RMSE (and optional CI coverage) for one reported quantity."""

    label: str
    bias: float
    rmse: float
    coverage: float | None = None


@dataclass
class McReport:
    config: DgpConfig
    settings: McSettings
    replications: int
    completed: int
    failures: list[str]
    ml_cells: list[McCell]
    mte_cells: dict[str, list[McCell]]   # estimator name -> cells

    def cell(self, estimator: str, label: str) -> McCell:
        for c in self.mte_cells[estimator]:
            if c.label == label:
                return c
        raise KeyError(label)

    def ml_cell(self, label: str) -> McCell:
        for c in self.ml_cells:
            if c.label == label:
                return c
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "n": self.config.n,
            "replications": self.replications,
            "completed": self.completed,
            "failures": self.failures,
            "inner_knots": self.settings.basis.inner_knots,
            "ridge": self.settings.ridge,
            "ml": [vars(c) for c in self.ml_cells],
            "mte": {k: [vars(c) for c in cells]
                    for k, cells in self.mte_cells.items()},
        }


def _ml_truth(config: DgpConfig) -> list[tuple[str, float]]:
    out = []
    for j, g in enumerate(config.gammas, start=1):
        out.extend((f"gamma{j}{k}", float(v))
                   for k, v in enumerate(g, start=1))
    out.extend((f"pi{j}", float(p)) for j, p in enumerate(config.pi, start=1))
    return out


def _replicate(config: DgpConfig, settings: McSettings, seed: int):
    """One replication: simulate, fit both stages, return error records."""
    sim = simulate(config, seed)
    data = sim.dataset
    fit1 = em_fit(data, settings.em)

    ml_est = np.concatenate([*fit1.params.gamma, fit1.params.pi])
    record = {"ml": ml_est, "mte": {}, "se": {}}
    if not settings.second_stage:
        return record

    # Ridge penalty 10/n on the sum-of-squares objective; the solver works
    # with the (1/n)-normalized objective, hence the extra 1/n here.
    lam = 10.0 / config.n ** 2 if settings.ridge else 0.0
    solver = SolverConfig(ridge_lambda=lam)
    x_pt = np.asarray(settings.x_point)
    z_crit = normal_quantile(1.0 - (1.0 - settings.ci_level) / 2.0)
    for name in settings.estimators:
        if name == "feasible":
            stage = StageInput.from_mixture_fit(fit1)
        elif name == "infeasible":
            stage = StageInput.from_true(np.asarray(config.pi),
                                         np.clip(sim.p_true, 1e-10,
                                                 1.0 - 1e-10))
        else:
            raise ValueError(f"unknown estimator {name!r}")
        fit2 = fit_outcome_stage(data, stage, settings.basis, solver)
        ests = np.array([
            mte(fit2, j, x_pt, v)
            for j in range(2) for v in settings.grid
        ])
        record["mte"][name] = ests
        if settings.compute_se:
            mats = build_inference_matrices(data, fit2)
            ses = np.array([
                mte_se(mats, fit2, j, v)
                for j in range(2) for v in settings.grid
            ])
            record["se"][name] = (ests - z_crit * ses, ests + z_crit * ses)
    return record


def mc_run(config: DgpConfig, settings: McSettings, replications: int,
           base_seed: int, workers: int = 1,
           progress=None) -> McReport:
    """Replicated bias/RMSE experiment over fresh seeded datasets.

    Failed replications are recorded and excluded from the aggregates; the
    run aborts if more than 5% of replications fail. ``workers`` > 1
    distributes replications over processes; per-replication seeds make
    the report identical regardless of scheduling.
    """
    if replications < 1:
        raise ValueError("replications must be >= 1")
    seeds = [int(np.random.SeedSequence([base_seed, r]).generate_state(1)[0])
             for r in range(replications)]

    results: dict[int, dict] = {}
    failures: list[str] = []

    def handle(r, outcome):
        if isinstance(outcome, Exception):
            failures.append(f"replication {r}: {outcome}")
        else:
            results[r] = outcome
        if progress is not None:
            progress(len(results) + len(failures), replications)

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {r: pool.submit(_replicate, config, settings, seeds[r])
                       for r in range(replications)}
            for r in range(replications):
                try:
                    handle(r, futures[r].result())
                except EstimationError as exc:
                    handle(r, exc)
    else:
        for r in range(replications):
            try:
                handle(r, _replicate(config, settings, seeds[r]))
            except EstimationError as exc:
                handle(r, exc)

    if len(failures) > 0.05 * replications:
        raise EstimationError(
            f"{len(failures)} of {replications} replications failed "
            f"(> 5%): {failures[:3]}"
        )

    ordered = [results[r] for r in sorted(results)]
    ml_truth = _ml_truth(config)
    ml_matrix = np.vstack([rec["ml"] for rec in ordered])
    ml_cells = []
    for k, (label, truth) in enumerate(ml_truth):
        err = ml_matrix[:, k] - truth
        ml_cells.append(McCell(label=label, bias=float(err.mean()),
                               rmse=float(np.sqrt(np.mean(err ** 2)))))

    mte_cells: dict[str, list[McCell]] = {}
    if settings.second_stage:
        x_pt = np.asarray(settings.x_point)
        truths = np.array([
            true_mte(config, j, x_pt, v)
            for j in range(2) for v in settings.grid
        ])
        labels = [f"MTE{j + 1}.{k + 1}"
                  for j in range(2) for k in range(len(settings.grid))]
        for name in settings.estimators:
            ests = np.vstack([rec["mte"][name] for rec in ordered])
            err = ests - truths
            cells = []
            for k, label in enumerate(labels):
                cov = None
                if settings.compute_se:
                    lo = np.array([rec["se"][name][0][k] for rec in ordered])
                    hi = np.array([rec["se"][name][1][k] for rec in ordered])
                    cov = float(np.mean((lo <= truths[k]) & (truths[k] <= hi)))
                cells.append(McCell(
                    label=label,
                    bias=float(err[:, k].mean()),
                    rmse=float(np.sqrt(np.mean(err[:, k] ** 2))),
                    coverage=cov,
                ))
            mte_cells[name] = cells

    return McReport(config=config, settings=settings,
                    replications=replications, completed=len(ordered),
                    failures=failures, ml_cells=ml_cells,
                    mte_cells=mte_cells)
