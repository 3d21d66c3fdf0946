"""First-stage ML estimation of the finite-mixture Probit choice model.

The treatment indicator follows a Probit with group-specific coefficients:
a latent group j (probability pi_j) chooses treatment when Z_j'gamma_j
exceeds a standard normal shock. The mixture log-likelihood is maximized
by EM with multiple seeded starts; the M-step solves responsibility-
weighted Probit problems by Fisher scoring with step halving.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .data import Dataset
from .numerics import normal_cdf, normal_pdf

__all__ = [
    "EstimationError",
    "EmSettings",
    "MixtureProbitParams",
    "MixtureProbitFit",
    "mixture_loglik",
    "e_step",
    "m_step",
    "em_fit",
    "predict_propensity",
]

# Component probabilities are clamped away from {0, 1} before taking logs.
PROB_CLAMP = 1e-10
DEGENERATE_PI = 1e-4

SCHEMA_VERSION = 1


class EstimationError(RuntimeError):
    """Estimation failed (non-convergence, degenerate data, bad state)."""


@dataclass(frozen=True)
class EmSettings:
    n_starts: int = 10
    max_iter: int = 500
    tol: float = 1e-8                # relative log-likelihood change
    newton_tol: float = 1e-10        # M-step gradient norm
    newton_max_iter: int = 100
    perturb_sd: float = 0.5          # start dispersion around pooled Probit
    seed: int = 0


@dataclass(frozen=True)
class MixtureProbitParams:
    gamma: tuple[np.ndarray, ...]
    pi: np.ndarray

    def __post_init__(self):
        gamma = tuple(np.asarray(g, dtype=float) for g in self.gamma)
        pi = np.asarray(self.pi, dtype=float)
        if pi.shape != (len(gamma),):
            raise ValueError("pi length must match the number of groups")
        # With a single group pi is necessarily exactly 1; otherwise every
        # component probability must be strictly interior.
        interior_hi = 1.0 + 1e-12 if len(gamma) == 1 else 1.0
        if np.any(pi <= 0.0) or np.any(pi >= interior_hi) \
                or abs(pi.sum() - 1.0) > 1e-8:
            raise ValueError("pi must lie in the open simplex")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "pi", pi)

    @property
    def n_groups(self) -> int:
        return len(self.gamma)

    @property
    def n_parameters(self) -> int:
        return sum(g.size for g in self.gamma) + (self.n_groups - 1)


@dataclass
class MixtureProbitFit:
    params: MixtureProbitParams
    propensities: np.ndarray      # n x S, Phi(Z_j'gamma_j), clamped
    responsibilities: np.ndarray  # n x S posterior membership weights
    loglik: float
    aic: float
    trace: np.ndarray             # per-iteration log-likelihood, winning start
    n_starts_used: int
    converged: bool
    clamp_events: int = 0
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "gamma": [g.tolist() for g in self.params.gamma],
            "pi": self.params.pi.tolist(),
            "loglik": self.loglik,
            "aic": self.aic,
            "n_starts_used": self.n_starts_used,
            "n_iterations": int(len(self.trace)),
            "converged": self.converged,
            "clamp_events": self.clamp_events,
            "degenerate": self.degenerate,
        }

    def save_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _indices(params: MixtureProbitParams, data: Dataset) -> np.ndarray:
    cols = []
    for z, g in zip(data.z_blocks, params.gamma):
        if z.shape[1] != g.shape[0]:
            raise ValueError("gamma length does not match instrument block")
        cols.append(z @ g)
    idx = np.column_stack(cols)
    if not np.all(np.isfinite(idx)):
        raise ValueError("non-finite Probit index")
    return idx


class _ClampCounter:
    def __init__(self):
        self.events = 0


def _component_likelihoods(params, data, counter: _ClampCounter | None = None):
    """Per-observation Probit likelihood under each group, n x S."""
    phi = normal_cdf(_indices(params, data))
    n_clamped = int(np.sum((phi <= PROB_CLAMP) | (phi >= 1.0 - PROB_CLAMP)))
    if counter is not None:
        counter.events += n_clamped
    phi = np.clip(phi, PROB_CLAMP, 1.0 - PROB_CLAMP)
    d = data.d[:, None]
    return np.where(d == 1.0, phi, 1.0 - phi)


def mixture_loglik(params: MixtureProbitParams, data: Dataset) -> float:
    lik = _component_likelihoods(params, data)
    return float(np.sum(np.log(lik @ params.pi)))


def e_step(params: MixtureProbitParams, data: Dataset) -> np.ndarray:
    """Posterior membership weights w_ij, each row on the simplex."""
    lik = _component_likelihoods(params, data)
    num = lik * params.pi
    den = num.sum(axis=1)
    bad = np.nonzero(den <= 0.0)[0]
    if bad.size:
        raise EstimationError(
            f"all component likelihoods underflow at observation {bad[0]}"
        )
    return num / den[:, None]


_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _probit_moments(index):
    """Clamped Phi, its density, and the weighted log-likelihood pieces."""
    phi = special.ndtr(index)
    np.clip(phi, PROB_CLAMP, 1.0 - PROB_CLAMP, out=phi)
    dens = np.exp(-0.5 * index * index) * _INV_SQRT_2PI
    return phi, dens


def _weighted_probit(z, d, w, gamma0, tol, max_iter):
    """Maximize sum_i w_i [d_i log Phi(z_i'g) + (1-d_i) log(1-Phi(z_i'g))].

    Fisher scoring with step halving; returns the stationary point.
    """
    zt = z.T
    n = z.shape[0]

    def objective(phi):
        return float(w @ (d * np.log(phi) + (1.0 - d) * np.log1p(-phi)))

    gamma = np.asarray(gamma0, dtype=float).copy()
    phi, dens = _probit_moments(z @ gamma)
    obj = objective(phi)
    for _ in range(max_iter):
        inv_var = 1.0 / (phi * (1.0 - phi))
        grad = zt @ (w * (d - phi) * dens * inv_var)
        # the tolerance applies to the per-observation average gradient so
        # the stopping rule does not tighten with the sample size
        if np.linalg.norm(grad) <= tol * n:
            return gamma
        info_w = w * dens * dens * inv_var
        info = zt @ (info_w[:, None] * z)
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, grad, rcond=None)[0]
        scale = 1.0
        for _ in range(60):
            cand = gamma + scale * step
            phi_c, dens_c = _probit_moments(z @ cand)
            cand_obj = objective(phi_c)
            if cand_obj >= obj - 1e-12:
                gamma, obj, phi, dens = cand, cand_obj, phi_c, dens_c
                break
            scale *= 0.5
        else:
            raise EstimationError("step halving failed in weighted Probit")
    grad = zt @ (w * (d - phi) * dens / (phi * (1.0 - phi)))
    if np.linalg.norm(grad) > 1e-6 * n:
        raise EstimationError("weighted Probit did not reach a stationary point")
    return gamma


def m_step(responsibilities: np.ndarray, data: Dataset,
           warm_start: MixtureProbitParams,
           settings: EmSettings = EmSettings()) -> MixtureProbitParams:
    w = np.asarray(responsibilities, dtype=float)
    if w.shape != (data.n, warm_start.n_groups):
        raise ValueError("responsibility matrix has wrong shape")
    if np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-6:
        raise ValueError("responsibility rows must sum to 1")
    pi = w.mean(axis=0)
    if np.any(pi <= 0.0):
        raise EstimationError("a mixture component lost all responsibility")
    gamma = []
    for j, z in enumerate(data.z_blocks):
        try:
            gamma.append(_weighted_probit(
                z, data.d, w[:, j], warm_start.gamma[j],
                settings.newton_tol, settings.newton_max_iter,
            ))
        except EstimationError as exc:
            raise EstimationError(f"M-step failed for group {j}: {exc}") from exc
    return MixtureProbitParams(gamma=tuple(gamma), pi=pi / pi.sum())


def _pooled_probit(data: Dataset, settings: EmSettings) -> list[np.ndarray]:
    """Plain Probit MLE of D on each instrument block, one fit per group."""
    out = []
    w = np.ones(data.n)
    for j, z in enumerate(data.z_blocks):
        try:
            out.append(_weighted_probit(
                z, data.d, w, np.zeros(z.shape[1]),
                settings.newton_tol, settings.newton_max_iter,
            ))
        except EstimationError as exc:
            raise EstimationError(
                f"pooled Probit start failed for block {j} "
                f"(possible separation): {exc}"
            ) from exc
    return out


def _run_single_start(data, start_params, settings):
    # The component likelihood matrix is computed once per iteration and
    # shared between the log-likelihood and the E-step weights.
    params = start_params
    lik = _component_likelihoods(params, data)
    trace = [float(np.sum(np.log(lik @ params.pi)))]
    converged = False
    for _ in range(settings.max_iter):
        num = lik * params.pi
        den = num.sum(axis=1)
        bad = np.nonzero(den <= 0.0)[0]
        if bad.size:
            raise EstimationError(
                f"all component likelihoods underflow at observation {bad[0]}"
            )
        params = m_step(num / den[:, None], data, params, settings)
        lik = _component_likelihoods(params, data)
        ll = float(np.sum(np.log(lik @ params.pi)))
        if ll < trace[-1] - 1e-10:
            raise EstimationError("EM log-likelihood decreased")
        rel = abs(ll - trace[-1]) / (abs(trace[-1]) + 1.0)
        trace.append(ll)
        if rel < settings.tol:
            converged = True
            break
    return params, np.asarray(trace), converged


def em_fit(data: Dataset, settings: EmSettings = EmSettings()) -> MixtureProbitFit:
    """Best-of-starts EM fit of the mixture Probit model.

    Start 0 replicates the pooled Probit MLE across groups with uniform pi;
    the remaining starts perturb the coefficients with seeded Gaussian
    noise. Ties in final log-likelihood break by start index.
    """
    s = data.n_groups
    if settings.n_starts < 1:
        raise ValueError("need at least one EM start")
    base_gamma = _pooled_probit(data, settings)
    pi0 = np.full(s, 1.0 / s)

    rng_root = np.random.SeedSequence(settings.seed)
    streams = rng_root.spawn(settings.n_starts)
    best = None
    failures = []
    for k in range(settings.n_starts):
        if k == 0:
            gamma0 = [g.copy() for g in base_gamma]
        else:
            rng = np.random.default_rng(streams[k])
            gamma0 = [g + settings.perturb_sd * rng.standard_normal(g.shape)
                      for g in base_gamma]
        try:
            start = MixtureProbitParams(gamma=tuple(gamma0), pi=pi0.copy())
            params, trace, converged = _run_single_start(data, start, settings)
        except EstimationError as exc:
            failures.append(f"start {k}: {exc}")
            continue
        key = (trace[-1], -k)
        if best is None or key > best[0]:
            best = (key, params, trace, converged)
    if best is None:
        raise EstimationError(
            "all EM starts failed: " + "; ".join(failures)
        )
    _, params, trace, converged = best

    if s > 1 and len(set(data.z_names)) == 1 and data.z_names:
        warnings.warn(
            "identical instrument blocks across groups: labels are not "
            "structurally pinned; ordering groups by descending pi",
            stacklevel=2,
        )
        order = np.argsort(-params.pi)
        params = MixtureProbitParams(
            gamma=tuple(params.gamma[j] for j in order),
            pi=params.pi[order],
        )

    counter = _ClampCounter()
    _component_likelihoods(params, data, counter)
    prop = predict_propensity(params, data.z_blocks)
    resp = e_step(params, data)
    ll = float(trace[-1])
    return MixtureProbitFit(
        params=params,
        propensities=prop,
        responsibilities=resp,
        loglik=ll,
        aic=2.0 * params.n_parameters - 2.0 * ll,
        trace=trace,
        n_starts_used=settings.n_starts - len(failures),
        converged=converged,
        clamp_events=counter.events,
        degenerate=bool(np.any(params.pi < DEGENERATE_PI)),
    )


def predict_propensity(fit_or_params, z_blocks) -> np.ndarray:
    """Phi(Z_j'gamma_j) per group, clamped into (0, 1); n x S."""
    params = getattr(fit_or_params, "params", fit_or_params)
    cols = []
    for z, g in zip(z_blocks, params.gamma, strict=True):
        z = np.asarray(z, dtype=float)
        if z.shape[1] != g.shape[0]:
            raise ValueError("instrument block width does not match gamma")
        cols.append(normal_cdf(z @ g))
    return np.clip(np.column_stack(cols), PROB_CLAMP, 1.0 - PROB_CLAMP)
