"""Shared fixtures and independent oracles used across the test suite.

Oracles deliberately avoid the package's own numerics: Probit fits use
scipy.optimize on the raw log-likelihood, spline references use
scipy.interpolate.BSpline, and closed-form values are derived by hand in
comments where they appear.
"""

import numpy as np
from scipy import optimize
from scipy.stats import norm

from mixmte.data import Dataset


def probit_oracle(z, d, weights=None):
    """Weighted Probit MLE via scipy BFGS on the exact log-likelihood."""
    w = np.ones(len(d)) if weights is None else np.asarray(weights)

    def negll(g):
        idx = z @ g
        return -float(w @ (d * norm.logcdf(idx) + (1 - d) * norm.logsf(idx)))

    def grad(g):
        idx = z @ g
        phi = norm.cdf(idx)
        phi = np.clip(phi, 1e-300, 1 - 1e-16)
        dens = norm.pdf(idx)
        score = w * (d - phi) * dens / (phi * (1 - phi))
        return -(z.T @ score)

    res = optimize.minimize(negll, np.zeros(z.shape[1]), jac=grad,
                            method="BFGS",
                            options={"gtol": 1e-12, "maxiter": 500})
    return res.x


def make_probit_dataset(n, gamma, seed):
    """Single-group Probit data with instruments (1, z) and covariate x."""
    rng = np.random.default_rng(seed)
    zcol = rng.standard_normal(n)
    z = np.column_stack([np.ones(n), zcol])
    d = (z @ gamma >= rng.standard_normal(n)).astype(float)
    y = d + 0.1 * rng.standard_normal(n)
    x = np.column_stack([np.ones(n), rng.standard_normal(n)])
    return Dataset(y=y, d=d, x=x, z_blocks=(z,),
                   x_names=("const", "x1"), z_names=(("const", "z1"),))
