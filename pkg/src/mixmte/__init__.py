"""Group-wise marginal treatment effect estimation under latent group
heterogeneity: mixture-Probit first stage, series second stage, sandwich
inference, treatment-effect aggregation, and a Monte Carlo harness.
"""

from .aggregates import (BinaryIvDataset, CounterfactualPolicy, ate, cate,
                         prte, wald_late)
from .data import DataError, Dataset, GroupSpec, load_csv, validate_exclusions
from .dgp import (BinaryIvSimulation, DgpConfig, McReport, McSettings,
                  SimulatedDataset, mc_run, simulate, simulate_binary_iv,
                  true_mte)
from .inference import (InferenceMatrices, build_inference_matrices, mte_ci,
                        mte_se)
from .mixture import (EmSettings, EstimationError, MixtureProbitFit,
                      MixtureProbitParams, e_step, em_fit, m_step,
                      mixture_loglik, predict_propensity)
from .numerics import (BasisSpec, SolverConfig, bspline_basis, bspline_deriv,
                       gauss_legendre_integrate, normal_cdf, normal_pdf,
                       normal_quantile, solve_penalized_lsq)
from .series import (MteCurve, OutcomeStageFit, StageInput, build_regressors,
                     fit_outcome_stage, mte, mte_curve, mtr)

__version__ = "0.1.0"
