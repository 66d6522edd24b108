"""Bayesian multivariate quantile regression with a dependent Dirichlet
process mixture prior, plus geometric-quantile solvers, frequentist
baselines and a benchmark harness."""

from .baselines import (LinearMedianFit, cv_bandwidth, kernel_spatial_median,
                        linear_spatial_median_fit)
from .geoquant import (MixtureSpec, SolverSettings, bessel_i0, bessel_i0e,
                       empirical_geometric_quantile, mixture_quantile_mc,
                       mixture_quantile_polar, phi, weighted_geometric_quantile)
from .gibbs import ChainRngs, McmcSettings, gibbs_sweep, init_state, run_chain
from .model import (ChainState, Dataset, GPKernelMatrix, Hyperparams,
                    default_hyperparams, gp_conditional, gp_cov, stick_break)
from .pipeline import (CovariateDensity, PosteriorDraws, QuantileEstimate,
                       QuantileQuery, conditional_quantile, default_delta,
                       delta_smoothed_quantile, error_quantile_per_draw,
                       kde_fit, location_draw_at)
from .simbench import (SimConfig, gen_covariates, gen_errors_gamma,
                       gen_errors_t1, make_response, mse, run_table1,
                       true_curve, true_error_median)

__version__ = "0.1.0"
