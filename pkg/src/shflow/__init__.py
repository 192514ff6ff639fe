"""Sparse Hamiltonian flows for coreset variational inference."""

__version__ = "0.1.0"

from ._kernels import HAVE_COMPILED
from .elbo import ElboSample, ReferenceDistribution, estimate_elbo, exact_elbo, flow_log_density
from .errors import (BalanceInfeasibleError, ConfigError, DecompositionError, InvalidCoresetError,
                     InvalidDataError, InvalidParameterError, NumericalDivergence, TrainingAborted)
from .flow import (ConditionalRefresh, FlowOutput, FlowParams, PhaseState, conditional_refresh,
                   forward, inverse, leapfrog_step, quasi_refresh)
from .grad import ParameterGradient, elbo_gradient
from .metrics import (GaussianSummary, energy_distance, gaussian_kl, ksd_imq, relative_errors,
                      sample_summary)
from .model import (Coreset, Dataset, TargetModel, coreset_grad_log_potential,
                    coreset_log_potential, make_gaussian_location, make_linreg, make_logreg,
                    read_csv, select_coreset)
from .train import TrainConfig, TrainTrace, adam_step, fit, warm_start
