"""Score composition for tall-data posteriors over diffusion samplers."""

from .schedule import DiffusionSchedule, make_schedule
from .tasks import GaussianPrior, GaussianTask, GmmTask, LogNormalPrior, UniformPrior
from .fields import AnalyticFieldSet, NoiseModel, PerturbedFieldSet
from .compose import (FnpseComposer, GaussComposer, JacComposer, check_lambda_spd,
                      compose_det_gef, log_correction, zeta)
from .samplers import (DdimConfig, LangevinConfig, SampleSet, ddim_sample,
                       det_gef_sample, estimate_posterior_covs, mala_sample,
                       ula_sample)
from .metrics import dirac_concentration, make_projections, mmd_rbf, sliced_wasserstein

__all__ = [
    "DiffusionSchedule", "make_schedule",
    "GaussianPrior", "GaussianTask", "GmmTask", "LogNormalPrior", "UniformPrior",
    "AnalyticFieldSet", "NoiseModel", "PerturbedFieldSet",
    "FnpseComposer", "GaussComposer", "JacComposer", "check_lambda_spd",
    "compose_det_gef", "log_correction", "zeta",
    "DdimConfig", "LangevinConfig", "SampleSet", "ddim_sample", "det_gef_sample",
    "estimate_posterior_covs", "mala_sample", "ula_sample",
    "dirac_concentration", "make_projections", "mmd_rbf", "sliced_wasserstein",
]

__version__ = "0.1.0"
