"""Simulation-based and exact Bayesian inference for the temporal ETAS model."""
from .core import (
    PARAM_NAMES,
    Catalog,
    EtasParams,
    FixedParamMask,
    PosteriorSamples,
    PriorSpec,
    branching_ratio,
    synthetic_prior,
    reference_mcmc_prior,
)
from .simulate import SimConfig, simulate_batch, simulate_branching, simulate_thinning
from .likelihood import compensator, log_likelihood, mle, rescaled_times
from .gibbs import McmcConfig, gibbs_sample
from .summaries import SummaryConfig, summarize
from .nde import MdnModel, TrainConfig, mdn_log_prob, mdn_sample, mdn_train
from .tasks import EtasTask
from .engine import AbcConfig, SnpeConfig, abc_mcmc, abc_rejection, snpe_run
from .diagnostics import c2st, compensator_check, coverage, mmd

__version__ = "0.1.0"
