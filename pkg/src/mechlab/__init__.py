"""Single-call truthful mechanisms: black-box reductions, verifiers and metrics."""

from .core import (ConfigurationError, DistributionError, GridStep, MechanismError,
                   MidrInstance, NumericalError, PostedThreshold, SingleCallViolation,
                   SubsetMask, TableAllocation, TopKByScore, make_rng)
from .reduction_midr import (ProductGammaDistribution, SubsetDistribution, run_generic_midr,
                             run_optmidr)
from .reduction_sp import BksParams, run_bks, run_bks_batch

__version__ = "0.1.0"
