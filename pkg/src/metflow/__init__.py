"""Metropolized normalizing-flow kernels trained as variational families."""

import os as _os

# cap BLAS thread pools before numpy loads them
_threads = _os.environ.get("METFLOW_THREADS", "")
if _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .density import PriorModel, component_logpdf, marginal_logpdf, one_step_logpdf, prior_logpdf
from .elbo import (
    InferenceFn,
    Trajectory,
    elbo_and_grad,
    elbo_value,
    grad_estimate,
    nf_baseline_elbo,
    simulate_trajectory,
)
from .errors import (
    CapacityError,
    ConfigError,
    ConvergenceError,
    DomainError,
    MetFlowError,
    NumericalError,
    ShapeError,
)
from .flows import FlowStack, RnvpBlock, block_forward, block_inverse, signed_step, stack_apply
from .grad import ParamTree, Tape, Var, backward, check_grad
from .kernels import BARKER, MH, DirectionDist, RatioFamily, StepOutcome, metflow_accept_prob, metflow_step
from .model import MetFlowModel
from .targets import TargetModel, eight_gaussians, gaussian, get_target, hypercube_mixture, neal_funnel, register_target
from .train import TrainConfig, load_checkpoint, save_checkpoint, train
from .config import RunConfig, build_model, load_config, preset, preset_names
from .sampler import SampleSet, invariance_test, marginal_ks, mode_count, sample, sample_baseline

__version__ = "0.1.0"
