"""Learned control-barrier training with a Pareto two-loss update rule.

The package trains a neural inner safe set certificate for control-affine
systems, checks it against a grid viability kernel on 2-D benchmarks, and
deploys it as an exact small-QP safety filter in closed-loop simulation.
"""

__version__ = "0.1.0"

from .barrier import Ncbf, load_ncbf, save_ncbf
from .hjgrid import ValueGrid, compare_sets, compute_kernel, grid_interpolate
from .mlp import MlpParams, mlp_forward, mlp_init
from .runtime import FilterDecision, Trajectory, cbf_qp_filter, simulate
from .systems import (
    ControlAffineSystem,
    NonFiniteStateError,
    make_pendulum,
    make_quadrotor,
    make_system,
)
from .training import (
    GaussianSampler,
    NumericalError,
    TrainerConfig,
    compute_losses,
    pcbf_direction,
    solve_base_subproblem,
    train,
)

__all__ = [
    "ControlAffineSystem",
    "FilterDecision",
    "GaussianSampler",
    "MlpParams",
    "Ncbf",
    "NonFiniteStateError",
    "NumericalError",
    "Trajectory",
    "TrainerConfig",
    "ValueGrid",
    "cbf_qp_filter",
    "compare_sets",
    "compute_kernel",
    "compute_losses",
    "grid_interpolate",
    "load_ncbf",
    "make_pendulum",
    "make_quadrotor",
    "make_system",
    "mlp_forward",
    "mlp_init",
    "pcbf_direction",
    "save_ncbf",
    "simulate",
    "solve_base_subproblem",
    "train",
    "__version__",
]
