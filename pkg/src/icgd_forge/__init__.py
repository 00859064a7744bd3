"""Transformer weights that carry out projected gradient descent on a sigmoid network in context."""

from .activation import SIGMOID, ActivationSpec
from .builder import BlockPlan, StackWeights, build_stack, make_plan, run_stack
from .kernels import BACKENDS, DEFAULT_BACKEND
from .network import (
    Dataset,
    DomainBox,
    NetworkParams,
    NetworkShape,
    exact_gradient,
    finite_diff_gradient,
    forward_all,
    gd_trajectory,
    layer_offsets,
    random_instance,
)
from .relu_approx import SumOfRelus, build_pwl_approx, evaluate, measure_sup_error

__version__ = "0.1.0"

__all__ = [
    "SIGMOID", "ActivationSpec", "BlockPlan", "StackWeights", "build_stack", "make_plan", "run_stack",
    "BACKENDS", "DEFAULT_BACKEND", "Dataset", "DomainBox", "NetworkParams", "NetworkShape", "exact_gradient",
    "finite_diff_gradient", "forward_all", "gd_trajectory", "layer_offsets", "random_instance", "SumOfRelus", "build_pwl_approx",
    "evaluate", "measure_sup_error",
]
