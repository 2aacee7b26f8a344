"""Continuous U-Net: second-order neural ODE blocks inside a U-Net, trained with adjoint gradients."""
from .data import SegSample, synth_blobs
from .estimator import ContinuousUNetSegmenter
from .metrics import MetricReport, accuracy, average_hausdorff, dice
from .node import AugmentedState, DynamicBlock, FirstOrderBlock, adjoint_backward, forward_block
from .solvers import IntegrationConfig, SolverKind, estimate_convergence_order, integrate
from .tensor import Tensor
from .unet import ContinuousUNet, TrainConfig, UNetConfig, build, train

__all__ = [
    "AugmentedState", "ContinuousUNet", "ContinuousUNetSegmenter", "DynamicBlock", "FirstOrderBlock",
    "IntegrationConfig", "MetricReport", "SegSample", "SolverKind", "Tensor", "TrainConfig", "UNetConfig",
    "accuracy", "adjoint_backward", "average_hausdorff", "build", "dice", "estimate_convergence_order",
    "forward_block", "integrate", "synth_blobs", "train",
]
__version__ = "0.1.0"
