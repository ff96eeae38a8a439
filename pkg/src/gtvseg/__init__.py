"""2.5D attention U-Net segmentation of small targets in anisotropic CT, numpy only."""

from .autograd import GradTape, Tensor, backward, grad_check
from .ensemble import (
    EnsembleResult,
    ProbabilityMap,
    binarize,
    ensemble_average,
    ensemble_predict,
    error_rate_by_level,
    largest_connected_component,
    pixelwise_entropy,
    sliding_window_predict,
    vvc,
    vvc_dice_scatter,
)
from .metrics import MetricsReport, assd, dice_score, evaluate, rve, surface_points
from .nn import NetworkConfig, NetworkParams, init_params, unet_forward
from .phantom import PhantomSpec, generate_phantom
from .preprocess import RegionBox, compute_region, preprocess, sample_patch
from .training import TrainConfig, dice_loss, train
from .volume import LabelMask, Volume

__version__ = "0.1.0"
