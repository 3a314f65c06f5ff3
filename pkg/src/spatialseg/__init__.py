"""Spatially distributed 3D U-Net lesion segmentation with hierarchical
specialization learning and image-quality augmentation, in pure numpy."""

from .consensus import SegmentationResult, VoteAccumulator, segment_volume
from .hsl import HslPlan, run_hsl, specialize, train_generic
from .iqda import Alteration, IqdaPolicy, apply_iqda, axial_mean, gaussian_blur, unsharp_mask
from .metrics import MetricReport, evaluate_cases, hybrid_score, lesion_match, wilcoxon_signed_rank
from .tiling import NetworkAssignment, Region, TilingConfig, build_grid, fold_symmetric
from .training import GjlConfig, TrainConfig, gjl_gradient, gjl_loss, train_network
from .unet import NetworkParams, UNetConfig, load_checkpoint, save_checkpoint, unet_backward, unet_forward
from .volume import LabelMap, Volume, read_mvol, write_mvol

__version__ = "0.1.0"

__all__ = [
    "Alteration", "GjlConfig", "HslPlan", "IqdaPolicy", "LabelMap", "MetricReport", "NetworkAssignment",
    "NetworkParams", "Region", "SegmentationResult", "TilingConfig", "TrainConfig", "UNetConfig", "Volume",
    "VoteAccumulator", "apply_iqda", "axial_mean", "build_grid", "evaluate_cases", "fold_symmetric",
    "gaussian_blur", "gjl_gradient", "gjl_loss", "hybrid_score", "lesion_match", "load_checkpoint",
    "read_mvol", "run_hsl", "save_checkpoint", "segment_volume", "specialize", "train_generic",
    "train_network", "unet_backward", "unet_forward", "unsharp_mask", "wilcoxon_signed_rank", "write_mvol",
]
