"""Polar-domain lumen segmentation with a contour branch, a pixel branch and CDFeLU coupling."""

from .estimator import GeoUNetSegmenter, PolarTransformer
from .geometry import (
    CartesianFrame, CartesianMask, ContourDepthMap, PolarFrame, PolarMask, SoftContour,
    cartesian_to_polar, contour_to_mask, largest_component, mask_to_contour_depth,
    polar_to_cartesian, slice_middle, wrap_pad,
)
from .inference import discontinuity_score, infer
from .losses import LossWeights, contour_ce, dense_loss, hausdorff_dt, huber, soft_dice, unified_loss
from .metrics import clinical_report, diameters, dice, mm_calibration
from .model import ForwardOutput, GeoUNet, ModelConfig, build_model, cdfelu, predict_mask
from .phantom import PhantomSpec, Sample, make_dataset, render_sample, sample_contour
from .training import AugmentConfig, TrainConfig, augment, lr_schedule, run_ablation_suite, train

__version__ = "0.1.0"
