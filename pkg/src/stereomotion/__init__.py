"""Robust stereo visual-odometry motion estimation.

Outlier matches are flagged by a rank-constrained sparse plus low-rank
decomposition of the measurement matrix; the surviving matches are folded into
a 13x13 quadratic form minimised on SE(3).
"""

from .baselines import RansacConfig, minimal_model, ransac_estimate
from .estimator import compress, estimate_motion, estimate_unfiltered, evaluate_cost, lm_optimize
from .geometry import QuadMatch, Rigid3, StereoRig, build_W, exp_se3, log_se3
from .metrics import detection_stats, relative_error, se3_error
from .rdcr import OutlierMask, RdcrParams, apg_init, classify_outliers, rdcr_decompose
from .synthgen import CorruptionConfig, generate_scene

__all__ = [
    "CorruptionConfig",
    "OutlierMask",
    "QuadMatch",
    "RansacConfig",
    "RdcrParams",
    "Rigid3",
    "StereoRig",
    "apg_init",
    "build_W",
    "classify_outliers",
    "compress",
    "detection_stats",
    "estimate_motion",
    "estimate_unfiltered",
    "evaluate_cost",
    "exp_se3",
    "generate_scene",
    "lm_optimize",
    "log_se3",
    "minimal_model",
    "ransac_estimate",
    "rdcr_decompose",
    "relative_error",
    "se3_error",
]

__version__ = "0.1.0"
