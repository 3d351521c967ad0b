"""Recursive coarse-to-fine image registration.

A small-displacement estimator is turned into a large-displacement one by
estimating on a half-resolution copy of the inputs, doubling that estimate,
warping the second image with it and letting the estimator correct what is
left. The recursion bottoms out at the estimator's minimum window size.
"""

from recureg.image_core import (
    downsample_half,
    gaussian_blur,
    upsample_double,
    warp,
    zero_field,
)
from recureg.estimator import (
    BlockMatchEstimator,
    CNNEstimator,
    EstimatorSpec,
    block_match_oracle,
    cnn_estimate,
)
from recureg.pyramid import LevelTrace, RecursionConfig, effective_range, register

__all__ = [
    "BlockMatchEstimator",
    "CNNEstimator",
    "EstimatorSpec",
    "LevelTrace",
    "RecursionConfig",
    "block_match_oracle",
    "cnn_estimate",
    "downsample_half",
    "effective_range",
    "gaussian_blur",
    "register",
    "upsample_double",
    "warp",
    "zero_field",
]
