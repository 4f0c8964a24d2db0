"""Wavelet-pyramid normalizing flows for likelihood-based OOD detection.

The package factors an image density into an unconditional model of the
coarsest wavelet residue times per-level conditional flows of detail
coefficients given the low-pass image below them.  Per-level bits per
dimension, averaged over the informative levels, is the anomaly score.
"""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DatasetManifest,
    LesionProfile,
    ManifestRecord,
    SynthConfig,
    generate_synthetic,
    load_image,
    load_split,
    read_manifest,
    save_image,
    write_manifest,
)
from .evaluate import auc, metrics_json, roc_points, summarize, wavelet_magnitude_score
from .flows import (
    FlowModel,
    FlowNumericsError,
    LogDensity,
    build_glow,
    coupling_parameter_count,
    flow_log_likelihood,
    flow_sample,
)
from .haar import HaarLevel, HaarPyramid, build_pyramid, haar_forward, haar_inverse, reconstruct
from .masks import STRATEGIES, MaskError, make_mask
from .train import AugmentConfig, TrainConfig, TrainHistory, augment, dequantize, train
from .waveletflow import (
    LikelihoodReport,
    WaveletFlowModel,
    build_waveletflow,
    score_image,
    wf_sample,
)

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "CheckpointError",
    "DatasetManifest",
    "FlowModel",
    "FlowNumericsError",
    "HaarLevel",
    "HaarPyramid",
    "LesionProfile",
    "LikelihoodReport",
    "LogDensity",
    "ManifestRecord",
    "MaskError",
    "STRATEGIES",
    "SynthConfig",
    "TrainConfig",
    "TrainHistory",
    "WaveletFlowModel",
    "auc",
    "augment",
    "build_glow",
    "build_pyramid",
    "build_waveletflow",
    "coupling_parameter_count",
    "dequantize",
    "flow_log_likelihood",
    "flow_sample",
    "generate_synthetic",
    "haar_forward",
    "haar_inverse",
    "load_checkpoint",
    "load_image",
    "load_split",
    "make_mask",
    "metrics_json",
    "read_manifest",
    "reconstruct",
    "roc_points",
    "save_checkpoint",
    "save_image",
    "score_image",
    "summarize",
    "train",
    "wavelet_magnitude_score",
    "wf_sample",
    "write_manifest",
    "__version__",
]
