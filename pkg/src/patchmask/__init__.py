"""Patch-based ResNet cloud and shadow masking for multispectral scenes."""

from .errors import (ChecksumError, ConfigurationError, ContractViolation, DataError, FormatError,
                     MagicError, PatchMaskError, TrainingAborted, TruncationError, VersionError)
from .estimator import LocalRegionExtractor, ResNetPatchClassifier
from .inference import InferenceConfig, apply_threshold, infer_scene, render_png, rethreshold
from .metrics import MetricsReport, aggregate, auroc, average_precision, confusion, evaluate
from .resnet import NetworkConfig, build, forward, load_checkpoint, save_checkpoint
from .sampler import SampleSet, enumerate_valid, extract, grid_split, subsample
from .scene import BandStack, MaskRaster, read_bandstack, read_mask, write_bandstack, write_mask
from .synth import SynthSpec, generate_synthetic
from .trainer import TrainConfig, train, train_arrays

__version__ = "0.1.0"
