"""Cascaded U-Net with loss weighted sampling, in numpy, on synthetic tumor phantoms."""

from .data import VolumeSample, generate_phantom, read_dataset, read_split_dataset, synthesize, write_split_dataset
from .errors import ConfigError, ContractViolation, DegenerateBatchError, FormatError, NumericError
from .lws import SamplingConfig, partition_regions, sample_matrix, weighted_cross_entropy
from .metrics import evaluate_dataset
from .model import CUNet, CUNetConfig, fuse_predictions
from .render import render_overlay
from .train import TrainConfig, evaluate, load_model, predict

__version__ = "0.1.0"
