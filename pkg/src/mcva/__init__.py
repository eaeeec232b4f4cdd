"""Masked cost-volume autoencoding for optical flow, built on a small numpy autodiff core."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig, load_config, parse_config
from .errors import (AllTokensMasked, ConfigError, DatasetError, DivergedError, EmptyKeySet,
                     FormatError, MCVAError, NumericalError, ShapeError)
from .trainer import evaluate, run_finetuning, run_pretraining

__version__ = "0.1.0"
