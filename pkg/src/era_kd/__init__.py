"""Expandable residual approximation for knowledge distillation, in numpy."""
from .checkpoint import Checkpoint, load_era, save_model
from .config import RunConfig, load_config
from .autodiff import Tape, Tensor, backward, check_gradients
from .data import Dataset, SyntheticSpec, generate, load_csv, save_csv
from .distiller import EncoderSpec, SGD, TrainConfig, distill, train_step, train_teacher
from .inference import InferenceSpec, evaluate_accuracy, infer
from .losses import LossWeights, schedule_s, total_era_loss
from .model import EraModel, ResidualState, build_era_model, cascade_forward, residual_targets

__version__ = "0.1.0"
