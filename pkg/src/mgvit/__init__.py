"""Mask-guided vision transformer for few-shot learning, on a numpy autodiff core."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (SampleRecord, SyntheticSpec, generate_classification, generate_detection,
                   load_dataset, save_dataset, split_base_novel)
from .errors import FormatError, InputError, MGViTError, NonFiniteError, ShapeError, UsageError
from .maskgen import (MaskSpec, SalienceMap, compute_salience, continued_mask, discrete_mask,
                      salience_for_set)
from .optim import AdamW, cosine_lr
from .selection import FewShotTask, kmeans, select_neighborhood, select_representatives, select_shots
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, run_ablation, run_experiment
from .vit import ModelConfig, ViT, interpolate_pos_embed

__version__ = "0.1.0"
