"""Contrastive conditioning for GANs on small synthetic data: a numpy
reverse-mode autodiff core, the conditioning losses, spectrally normalized
networks, the alternating training loop and Fréchet-based evaluation."""

from .autodiff import Tape, Tensor, backward, grad_check, no_grad
from .datasets import LabeledDataset, load_csv, make_gaussian_mixture, make_rings, save_csv
from .evaluation import class_conditional_frechet, collapse_detector, fit_gaussian, frechet_distance
from .losses import EmbeddingBatch, acgan_aux_loss, loss_2c, loss_2c_aps, loss_eq7, nt_xent, projection_term, proxy_nca
from .models import DiscriminatorParams, GeneratorParams, ModelConfig
from .training import PRESETS, TrainConfig, Trainer, apply_preset, run_training

__version__ = "0.1.0"

__all__ = [
    "EmbeddingBatch",
    "DiscriminatorParams",
    "GeneratorParams",
    "LabeledDataset",
    "ModelConfig",
    "PRESETS",
    "Tape",
    "Tensor",
    "TrainConfig",
    "Trainer",
    "acgan_aux_loss",
    "apply_preset",
    "backward",
    "class_conditional_frechet",
    "collapse_detector",
    "fit_gaussian",
    "frechet_distance",
    "grad_check",
    "load_csv",
    "loss_2c",
    "loss_2c_aps",
    "loss_eq7",
    "make_gaussian_mixture",
    "make_rings",
    "no_grad",
    "nt_xent",
    "projection_term",
    "proxy_nca",
    "run_training",
    "save_csv",
]
