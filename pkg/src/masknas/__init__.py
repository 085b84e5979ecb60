"""Differentiable architecture search with masked image modeling, on a small numpy autodiff engine."""

from .data import DataConfig, ImageDataset, SplitPlan, load_cifar_binary, make_synthetic, split, write_cifar_binary
from .evaluate import EvalConfig, evaluate_genotype
from .losses import cross_entropy, joint_loss, masked_mse
from .masking import mask_images, patchify, sample_mask, unpatchify
from .records import RunRecord
from .search import ConfigError, SearchConfig, SearchState, run_search, unrolled_alpha_grad
from .space import Alpha, DiscreteNetwork, Genotype, Supernet, discretize

__version__ = "0.1.0"
