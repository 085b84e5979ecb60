"""Cell search spaces, the weight-sharing supernet, and discretization."""

from .genotype import (
    Genotype,
    alpha_std_total,
    darts_edges,
    discretize,
    edge_list,
    edge_std,
    nb201_edges,
    num_edges,
    random_genotype,
    skip_fraction,
    uniform_genotype,
)
from .operations import DARTS_OPS, NB201_OPS, SPACES, MixedOp, build_op, mixed_op_forward
from .supernet import Alpha, ConfigurationError, DiscreteNetwork, Supernet, reduction_positions

__all__ = [name for name in dir() if not name.startswith("_")]
