"""Weight-sharing supernet, architecture weights, and derived discrete networks."""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np

from .. import autodiff as ad
from ..nn import BatchNorm2d, Conv2d, Module, Sequential
from .genotype import Genotype, discretize, edge_list
from .operations import SPACES, FactorizedReduce, MixedOp, ReLUConvBN, Zero, build_op


class ConfigurationError(ValueError):
    """Raised when a network cannot be built for the requested geometry."""


class Alpha:
    """Architecture weights: one [edges x ops] matrix per cell type."""

    def __init__(self, normal: np.ndarray, reduce: np.ndarray):
        self.normal = ad.parameter(normal, name="alpha_normal")
        self.reduce = ad.parameter(reduce, name="alpha_reduce")

    @classmethod
    def initial(cls, space: str, steps: int, rng: np.random.Generator, noise: float = 1e-3) -> "Alpha":
        shape = (len(edge_list(space, steps)), len(SPACES[space]))
        return cls(noise * rng.standard_normal(shape), noise * rng.standard_normal(shape))

    def tensors(self) -> List[ad.Tensor]:
        return [self.normal, self.reduce]

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.normal.data.copy(), self.reduce.data.copy()

    def load(self, normal: np.ndarray, reduce: np.ndarray) -> None:
        self.normal.data = np.array(normal, dtype=ad.DTYPE)
        self.reduce.data = np.array(reduce, dtype=ad.DTYPE)

    def for_cell(self, reduction: bool) -> ad.Tensor:
        return self.reduce if reduction else self.normal


def reduction_positions(layers: int) -> Tuple[int, ...]:
    return tuple(sorted({layers // 3, 2 * layers // 3}))


class _Stem(Module):
    def __init__(self, cin, cout, rng):
        self.conv = Conv2d(cin, cout, 3, padding=1, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return self.bn(self.conv(x))


# ---------------------------------------------------------------------------
# cells
# ---------------------------------------------------------------------------

class DartsCell(Module):
    """Two-input cell; ``edges[e]`` is a MixedOp (search) or a chosen op."""

    def __init__(self, c_pp, c_p, c, reduction, reduction_prev, rng, affine):
        self.reduction = reduction
        if reduction_prev:
            self.preprocess0 = FactorizedReduce(c_pp, c, affine=affine, rng=rng)
        else:
            self.preprocess0 = ReLUConvBN(c_pp, c, 1, 1, 0, affine=affine, rng=rng)
        self.preprocess1 = ReLUConvBN(c_p, c, 1, 1, 0, affine=affine, rng=rng)


class DartsSearchCell(DartsCell):
    def __init__(self, op_names, steps, c_pp, c_p, c, reduction, reduction_prev, rng):
        super().__init__(c_pp, c_p, c, reduction, reduction_prev, rng, affine=False)
        self.steps = steps
        self.edges = [
            MixedOp(op_names, c, 2 if reduction and src < 2 else 1, rng)
            for src, _ in edge_list("darts", steps)
        ]

    def forward(self, s0, s1, weights):
        states = [self.preprocess0(s0), self.preprocess1(s1)]
        e = 0
        for _ in range(self.steps):
            acc = None
            for h in states:
                out = self.edges[e](h, weights[e])
                acc = out if acc is None else acc + out
                e += 1
            states.append(acc)
        return ad.concat(states[2:], axis=1)


class DartsDiscreteCell(DartsCell):
    def __init__(self, node_edges, c_pp, c_p, c, reduction, reduction_prev, rng, ops=None):
        super().__init__(c_pp, c_p, c, reduction, reduction_prev, rng, affine=True)
        self.sources = [[src for _, src in node] for node in node_edges]
        if ops is None:
            ops = [
                [build_op(op, c, 2 if reduction and src < 2 else 1, True, rng) for op, src in node]
                for node in node_edges
            ]
        self.ops = [op for node in ops for op in node]
        self._widths = [len(node) for node in ops]

    def forward(self, s0, s1):
        states = [self.preprocess0(s0), self.preprocess1(s1)]
        k = 0
        for sources in self.sources:
            acc = None
            for src in sources:
                out = self.ops[k](states[src])
                k += 1
                if out is None:
                    continue
                acc = out if acc is None else acc + out
            if acc is None:
                acc = Zero(2 if self.reduction else 1).dense(states[1])
            states.append(acc)
        return ad.concat(states[2:], axis=1)


class Nb201SearchCell(Module):
    """Single-input cell with ``nodes`` computed nodes; the last node is the output."""

    def __init__(self, op_names, nodes, c_in, c, reduction, rng):
        self.reduction = reduction
        self.nodes = nodes
        self.preprocess = ReLUConvBN(c_in, c, 1, 1, 0, affine=False, rng=rng)
        self.edges = [
            MixedOp(op_names, c, 2 if reduction and src == 0 else 1, rng)
            for src, _ in edge_list("nb201", nodes)
        ]

    def forward(self, s0, s1, weights):
        states = [self.preprocess(s1)]
        e = 0
        for j in range(1, self.nodes + 1):
            acc = None
            for h in states:
                out = self.edges[e](h, weights[e])
                acc = out if acc is None else acc + out
                e += 1
            states.append(acc)
        return states[-1]


class Nb201DiscreteCell(Module):
    def __init__(self, node_edges, c_in, c, reduction, rng, ops=None, preprocess=None):
        self.reduction = reduction
        self.preprocess = preprocess or ReLUConvBN(c_in, c, 1, 1, 0, affine=True, rng=rng)
        self.sources = [[src for _, src in node] for node in node_edges]
        if ops is None:
            ops = [
                [build_op(op, c, 2 if reduction and src == 0 else 1, True, rng) for op, src in node]
                for node in node_edges
            ]
        self.ops = [op for node in ops for op in node]

    def forward(self, s0, s1):
        states = [self.preprocess(s1)]
        k = 0
        for sources in self.sources:
            acc = None
            for src in sources:
                out = self.ops[k](states[src])
                k += 1
                if out is None:
                    continue
                acc = out if acc is None else acc + out
            if acc is None:
                stride = 2 if self.reduction else 1
                acc = Zero(stride).dense(states[0])
            states.append(acc)
        return states[-1]


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class _Encoder(Module):
    """Stem followed by ``layers`` cells; two stride-2 cells give a /4 output."""

    def _plan(self, space, channels, layers, steps, stem_multiplier, in_channels, image_size, rng):
        h, w = image_size
        if h % 4 or w % 4:
            raise ConfigurationError(f"image size {image_size} must be divisible by 4")
        if layers < 2:
            raise ConfigurationError("at least 2 cells are needed for two reductions")
        reductions = reduction_positions(layers)
        if len(reductions) != 2:
            raise ConfigurationError(f"{layers} cells do not give two distinct reduction positions")
        self.space = space
        self.steps = steps
        self.layers = layers
        self.reductions = reductions
        self.image_size = (h, w)
        c_stem = stem_multiplier * channels
        self.stem = _Stem(in_channels, c_stem, rng)
        plan = []
        multiplier = steps if space == "darts" else 1
        c_pp, c_p, c_curr = c_stem, c_stem, channels
        reduction_prev = False
        for i in range(layers):
            reduction = i in reductions
            if reduction:
                c_curr *= 2
            plan.append((c_pp, c_p, c_curr, reduction, reduction_prev))
            c_pp, c_p = c_p, multiplier * c_curr
            reduction_prev = reduction
        self.out_channels = c_p
        return plan

    def output_shape(self, batch: int) -> Tuple[int, int, int, int]:
        h, w = self.image_size
        return (batch, self.out_channels, h // 4, w // 4)

    def _check_input(self, x):
        if tuple(x.shape[2:]) != self.image_size:
            raise ad.DimensionError(f"expected spatial size {self.image_size}, got {tuple(x.shape[2:])}")


class Supernet(_Encoder):
    """Encoder whose every edge mixes all candidate operations."""

    def __init__(self, space: str = "darts", channels: int = 16, layers: int = 3, steps: int = 4,
                 stem_multiplier: int = 3, in_channels: int = 3, image_size=(32, 32), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if space not in SPACES:
            raise ConfigurationError(f"unknown search space {space!r}")
        if space == "nb201" and steps != 3:
            raise ConfigurationError("the nb201 cell has exactly 3 computed nodes")
        self.op_names = tuple(SPACES[space])
        plan = self._plan(space, channels, layers, steps, stem_multiplier, in_channels, image_size, rng)
        cells = []
        for c_pp, c_p, c, reduction, reduction_prev in plan:
            if space == "darts":
                cells.append(DartsSearchCell(self.op_names, steps, c_pp, c_p, c, reduction, reduction_prev, rng))
            else:
                cells.append(Nb201SearchCell(self.op_names, steps, c_p, c, reduction, rng))
        self.cells = cells

    def forward(self, x, alpha: Alpha):
        self._check_input(x)
        w_normal = ad.softmax(alpha.normal, axis=-1)
        w_reduce = ad.softmax(alpha.reduce, axis=-1)
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1, w_reduce if cell.reduction else w_normal)
        return s1

    def derive(self, genotype: Genotype) -> "DiscreteNetwork":
        """Discrete network that shares this supernet's stem, preprocessing and op weights."""
        return DiscreteNetwork._from_supernet(self, genotype)

    def discretize(self, alpha: Alpha) -> Genotype:
        return discretize(alpha, self.space, self.steps)


class DiscreteNetwork(_Encoder):
    """Encoder built from a genotype, one operation per retained edge."""

    def __init__(self, genotype: Genotype, channels: int = 16, layers: int = 3,
                 stem_multiplier: int = 3, in_channels: int = 3, image_size=(32, 32), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        genotype.validate()
        self.genotype = genotype
        plan = self._plan(genotype.space, channels, layers, genotype.steps, stem_multiplier,
                          in_channels, image_size, rng)
        cells = []
        for c_pp, c_p, c, reduction, reduction_prev in plan:
            nodes = genotype.reduce if reduction else genotype.normal
            if genotype.space == "darts":
                cells.append(DartsDiscreteCell(nodes, c_pp, c_p, c, reduction, reduction_prev, rng))
            else:
                cells.append(Nb201DiscreteCell(nodes, c_p, c, reduction, rng))
        self.cells = cells

    @classmethod
    def _from_supernet(cls, net: Supernet, genotype: Genotype) -> "DiscreteNetwork":
        genotype.validate()
        self = cls.__new__(cls)
        self.genotype = genotype
        self.space, self.steps, self.layers = net.space, net.steps, net.layers
        self.reductions, self.image_size, self.out_channels = net.reductions, net.image_size, net.out_channels
        self.stem = net.stem
        edges = edge_list(net.space, net.steps)
        cells = []
        for cell in net.cells:
            nodes = genotype.reduce if cell.reduction else genotype.normal
            chosen = []
            for j, node in enumerate(nodes):
                dst = j + (2 if net.space == "darts" else 1)
                row = []
                for op, src in node:
                    e = edges.index((src, dst))
                    row.append(cell.edges[e].ops[net.op_names.index(op)])
                chosen.append(row)
            if net.space == "darts":
                d = DartsDiscreteCell.__new__(DartsDiscreteCell)
                d.reduction = cell.reduction
                d.preprocess0, d.preprocess1 = cell.preprocess0, cell.preprocess1
                d.sources = [[src for _, src in node] for node in nodes]
                d.ops = [op for row in chosen for op in row]
                d._widths = [len(r) for r in chosen]
            else:
                d = Nb201DiscreteCell(nodes, None, None, cell.reduction, None, ops=chosen,
                                      preprocess=cell.preprocess)
            cells.append(d)
        self.cells = cells
        return self

    def forward(self, x):
        self._check_input(x)
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1)
        return s1
