"""Discrete architectures and the diagnostics computed from architecture weights."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .operations import SPACES

Edge = Tuple[str, int]
CellGenotype = List[List[Edge]]


def darts_edges(steps: int) -> List[Tuple[int, int]]:
    """(source, target) node pairs in α row order; nodes 0,1 are cell inputs."""
    return [(src, 2 + i) for i in range(steps) for src in range(2 + i)]


def nb201_edges(nodes: int = 3) -> List[Tuple[int, int]]:
    """(source, target) pairs for the single-input cell; node 0 is the input."""
    return [(src, j) for j in range(1, nodes + 1) for src in range(j)]


def edge_list(space: str, steps: int) -> List[Tuple[int, int]]:
    return darts_edges(steps) if space == "darts" else nb201_edges(steps)


def num_edges(space: str, steps: int) -> int:
    return len(edge_list(space, steps))


@dataclass
class Genotype:
    """Chosen operation per retained edge, grouped by target node.

    ``normal[j]`` lists ``(op, from_node)`` pairs feeding intermediate node
    ``j`` in ascending source order.
    """

    space: str
    normal: CellGenotype
    reduce: CellGenotype

    def cells(self) -> Dict[str, CellGenotype]:
        return {"normal": self.normal, "reduce": self.reduce}

    def to_dict(self) -> dict:
        return {
            "space": self.space,
            "normal": [[[op, int(src)] for op, src in node] for node in self.normal],
            "reduce": [[[op, int(src)] for op, src in node] for node in self.reduce],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=None, separators=(",", ":"))

    @classmethod
    def from_dict(cls, doc: dict) -> "Genotype":
        if not isinstance(doc, dict) or list(doc) != ["space", "normal", "reduce"]:
            raise ValueError("genotype document must have keys space, normal, reduce in that order")
        space = doc["space"]
        if space not in SPACES:
            raise ValueError(f"unknown search space {space!r}")
        ops = SPACES[space]
        cells = []
        for key in ("normal", "reduce"):
            nodes = []
            for node in doc[key]:
                edges = []
                for item in node:
                    if len(item) != 2 or item[0] not in ops or not isinstance(item[1], int):
                        raise ValueError(f"malformed edge {item!r} in {key} cell")
                    edges.append((item[0], item[1]))
                nodes.append(edges)
            cells.append(nodes)
        geno = cls(space, cells[0], cells[1])
        geno.validate()
        return geno

    @classmethod
    def from_json(cls, text: str) -> "Genotype":
        return cls.from_dict(json.loads(text))

    def validate(self) -> None:
        for key, cell in self.cells().items():
            for j, node in enumerate(cell):
                first = 2 + j if self.space == "darts" else 1 + j
                for op, src in node:
                    if not 0 <= src < first:
                        raise ValueError(f"{key} node {j} has invalid source {src}")
                if self.space == "darts":
                    if len(node) != 2:
                        raise ValueError(f"{key} node {j} must keep exactly 2 edges")
                    if any(op == "none" for op, _ in node):
                        raise ValueError("'none' cannot be selected in the darts space")

    @property
    def steps(self) -> int:
        return len(self.normal)


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def discretize_cell(alpha: np.ndarray, space: str, steps: int) -> CellGenotype:
    ops = SPACES[space]
    weights = _softmax_rows(alpha)
    edges = edge_list(space, steps)
    if weights.shape != (len(edges), len(ops)):
        raise ValueError(f"alpha shape {weights.shape} does not match {len(edges)} edges x {len(ops)} ops")
    nodes: CellGenotype = []
    if space == "nb201":
        for j in range(1, steps + 1):
            node = []
            for e, (src, dst) in enumerate(edges):
                if dst == j:
                    node.append((ops[int(np.argmax(weights[e]))], src))
            nodes.append(node)
        return nodes
    none_idx = ops.index("none")
    candidates = [k for k in range(len(ops)) if k != none_idx]
    for j in range(2, steps + 2):
        scored = []
        for e, (src, dst) in enumerate(edges):
            if dst != j:
                continue
            row = weights[e, candidates]
            best = int(np.argmax(row))  # first maximum = lowest op index
            scored.append((-row[best], src, ops[candidates[best]]))
        scored.sort(key=lambda t: (t[0], t[1]))
        kept = sorted(scored[:2], key=lambda t: t[1])
        nodes.append([(op, src) for _, src, op in kept])
    return nodes


def discretize(alpha, space: str, steps: int) -> Genotype:
    """Genotype from architecture weights (an ``Alpha`` or a normal/reduce pair)."""
    normal, reduce = _alpha_arrays(alpha)
    return Genotype(space, discretize_cell(normal, space, steps), discretize_cell(reduce, space, steps))


def _alpha_arrays(alpha) -> Tuple[np.ndarray, np.ndarray]:
    if hasattr(alpha, "arrays"):
        return alpha.arrays()
    if isinstance(alpha, dict):
        return np.asarray(alpha["normal"]), np.asarray(alpha["reduce"])
    normal, reduce = alpha
    return np.asarray(normal), np.asarray(reduce)


def skip_fraction(g: Genotype, cells: Sequence[str] = ("normal",)) -> float:
    """Share of chosen operations equal to ``skip_connect``."""
    chosen = [op for key in cells for node in g.cells()[key] for op, _ in node]
    if not chosen:
        return 0.0
    return sum(op == "skip_connect" for op in chosen) / len(chosen)


def edge_std(alpha_cell: np.ndarray) -> np.ndarray:
    """Population standard deviation of each softmaxed α row."""
    return _softmax_rows(alpha_cell).std(axis=-1)


def alpha_std_total(alpha, cells: Sequence[str] = ("normal",)) -> float:
    """Sum over edges of the std of the softmaxed α row (flat α ⇒ small total)."""
    normal, reduce = _alpha_arrays(alpha)
    table = {"normal": normal, "reduce": reduce}
    return float(sum(edge_std(table[c]).sum() for c in cells))


def uniform_genotype(space: str, steps: int, op: str = "skip_connect") -> Genotype:
    """Every retained edge uses ``op``; darts nodes keep their two nearest predecessors."""
    if op not in SPACES[space]:
        raise ValueError(f"{op!r} is not an operation of the {space} space")
    if space == "darts":
        cell = [[(op, j), (op, j + 1)] for j in range(steps)]
    else:
        cell = [[(op, src) for src in range(j)] for j in range(1, steps + 1)]
    return Genotype(space, [list(n) for n in cell], [list(n) for n in cell])


def random_genotype(space: str, steps: int, rng: np.random.Generator) -> Genotype:
    """Uniform draw over valid genotypes: two distinct inputs per darts node, any op per nb201 edge."""
    ops = SPACES[space]
    cells = []
    for _ in range(2):
        nodes = []
        for j in range(steps):
            if space == "darts":
                srcs = sorted(int(s) for s in rng.choice(2 + j, size=2, replace=False))
                nodes.append([(ops[int(rng.integers(1, len(ops)))], s) for s in srcs])
            else:
                nodes.append([(ops[int(rng.integers(len(ops)))], s) for s in range(j + 1)])
        cells.append(nodes)
    return Genotype(space, cells[0], cells[1])
