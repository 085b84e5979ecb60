"""Run records: metrics CSV, genotype JSON, α snapshots and the α report."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .space.genotype import Genotype, _softmax_rows, alpha_std_total, discretize, edge_std, skip_fraction
from .space.operations import SPACES

SCHEMA_VERSION = 1
METRIC_COLUMNS = ("schema_version", "epoch", "l_cls", "l_mse", "lambda", "skip_fraction",
                  "alpha_std_total", "val_acc", "wall_clock_s")
STEP_COLUMNS = ("epoch", "iteration", "phase", "split", "l_cls", "l_mse", "lambda", "total",
                "epsilon_guard_triggered")
REFERENCE_STD = {"mim": 0.70, "darts": 2.19}


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


@dataclass
class RunRecord:
    """Everything a search run leaves behind.

    ``alpha_snapshots`` maps epoch -> (normal, reduce); epoch 0 is the
    initial α.  ``status`` is ``"completed"`` or ``"aborted: <reason>"``.
    """

    config: dict
    metrics: List[dict] = field(default_factory=list)
    steps: List[dict] = field(default_factory=list)
    alpha_snapshots: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    genotype: Optional[Genotype] = None
    status: str = "completed"

    @property
    def aborted(self) -> bool:
        return self.status != "completed"

    def add_metrics(self, row: dict) -> None:
        if self.metrics and row["epoch"] <= self.metrics[-1]["epoch"]:
            raise ValueError("metric rows must be strictly increasing in epoch")
        self.metrics.append({"schema_version": SCHEMA_VERSION, **row})

    # -- serialization ------------------------------------------------------

    def metrics_csv(self, wall_clock: bool = True) -> str:
        cols = METRIC_COLUMNS if wall_clock else METRIC_COLUMNS[:-1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in self.metrics:
            w.writerow([_fmt(row[c]) for c in cols])
        return buf.getvalue()

    def steps_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(STEP_COLUMNS)
        for row in self.steps:
            w.writerow([_fmt(row[c]) for c in STEP_COLUMNS])
        return buf.getvalue()

    def save(self, run_dir) -> Path:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "metrics.csv").write_text(self.metrics_csv())
        (run_dir / "steps.csv").write_text(self.steps_csv())
        if self.genotype is not None:
            (run_dir / "genotype.json").write_text(self.genotype.to_json() + "\n")
        save_snapshots(run_dir / "alpha_snapshots.npz", self.alpha_snapshots)
        meta = {"schema_version": SCHEMA_VERSION, "status": self.status, "config": self.config}
        (run_dir / "record.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return run_dir

    @classmethod
    def load(cls, run_dir) -> "RunRecord":
        run_dir = Path(run_dir)
        meta = json.loads((run_dir / "record.json").read_text())
        rec = cls(config=meta["config"], status=meta["status"])
        rec.metrics = read_metrics(run_dir / "metrics.csv")
        snap = run_dir / "alpha_snapshots.npz"
        if snap.exists():
            rec.alpha_snapshots = load_snapshots(snap)
        gpath = run_dir / "genotype.json"
        if gpath.exists():
            rec.genotype = Genotype.from_json(gpath.read_text())
        return rec


def read_metrics(path) -> List[dict]:
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row = {}
            for k, v in raw.items():
                row[k] = int(v) if k in ("schema_version", "epoch") else float(v)
            rows.append(row)
    return rows


def save_snapshots(path, snapshots: Dict[int, Tuple[np.ndarray, np.ndarray]]) -> None:
    arrays = {}
    for epoch, (normal, reduce) in snapshots.items():
        arrays[f"normal_{epoch:04d}"] = normal
        arrays[f"reduce_{epoch:04d}"] = reduce
    np.savez(path, **arrays)


def load_snapshots(path) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    with np.load(path) as z:
        epochs = sorted({int(k.split("_")[1]) for k in z.files})
        return {e: (z[f"normal_{e:04d}"], z[f"reduce_{e:04d}"]) for e in epochs}


def recompute_diagnostics(snapshot, space: str, steps: int) -> Tuple[float, float]:
    """(skip_fraction, alpha_std_total) from a stored α pair, normal cell."""
    g = discretize(snapshot, space, steps)
    return skip_fraction(g), alpha_std_total(snapshot)


def alpha_report(snapshot, space: str, cell: str = "normal", epoch: int | None = None) -> str:
    """Per-edge softmaxed α table with per-edge std and the total, as CSV."""
    normal, reduce = snapshot
    a = normal if cell == "normal" else reduce
    probs = _softmax_rows(a)
    stds = edge_std(a)
    buf = io.StringIO()
    buf.write(f"# alpha report: {cell} cell" + (f", epoch {epoch}" if epoch is not None else "") + "\n")
    buf.write(f"# reference context only: total std {REFERENCE_STD['mim']:.2f} with masked image modeling"
              f" vs {REFERENCE_STD['darts']:.2f} for plain classification search (not asserted)\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["edge", *SPACES[space], "std"])
    for i, (row, s) in enumerate(zip(probs, stds)):
        w.writerow([i, *(repr(float(p)) for p in row), repr(float(s))])
    w.writerow(["total", *([""] * probs.shape[1]), repr(float(stds.sum()))])
    return buf.getvalue()
