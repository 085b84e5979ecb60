"""Patch-size x mask-ratio grids: one search per cell and seed, then mean/std rows."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Sequence

import numpy as np

from .search import SearchConfig, run_search

log = logging.getLogger(__name__)

RUN_COLUMNS = ("patch", "ratio", "seed", "status", "val_acc", "skip_fraction", "run_dir")
AGG_COLUMNS = ("patch", "ratio", "runs", "failed", "val_acc_mean", "val_acc_std",
               "skip_fraction_mean", "skip_fraction_std")


def run_grid(base: SearchConfig, patches: Sequence[int], ratios: Sequence[float], seeds: Sequence[int],
             root, runner: Callable = run_search) -> List[dict]:
    """Run every grid point; a failing point is recorded and the grid continues."""
    root = Path(root)
    rows = []
    for p in patches:
        for r in ratios:
            for s in seeds:
                run_dir = root / f"p{p}_r{r:g}_s{s}"
                row = {"patch": p, "ratio": r, "seed": s, "run_dir": str(run_dir),
                       "val_acc": float("nan"), "skip_fraction": float("nan")}
                try:
                    rec = runner(replace(base, patch=p, mask_ratio=r, seed=s), run_dir=run_dir)
                    last = rec.metrics[-1] if rec.metrics else {}
                    row.update(status=rec.status, val_acc=float(last.get("val_acc", float("nan"))),
                               skip_fraction=float(last.get("skip_fraction", float("nan"))))
                except Exception as exc:  # a broken cell must not stop the grid
                    log.error("grid point p=%s r=%s s=%s failed: %s", p, r, s, exc)
                    row["status"] = f"failed: {exc}"
                rows.append(row)
    return rows


def _stats(values: List[float]):
    vals = [v for v in values if not math.isnan(v)]
    if not vals:
        return float("nan"), float("nan")
    arr = np.asarray(vals, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def aggregate(rows: Sequence[dict]) -> List[dict]:
    """One row per (patch, ratio): mean and sample std over the completed seeds."""
    groups: Dict[tuple, List[dict]] = {}
    for row in rows:
        groups.setdefault((int(row["patch"]), float(row["ratio"])), []).append(row)
    out = []
    for (p, r), members in groups.items():
        ok = [m for m in members if m["status"] == "completed"]
        acc_m, acc_s = _stats([float(m["val_acc"]) for m in ok])
        skip_m, skip_s = _stats([float(m["skip_fraction"]) for m in ok])
        out.append({"patch": p, "ratio": r, "runs": len(members), "failed": len(members) - len(ok),
                    "val_acc_mean": acc_m, "val_acc_std": acc_s,
                    "skip_fraction_mean": skip_m, "skip_fraction_std": skip_s})
    return out


def to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def read_runs(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
