"""Alternating bi-level architecture search with optional masked image modeling.

Each iteration takes one architecture step on a validation batch and then
one weight step on a training batch.  The architecture gradient is either
first order (current weights) or second order (one virtual weight step,
with the mixed second derivative replaced by a finite-difference
Hessian-vector product).
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch, BatchStream, DataConfig, Splits, load_dataset
from .heads import ClassifierHead, ReconstructionDecoder
from .losses import JointLossReport, NonFiniteLossError, cross_entropy, joint_loss, masked_mse
from .masking import PatchGeometry
from .nn import Module, set_requires_grad
from .optim import SGD, Adam, clip_grad_norm, cosine_lr
from .records import RunRecord, load_snapshots, save_snapshots
from .space.genotype import alpha_std_total, skip_fraction
from .space.supernet import Alpha, Supernet

log = logging.getLogger(__name__)

TASKS = ("cls", "mim", "cls+mim")
INPUTS = ("clean", "masked")


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists ``field: message`` strings."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class SearchConfig(DataConfig):
    space: str = "darts"
    channels: int = 16
    layers: int = 3
    steps: int = 4
    stem_multiplier: int = 3
    epochs: int = 50
    batch_size: int = 64
    w_lr: float = 0.025
    w_lr_min: float = 0.001
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    alpha_lr: float = 3e-4
    alpha_beta1: float = 0.5
    alpha_beta2: float = 0.999
    alpha_weight_decay: float = 1e-3
    grad_clip: float = 5.0
    order: str = "first"
    xi: float = -1.0  # negative: follow the current weight learning rate
    patch: int = 8
    mask_ratio: float = 0.6
    lambda_mode: str = "adaptive"
    fixed_lambda: float = 1.0
    mse_reduction: str = "mean"
    task: str = "cls+mim"
    input: str = "masked"
    mim_on_val: bool = True
    augment: bool = True
    decoder_width: int = 128
    snapshot_every: int = 1
    seed: int = 0

    @property
    def use_cls(self) -> bool:
        return "cls" in self.task.split("+")

    @property
    def use_mim(self) -> bool:
        return "mim" in self.task.split("+")

    @property
    def num_patches(self) -> int:
        return PatchGeometry(self.patch, self.image_size, self.image_size, 3).num_patches

    @property
    def effective_ratio(self) -> float:
        """Mask ratio, raised to one patch when the reconstruction loss needs masked pixels."""
        if self.use_mim and self.input == "masked":
            return max(self.mask_ratio, 1.0 / self.num_patches)
        return self.mask_ratio

    def validate(self) -> "SearchConfig":
        errs = self.data_errors()
        if self.space not in ("darts", "nb201"):
            errs.append(f"space: unknown search space {self.space!r}")
        if self.space == "nb201" and self.steps != 3:
            errs.append("steps: the nb201 cell has exactly 3 nodes")
        if self.task not in TASKS:
            errs.append(f"task: expected one of {TASKS}, got {self.task!r}")
        if self.input not in INPUTS:
            errs.append(f"input: expected one of {INPUTS}, got {self.input!r}")
        if self.order not in ("first", "second"):
            errs.append(f"order: expected first or second, got {self.order!r}")
        if self.order == "second" and self.xi == 0:
            errs.append("xi: second order needs xi > 0 (xi = 0 is the first-order gradient)")
        if self.lambda_mode not in ("adaptive", "fixed"):
            errs.append(f"lambda_mode: expected adaptive or fixed, got {self.lambda_mode!r}")
        if self.mse_reduction not in ("mean", "sum", "norm"):
            errs.append(f"mse_reduction: expected mean, sum or norm, got {self.mse_reduction!r}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            errs.append("mask_ratio: must lie in [0, 1]")
        if self.patch < 1 or self.image_size % self.patch:
            errs.append(f"patch: {self.patch} does not tile a {self.image_size}px image")
        if self.task == "mim" and not self.mim_on_val:
            errs.append("mim_on_val: a reconstruction-only search has no other validation loss")
        for name in ("epochs", "snapshot_every"):
            if getattr(self, name) < (0 if name == "epochs" else 1):
                errs.append(f"{name}: out of range")
        for name in ("channels", "layers", "steps", "batch_size", "decoder_width", "stem_multiplier"):
            if getattr(self, name) < 1:
                errs.append(f"{name}: must be positive")
        if self.w_lr < 0 or self.alpha_lr < 0:
            errs.append("w_lr/alpha_lr: learning rates must be non-negative")
        if errs:
            raise ConfigError(errs)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError([f"{k}: unknown field" for k in unknown])
        return cls(**d)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class SearchModel(Module):
    """Supernet encoder with whichever task heads the configuration enables."""

    def __init__(self, cfg: SearchConfig, lo, hi, rng: np.random.Generator):
        size = (cfg.image_size, cfg.image_size)
        self.encoder = Supernet(cfg.space, cfg.channels, cfg.layers, cfg.steps, cfg.stem_multiplier,
                                image_size=size, rng=rng)
        c = self.encoder.out_channels
        self.classifier = ClassifierHead(c, cfg.num_classes, rng=rng) if cfg.use_cls else None
        self.decoder = (ReconstructionDecoder(c, (3, *size), lo, hi, width=cfg.decoder_width, rng=rng)
                        if cfg.use_mim else None)


@dataclass
class StepReport:
    loss: JointLossReport
    correct: int = 0
    count: int = 0


def task_loss(model: SearchModel, alpha: Alpha, batch: Batch, cfg: SearchConfig,
              use_mim: bool = True) -> Tuple[Tensor, StepReport]:
    """Joint loss of one batch.

    ``use_mim=False`` (validation with reconstruction disabled) drops the
    reconstruction term and feeds the clean image.
    """
    mim = use_mim and model.decoder is not None
    x_in = batch.x_input if cfg.input == "masked" and use_mim else batch.x
    feats = model.encoder(ad.as_tensor(x_in), alpha)
    l_cls = l_mse = None
    guard = False
    correct = 0
    if model.classifier is not None:
        logits = model.classifier(feats)
        l_cls = cross_entropy(logits, batch.labels)
        correct = int((logits.data.argmax(axis=1) == batch.labels).sum())
    if mim:
        rec = model.decoder(feats)
        l_mse, guard = masked_mse(rec, batch.x, batch.pixel_mask, cfg.mse_reduction)
    total, report = joint_loss(l_cls, l_mse, cfg.lambda_mode, cfg.fixed_lambda, guard)
    return total, StepReport(report, correct, len(batch.labels))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def gradients(loss_fn: Callable[[], Tensor], wrt: Sequence[Tensor]) -> Tuple[List[np.ndarray], Tensor]:
    """Gradients of ``loss_fn()`` with respect to ``wrt`` (zeros where unused)."""
    for t in wrt:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]
    for t in wrt:
        t.grad = None
    return grads, loss


def unrolled_alpha_grad(train_loss: Callable[[], Tensor], val_loss: Callable[[], Tensor],
                        weights: Sequence[Tensor], alphas: Sequence[Tensor], xi: float,
                        eps_scale: float = 0.01, eps_fallback: float = 1e-3) -> List[np.ndarray]:
    """One-step-forward architecture gradient.

    With ``w' = w - xi * dL_train/dw`` the result is
    ``dL_val(w', a)/da - xi * H v``, where ``v = dL_val(w', a)/dw'`` and
    ``H v`` (the mixed a-w derivative of L_train at ``w`` applied to ``v``)
    is a central difference of ``dL_train/da`` at ``w +- eps * v`` with
    ``eps = eps_scale / |v|``.  The weights are restored on return.
    """
    saved = [w.data for w in weights]
    try:
        set_requires_grad(alphas, False)
        set_requires_grad(weights, True)
        g_train, _ = gradients(train_loss, weights)
        for w, g in zip(weights, g_train):
            w.data = (w.data - xi * g).astype(w.data.dtype)

        set_requires_grad(alphas, True)
        grads, _ = gradients(val_loss, list(alphas) + list(weights))
        d_alpha, v = grads[: len(alphas)], grads[len(alphas):]

        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in v))
        eps = eps_scale / norm if norm > 0 else eps_fallback
        set_requires_grad(weights, False)
        sides = []
        for sign in (1.0, -1.0):
            for w, w0, g in zip(weights, saved, v):
                w.data = (w0 + sign * eps * g).astype(w0.dtype)
            sides.append(gradients(train_loss, alphas)[0])
        hvp = [(p - m) / (2 * eps) for p, m in zip(*sides)]
        return [(da - xi * h).astype(da.dtype) for da, h in zip(d_alpha, hvp)]
    finally:
        for w, w0 in zip(weights, saved):
            w.data = w0
        set_requires_grad(weights, True)
        set_requires_grad(alphas, True)


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------

def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


class SearchState:
    """Model, architecture weights, optimizers and data streams of one search."""

    def __init__(self, cfg: SearchConfig, splits: Splits):
        self.cfg = cfg.validate()
        self.epoch = 0
        lo, hi = splits.search_train.lo, splits.search_train.hi
        init = _rng(cfg.seed, 0)
        self.model = SearchModel(cfg, lo, hi, init)
        self.alpha = Alpha.initial(cfg.space, cfg.steps, init)
        self.weights = self.model.parameters()
        self.w_opt = SGD(self.weights, cfg.w_lr, cfg.w_momentum, cfg.w_weight_decay)
        self.a_opt = Adam(self.alpha.tensors(), cfg.alpha_lr, (cfg.alpha_beta1, cfg.alpha_beta2),
                          weight_decay=cfg.alpha_weight_decay)
        self.train_stream = BatchStream("search_train", splits.search_train, cfg.batch_size,
                                        _rng(cfg.seed, 1), augment=cfg.augment)
        self.val_stream = BatchStream("search_val", splits.search_val, cfg.batch_size,
                                      _rng(cfg.seed, 2), augment=False)
        self.model.train()

    # -- batches -------------------------------------------------------------

    def _epoch_batches(self, stream: BatchStream):
        cfg = self.cfg
        masked = cfg.input == "masked"
        target = "masked" if masked else "all"
        return stream.epoch((cfg.patch, cfg.effective_ratio) if masked else None, mim_target=target)

    # -- steps ---------------------------------------------------------------

    @property
    def xi(self) -> float:
        return self.cfg.xi if self.cfg.xi >= 0 else self.w_opt.lr

    def w_step(self, batch: Batch) -> StepReport:
        """One SGD update of every weight on a training batch; α is frozen."""
        if batch.split != "search_train":
            raise ad.ContractError(f"weight step fed a {batch.split} batch")
        set_requires_grad(self.alpha.tensors(), False)
        try:
            self.w_opt.zero_grad()
            loss, rep = task_loss(self.model, self.alpha, batch, self.cfg)
            loss.backward()
            clip_grad_norm(self.weights, self.cfg.grad_clip)
            self.w_opt.step()
            self.w_opt.zero_grad()
        finally:
            set_requires_grad(self.alpha.tensors(), True)
        return rep

    def _val_loss(self, batch: Batch):
        return task_loss(self.model, self.alpha, batch, self.cfg, use_mim=self.cfg.mim_on_val)

    def alpha_step_first_order(self, batch_val: Batch) -> StepReport:
        """One Adam update of α from the validation loss at the current weights."""
        if batch_val.split != "search_val":
            raise ad.ContractError(f"architecture step fed a {batch_val.split} batch")
        set_requires_grad(self.weights, False)
        try:
            self.a_opt.zero_grad()
            loss, rep = self._val_loss(batch_val)
            loss.backward()
            self.a_opt.step()
            self.a_opt.zero_grad()
        finally:
            set_requires_grad(self.weights, True)
        return rep

    def alpha_step_second_order(self, batch_train: Batch, batch_val: Batch, xi: float | None = None) -> StepReport:
        """One Adam update of α from the one-step-forward gradient; weights end unchanged."""
        if batch_val.split != "search_val" or batch_train.split != "search_train":
            raise ad.ContractError("second-order step needs a search_train and a search_val batch")
        xi = self.xi if xi is None else xi
        reports = []

        def train_loss():
            return task_loss(self.model, self.alpha, batch_train, self.cfg)[0]

        def val_loss():
            loss, rep = self._val_loss(batch_val)
            reports.append(rep)
            return loss

        grads = unrolled_alpha_grad(train_loss, val_loss, self.weights, self.alpha.tensors(), xi)
        for t, g in zip(self.alpha.tensors(), grads):
            t.grad = g
        self.a_opt.step()
        self.a_opt.zero_grad()
        return reports[0]

    def alpha_step(self, batch_train: Batch, batch_val: Batch) -> StepReport:
        if self.cfg.order == "second":
            return self.alpha_step_second_order(batch_train, batch_val)
        return self.alpha_step_first_order(batch_val)

    def run_epoch(self, record: RunRecord | None = None) -> dict:
        """One pass over the shorter split: an α step then a w step per iteration."""
        cfg = self.cfg
        self.w_opt.lr = cosine_lr(cfg.w_lr, self.epoch, cfg.epochs, cfg.w_lr_min)
        sums = {"l_cls": 0.0, "l_mse": 0.0, "lambda": 0.0}
        n_steps = correct = seen = 0
        for it, (bt, bv) in enumerate(zip(self._epoch_batches(self.train_stream),
                                           self._epoch_batches(self.val_stream))):
            a_rep = self.alpha_step(bt, bv)
            w_rep = self.w_step(bt)
            correct += a_rep.correct
            seen += a_rep.count
            for k in sums:
                sums[k] += w_rep.loss.row()[k]
            n_steps += 1
            if record is not None:
                for phase, split_name, rep in (("alpha", "search_val", a_rep), ("w", "search_train", w_rep)):
                    record.steps.append({"epoch": self.epoch + 1, "iteration": it, "phase": phase,
                                         "split": split_name, **rep.loss.row()})
        self.epoch += 1
        g = self.model.encoder.discretize(self.alpha)
        row = {k: v / max(n_steps, 1) for k, v in sums.items()}
        row.update(epoch=self.epoch, skip_fraction=skip_fraction(g), alpha_std_total=alpha_std_total(self.alpha),
                   val_acc=correct / seen if cfg.use_cls and seen else float("nan"))
        return row

    # -- checkpoints ---------------------------------------------------------

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"model/{k}": v for k, v in self.model.state_dict().items()}
        normal, reduce = self.alpha.arrays()
        arrays["alpha/normal"], arrays["alpha/reduce"] = normal, reduce
        arrays.update({f"w_opt/{k}": v for k, v in self.w_opt.state_arrays().items()})
        arrays.update({f"a_opt/{k}": v for k, v in self.a_opt.state_arrays().items()})
        return arrays

    def save(self, path, record: RunRecord | None = None) -> None:
        """Write ``<path>.npz`` (arrays) and ``<path>.json`` (epoch, RNG states, config)."""
        path = Path(path)
        np.savez(path.with_suffix(".npz"), **self.state_arrays())
        meta = {
            "format": "masknas-checkpoint",
            "version": 1,
            "epoch": self.epoch,
            "config": self.cfg.to_dict(),
            "rng": {"train": self.train_stream.rng.bit_generator.state,
                    "val": self.val_stream.rng.bit_generator.state},
        }
        if record is not None:
            meta["metrics"] = record.metrics
            meta["n_steps"] = len(record.steps)
        path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True))

    def load(self, path) -> dict:
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        if meta.get("format") != "masknas-checkpoint" or meta.get("version") != 1:
            raise ValueError(f"{path}: not a version-1 checkpoint")
        with np.load(path.with_suffix(".npz")) as z:
            arrays = {k: z[k] for k in z.files}
        self.model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("model/")})
        self.alpha.load(arrays["alpha/normal"], arrays["alpha/reduce"])
        self.w_opt.load_state_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("w_opt/")})
        self.a_opt.load_state_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("a_opt/")})
        self.train_stream.rng.bit_generator.state = meta["rng"]["train"]
        self.val_stream.rng.bit_generator.state = meta["rng"]["val"]
        self.epoch = meta["epoch"]
        return meta

    def restore_arrays(self, arrays: Dict[str, np.ndarray], rng: dict, epoch: int) -> None:
        self.model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("model/")})
        self.alpha.load(arrays["alpha/normal"], arrays["alpha/reduce"])
        self.w_opt.load_state_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("w_opt/")})
        self.a_opt.load_state_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("a_opt/")})
        self.train_stream.rng.bit_generator.state = rng["train"]
        self.val_stream.rng.bit_generator.state = rng["val"]
        self.epoch = epoch


def _snapshot_due(cfg: SearchConfig, epoch: int) -> bool:
    return epoch % cfg.snapshot_every == 0 or epoch == cfg.epochs


def run_search(cfg: SearchConfig, run_dir=None, splits: Splits | None = None, resume: bool = False,
               stop_after: int | None = None) -> RunRecord:
    """Search for ``cfg.epochs`` epochs and return the run record.

    With ``run_dir`` set, a checkpoint is written after every epoch and the
    record is saved at the end; ``resume`` continues from that checkpoint.
    ``stop_after`` ends the loop early (at that epoch) without changing the
    learning-rate schedule, which is how an interrupted run is simulated.
    """
    cfg.validate()
    splits = splits if splits is not None else load_dataset(cfg)
    state = SearchState(cfg, splits)
    record = RunRecord(config=cfg.to_dict())
    ckpt = Path(run_dir) / "checkpoint" if run_dir is not None else None
    if resume:
        if ckpt is None or not ckpt.with_suffix(".json").exists():
            raise FileNotFoundError("no checkpoint to resume from")
        meta = state.load(ckpt)
        record.metrics = meta.get("metrics", [])
        if run_dir is not None and (Path(run_dir) / "alpha_snapshots.npz").exists():
            record.alpha_snapshots = {e: s for e, s in load_snapshots(Path(run_dir) / "alpha_snapshots.npz").items()
                                      if e <= state.epoch}
    else:
        record.alpha_snapshots[0] = state.alpha.arrays()

    last_good = (state.state_arrays(), {"train": state.train_stream.rng.bit_generator.state,
                                        "val": state.val_stream.rng.bit_generator.state}, state.epoch)
    started = time.perf_counter()
    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    while state.epoch < end:
        try:
            row = state.run_epoch(record)
        except (NonFiniteLossError, FloatingPointError) as exc:
            state.restore_arrays(*last_good)
            record.status = f"aborted: {exc} (epoch {state.epoch + 1}); restored epoch {state.epoch} state"
            log.error(record.status)
            break
        row["wall_clock_s"] = time.perf_counter() - started
        record.add_metrics(row)
        if _snapshot_due(cfg, state.epoch):
            record.alpha_snapshots[state.epoch] = state.alpha.arrays()
        last_good = (state.state_arrays(), {"train": state.train_stream.rng.bit_generator.state,
                                            "val": state.val_stream.rng.bit_generator.state}, state.epoch)
        if ckpt is not None:
            ckpt.parent.mkdir(parents=True, exist_ok=True)
            state.save(ckpt, record)
            save_snapshots(Path(run_dir) / "alpha_snapshots.npz", record.alpha_snapshots)
        log.info("epoch %d  l_cls %.4f  l_mse %.4f  skip %.3f  std %.4f", row["epoch"], row["l_cls"],
                 row["l_mse"], row["skip_fraction"], row["alpha_std_total"])
    record.genotype = state.model.encoder.discretize(state.alpha)
    record.state = state
    if run_dir is not None:
        record.save(run_dir)
    return record
