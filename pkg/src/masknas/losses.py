"""Classification, masked reconstruction, and the adaptively weighted joint loss."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

log = logging.getLogger(__name__)

LAMBDA_EPS = 1e-8


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss term is NaN or infinite."""


@dataclass
class JointLossReport:
    l_cls: float
    l_mse: float
    lambda_: float
    total: float
    epsilon_guard_triggered: bool

    def row(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_")
        return {k: d[k] for k in ("l_cls", "l_mse", "lambda", "total", "epsilon_guard_triggered")}


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ContractError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ContractError(f"labels must lie in [0, {k})")
    onehot = np.zeros((b, k), dtype=ad.DTYPE)
    onehot[np.arange(b), labels] = 1.0
    return -(ad.log_softmax(logits, axis=1) * onehot).sum() / float(b)


def masked_mse(x_rec: Tensor, x, m_pixel, reduction: str = "mean") -> Tuple[Tensor, bool]:
    """Squared reconstruction error restricted to masked pixels.

    ``reduction`` is ``"mean"`` (over masked elements), ``"sum"``, or
    ``"norm"`` (the L2 norm of the masked residual).  Returns the loss and
    whether the empty-mask guard fired (no masked pixels: loss is 0).
    """
    x = ad.as_tensor(x)
    m = np.asarray(m_pixel.data if isinstance(m_pixel, Tensor) else m_pixel, dtype=ad.DTYPE)
    if x_rec.shape != x.shape:
        raise ContractError(f"reconstruction {x_rec.shape} and target {x.shape} differ")
    m = np.broadcast_to(m, x.shape)
    count = float(m.sum())
    if count == 0:
        return ad.mul(x_rec, 0.0).sum(), True
    diff = (x_rec - x) * m
    sq = (diff * diff).sum()
    if reduction == "mean":
        return sq / max(1.0, count), False
    if reduction == "sum":
        return sq, False
    if reduction == "norm":
        return ad.sqrt(sq), False
    raise ValueError(f"unknown reduction {reduction!r}")


def joint_loss(
    l_cls: Optional[Tensor],
    l_mse: Optional[Tensor],
    mode: str = "adaptive",
    fixed_lambda: float = 1.0,
    guard: bool = False,
) -> Tuple[Tensor, JointLossReport]:
    """Combine the two task losses as ``l_cls + lambda * l_mse``.

    In ``adaptive`` mode lambda is the detached ratio ``l_cls / l_mse``, so it
    rescales the reconstruction gradient without being differentiated.  A
    missing task contributes nothing (single-task ablations).
    """
    if l_cls is None and l_mse is None:
        raise ContractError("at least one task loss is required")
    cls_v = float(l_cls.data) if l_cls is not None else 0.0
    mse_v = float(l_mse.data) if l_mse is not None else 0.0
    if not (math.isfinite(cls_v) and math.isfinite(mse_v)):
        raise NonFiniteLossError(f"non-finite loss: l_cls={cls_v}, l_mse={mse_v}")
    if l_mse is None:
        return l_cls, JointLossReport(cls_v, 0.0, 0.0, cls_v, guard)
    if l_cls is None:
        return l_mse, JointLossReport(0.0, mse_v, 1.0, mse_v, guard)
    if mode == "adaptive":
        denom = mse_v
        if denom <= LAMBDA_EPS:
            guard = True
            log.warning("reconstruction loss %.3g below epsilon; lambda denominator clamped", denom)
            denom = LAMBDA_EPS
        lam = np.float32(cls_v) / np.float32(denom)
    elif mode == "fixed":
        lam = np.float32(fixed_lambda)
    else:
        raise ValueError(f"unknown lambda mode {mode!r}")
    total = l_cls + ad.detach(ad.Tensor(lam)) * l_mse
    return total, JointLossReport(cls_v, mse_v, float(lam), float(total.data), guard)
