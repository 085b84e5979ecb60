"""Central finite-difference oracle for checking autodiff gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad, precision


def central_difference(
    fn: Callable[[], Tensor], param: Tensor, h: float = 1e-3, indices=None, float64: bool = True
) -> np.ndarray:
    """Estimate d fn() / d param by perturbing ``param.data`` entrywise.

    With ``float64`` set, ``fn`` is evaluated in double precision at the
    current (float32) point so rounding noise stays far below ``h``.
    """
    saved = param.data
    work = saved.astype(np.float64) if float64 else saved.copy()
    param.data = work
    flat = work.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    idx = range(flat.size) if indices is None else indices
    ctx = precision(np.float64) if float64 else precision(saved.dtype)
    try:
        with no_grad(), ctx:
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                up = float(fn().data)
                flat[i] = orig - h
                down = float(fn().data)
                flat[i] = orig
                grad[i] = (up - down) / (2 * h)
    finally:
        param.data = saved
    return grad.reshape(param.shape)


def gradcheck(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-3,
    rtol: float = 1e-3,
    atol: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    refine: Sequence[float] = (),
) -> dict:
    """Compare autodiff gradients of scalar ``fn()`` with central differences.

    Returns a dict with the worst relative error and a ``passed`` flag.  An
    entry passes when ``|a - n| <= atol + rtol * max(|a|, |n|)``.  With
    ``max_entries`` set, a random subset of each parameter is probed.

    ``refine`` lists smaller steps for entries that fail at ``h``.  Max
    pooling and ReLU make the loss piecewise smooth; a kink closer than ``h``
    spoils the central difference even though the analytic gradient is the
    correct one-piece derivative.  Shrinking the step converges wherever the
    function is differentiable, so an entry passes if any step agrees.  A
    wrong gradient disagrees at every scale.
    """
    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]
    worst = 0.0
    passed = True
    for p, a in zip(params, analytic):
        indices = None
        if max_entries is not None and p.size > max_entries:
            rng = rng or np.random.default_rng(0)
            indices = rng.choice(p.size, size=max_entries, replace=False)
        numeric = central_difference(fn, p, h=h, indices=indices)
        sel = slice(None) if indices is None else indices
        a_flat = a.reshape(-1)[sel]
        n_flat = numeric.reshape(-1)[sel]
        err = np.abs(a_flat - n_flat)
        scale = np.maximum(np.abs(a_flat), np.abs(n_flat))
        flat_idx = np.arange(p.size)[sel]
        for step in refine:
            bad = err > atol + rtol * scale
            if not bad.any():
                break
            retry = central_difference(fn, p, h=step, indices=flat_idx[bad]).reshape(-1)[flat_idx[bad]]
            e2 = np.abs(a_flat[bad] - retry)
            s2 = np.maximum(np.abs(a_flat[bad]), np.abs(retry))
            better = e2 < err[bad]
            err[np.flatnonzero(bad)[better]] = e2[better]
            scale[np.flatnonzero(bad)[better]] = s2[better]
        if np.any(err > atol + rtol * scale):
            passed = False
        rel = err / np.maximum(scale, atol)
        worst = max(worst, float(rel.max(initial=0.0)))
    return {"passed": passed, "max_rel_error": worst}
