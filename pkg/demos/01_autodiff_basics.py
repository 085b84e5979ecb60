"""
Reverse-mode autodiff on numpy arrays
=====================================

The search is built on a small tensor library.  This walk-through builds a
little convolutional graph, backpropagates through it and checks the result
against central finite differences.
"""

import numpy as np

from masknas import autodiff as ad
from masknas.autodiff import functional as F
from masknas.autodiff.gradcheck import gradcheck

rng = np.random.default_rng(0)

# %%
# Leaves that need gradients are created with ``parameter``.  Everything
# else (inputs, targets) is a plain constant tensor.
x = ad.as_tensor(rng.standard_normal((2, 3, 8, 8)))
w = ad.parameter(rng.standard_normal((4, 3, 3, 3)) * 0.3)
gamma = ad.parameter(np.ones(4))
beta = ad.parameter(np.zeros(4))


def loss():
    h = F.conv2d(x, w, padding=1)
    h = F.batch_norm(h, gamma, beta, np.zeros(4, np.float32), np.ones(4, np.float32), True)
    h = F.max_pool2d(ad.relu(h), 3, 2, 1)
    return (F.global_avg_pool(h) ** 2).sum()


out = loss()
out.backward()
print("loss", float(out.data))
print("dL/dw shape", w.grad.shape, " |dL/dw|", float(np.abs(w.grad).sum()))

# %%
# The finite-difference oracle re-evaluates the loss in float64 with each
# entry nudged by +-h.  ReLU and max pooling make the loss piecewise
# smooth, so entries that disagree at h=1e-3 are retried at smaller steps.
res = gradcheck(loss, [w, gamma, beta], refine=(1e-5, 1e-6))
print("gradcheck", res)

# %%
# A deliberately wrong gradient is caught at every step size.
a = ad.parameter(rng.standard_normal(5))


def bad():
    return (ad.detach(a) * a).sum()  # true gradient is 2a, autodiff sees only a


print("wrong gradient passes?", gradcheck(bad, [a], refine=(1e-5, 1e-6))["passed"])
