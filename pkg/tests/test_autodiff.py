import numpy as np
import pytest

from masknas import autodiff as ad
from masknas.autodiff import functional as F
from masknas.autodiff.gradcheck import central_difference, gradcheck


def loop_conv(x, w, stride=1, padding=0, dilation=1):
    """Nested-loop cross-correlation oracle."""
    b, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((b, o, ho, wo))
    for n in range(b):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for p in range(k):
                            for q in range(k):
                                acc += w[oc, ic, p, q] * xp[n, ic, i * stride + p * dilation, j * stride + q * dilation]
                    out[n, oc, i, j] = acc
    return out


# -- conv2d ------------------------------------------------------------------

def test_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 5)).astype(np.float32)
    w = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
    assert np.array_equal(F.conv2d(ad.as_tensor(x), ad.as_tensor(w)).data, x)


def test_ones_kernel_center():
    out = F.conv2d(ad.ones((1, 1, 3, 3)), ad.ones((1, 1, 3, 3)), padding=1)
    assert out.data[0, 0, 1, 1] == 9.0


@pytest.mark.parametrize("stride,padding,dilation", [(1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 0, 1)])
def test_conv_matches_loops(stride, padding, dilation):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    got = F.conv2d(ad.as_tensor(x), ad.as_tensor(w), stride=stride, padding=padding, dilation=dilation).data
    np.testing.assert_allclose(got, loop_conv(x, w, stride, padding, dilation), atol=1e-5)


def test_conv_channel_mismatch():
    with pytest.raises(ad.DimensionError):
        F.conv2d(ad.zeros((1, 3, 4, 4)), ad.zeros((2, 2, 3, 3)))


def test_conv_linearity():
    rng = np.random.default_rng(2)
    x, y = (rng.standard_normal((2, 3, 6, 6)).astype(np.float32) for _ in range(2))
    w = ad.as_tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
    conv = lambda t: F.conv2d(ad.as_tensor(t), w, padding=1).data
    np.testing.assert_allclose(conv(2 * x - 3 * y), 2 * conv(x) - 3 * conv(y), atol=1e-5)


@pytest.mark.parametrize("stride,dilation", [(1, 1), (2, 1), (1, 2), (2, 2)])
def test_depthwise_compiled_matches_numpy(stride, dilation, monkeypatch):
    rng = np.random.default_rng(3)
    x = ad.parameter(rng.standard_normal((2, 4, 9, 9)))
    w = ad.parameter(rng.standard_normal((4, 1, 3, 3)))
    g = rng.standard_normal(F.conv2d(x, w, stride=stride, padding=2, dilation=dilation, groups=4).shape)
    results = []
    for compiled in (True, False):
        monkeypatch.setattr(F, "USE_COMPILED", compiled)
        x.grad = w.grad = None
        out = F.conv2d(x, w, stride=stride, padding=2, dilation=dilation, groups=4)
        (out * g.astype(np.float32)).sum().backward()
        results.append((out.data, x.grad, w.grad))
    for a, b in zip(*results):
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5)


# -- transposed convolution ----------------------------------------------------

def test_conv_transpose_single_tap():
    out = F.conv_transpose2d(ad.as_tensor(np.full((1, 1, 1, 1), 3.0)), ad.ones((1, 1, 2, 2)), stride=2)
    assert out.shape == (1, 1, 2, 2)
    assert np.all(out.data == 3.0)


def test_conv_transpose_is_conv_adjoint():
    rng = np.random.default_rng(4)
    w = rng.standard_normal((3, 5, 4, 4)).astype(np.float32)  # conv weight [O=3, C=5]
    x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    y = ad.parameter(np.zeros((2, 5, 8, 8)))
    (F.conv2d(y, ad.as_tensor(w), stride=2, padding=1) * x).sum().backward()
    got = F.conv_transpose2d(ad.as_tensor(x), ad.as_tensor(w), stride=2, padding=1).data
    np.testing.assert_allclose(got, y.grad, atol=1e-5)


def test_conv_transpose_zero_and_size():
    out = F.conv_transpose2d(ad.zeros((1, 2, 5, 5)), ad.ones((2, 3, 4, 4)), stride=2, padding=1)
    assert out.shape == (1, 3, 10, 10)
    assert not out.data.any()


# -- batch norm --------------------------------------------------------------

def _bn(x, gamma=1.0, beta=0.0, training=True):
    c = x.shape[1]
    rm, rv = np.zeros(c, np.float32), np.ones(c, np.float32)
    out = F.batch_norm(ad.as_tensor(x), ad.as_tensor(np.full(c, gamma, np.float32)),
                       ad.as_tensor(np.full(c, beta, np.float32)), rm, rv, training)
    return out.data, rm, rv


def test_bn_constant_channel():
    out, _, _ = _bn(np.full((4, 2, 3, 3), 7.0, np.float32))
    assert np.all(out == 0)


def test_bn_affine_dominates():
    x = np.random.default_rng(5).standard_normal((4, 2, 3, 3)).astype(np.float32)
    out, _, _ = _bn(x, gamma=0.0, beta=5.0)
    assert np.all(out == 5.0)


def test_bn_moments_and_running_stats():
    x = np.random.default_rng(6).normal(3.0, 2.0, (16, 3, 5, 5)).astype(np.float32)
    out, rm, rv = _bn(x)
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-5
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-3
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-5)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1), rtol=1e-5)


def test_bn_single_sample_zero_variance():
    out, _, _ = _bn(np.ones((1, 2, 1, 1), np.float32))
    assert np.all(np.isfinite(out))


def test_bn_eval_uses_running_stats():
    x = np.random.default_rng(7).standard_normal((2, 2, 3, 3)).astype(np.float32)
    out, _, _ = _bn(x, training=False)
    np.testing.assert_allclose(out, x / np.sqrt(1 + F.BN_EPS), rtol=1e-6)


# -- elementwise -------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(ad.zeros((1, 5))).data, 0.2, rtol=1e-6)
    np.testing.assert_allclose(ad.softmax(ad.as_tensor([np.log(3.0), 0.0])).data, [0.75, 0.25], rtol=1e-6)


def test_softmax_rows_positive_and_normalized():
    a = ad.as_tensor(np.random.default_rng(8).normal(0, 20, (50, 7)))
    p = ad.softmax(a, axis=1).data
    assert np.all(p > 0)
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-6


def test_softmax_bad_axis():
    with pytest.raises(ad.DimensionError):
        ad.softmax(ad.zeros((2, 3)), axis=2)


def test_hardtanh_clips():
    out = ad.hardtanh(ad.as_tensor([-5.0, 0.3, 7.0]), -1.0, 1.0)
    np.testing.assert_allclose(out.data, [-1.0, 0.3, 1.0], rtol=1e-7)
    with pytest.raises(ad.ContractError):
        ad.hardtanh(ad.zeros(3), 1.0, 1.0)


# -- backward semantics ---------------------------------------------------------

def test_sum_of_squares_grad_exact():
    x = ad.parameter(np.random.default_rng(9).standard_normal(6))
    (x * x).sum().backward()
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_accumulates():
    x = ad.parameter(np.ones(3))
    (x * 2.0).sum().backward()
    (x * 2.0).sum().backward()
    assert np.array_equal(x.grad, np.full(3, 4.0, np.float32))


def test_fan_out_is_additive():
    x = ad.parameter(np.array([1.5, -2.0]))
    y = x * 3.0
    (y + y * y).sum().backward()
    np.testing.assert_allclose(x.grad, 3 + 18 * x.data, rtol=1e-6)


def test_non_scalar_backward_rejected():
    with pytest.raises(ad.ContractError):
        (ad.parameter(np.ones(3)) * 2.0).backward()


def test_detach_blocks_gradient():
    a = ad.parameter(np.array([2.0]))
    b = ad.parameter(np.array([3.0]))
    d = ad.detach(a)
    assert np.array_equal(d.data, a.data) and not d.requires_grad
    (d * b).sum().backward()
    assert a.grad is None
    assert b.grad[0] == 2.0


def test_no_grad_records_nothing():
    x = ad.parameter(np.ones(2))
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_determinism():
    def run():
        rng = np.random.default_rng(10)
        x = ad.parameter(rng.standard_normal((2, 3, 6, 6)))
        w = ad.parameter(rng.standard_normal((4, 3, 3, 3)))
        out = ad.relu(F.conv2d(x, w, padding=1)).mean()
        out.backward()
        return out.data, x.grad, w.grad
    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


# -- finite-difference oracle -----------------------------------------------------

def test_central_difference_on_polynomial():
    x = ad.parameter(np.array([0.5, -1.0, 2.0]))
    num = central_difference(lambda: (x * x * x).sum(), x)
    np.testing.assert_allclose(num, 3 * x.data.astype(np.float64) ** 2, rtol=1e-5)


def test_gradcheck_detects_wrong_gradient():
    x = ad.parameter(np.array([1.0, 2.0]))

    def fn():
        y = x * x
        return ad.Tensor._make(y.data.sum(), (y,), lambda g: (np.full(y.shape, 3.0 * g, np.float32),))

    assert not gradcheck(fn, [x])["passed"]
    assert not gradcheck(fn, [x], refine=(1e-5, 1e-6))["passed"]
