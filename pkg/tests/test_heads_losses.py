import numpy as np
import pytest

from masknas import autodiff as ad
from masknas.autodiff import ContractError
from masknas.autodiff.gradcheck import gradcheck
from masknas.heads import ClassifierHead, ReconstructionDecoder
from masknas.losses import NonFiniteLossError, cross_entropy, joint_loss, masked_mse
from masknas.space import ConfigurationError


# -- classifier head -----------------------------------------------------------

def test_zero_features_zero_logits():
    head = ClassifierHead(8, 10, rng=np.random.default_rng(0))
    head.fc.bias.data[:] = 0
    assert not head(ad.zeros((2, 8, 4, 4))).data.any()


def test_bias_only_logits():
    head = ClassifierHead(8, 3, rng=np.random.default_rng(0))
    head.fc.weight.data[:] = 0
    head.fc.bias.data[:] = [1.0, -2.0, 0.5]
    x = ad.as_tensor(np.random.default_rng(1).standard_normal((4, 8, 2, 2)))
    assert np.array_equal(head(x).data, np.tile([1.0, -2.0, 0.5], (4, 1)).astype(np.float32))


def test_head_gradcheck():
    head = ClassifierHead(6, 4, rng=np.random.default_rng(2))
    x = ad.as_tensor(np.random.default_rng(3).standard_normal((3, 6, 2, 2)))
    labels = np.array([0, 3, 1])
    res = gradcheck(lambda: cross_entropy(head(x), labels), head.parameters())
    assert res["passed"], res


# -- decoder -------------------------------------------------------------------

def _decoder(width=8, seed=4):
    return ReconstructionDecoder(6, (3, 16, 16), lo=[-2.0, -1.5, -1.0], hi=[2.0, 1.5, 1.0],
                                 width=width, rng=np.random.default_rng(seed))


def test_decoder_shape():
    dec = ReconstructionDecoder(64, (3, 32, 32), lo=-1, hi=1, width=16, rng=np.random.default_rng(0))
    assert dec(ad.zeros((2, 64, 8, 8))).shape == (2, 3, 32, 32)


def test_decoder_clips_to_bounds():
    dec = _decoder()
    x = ad.as_tensor(np.random.default_rng(5).standard_normal((2, 6, 4, 4)))
    for sign in (1.0, -1.0):
        dec.out.bias.data[:] = 10.0 * sign
        dec.out.weight.data[:] = 0.0
        out = dec(x).data
        np.testing.assert_array_equal(out, np.broadcast_to(dec.hi if sign > 0 else dec.lo, out.shape))


def test_decoder_rejects_wrong_reduction():
    with pytest.raises(ConfigurationError):
        _decoder()(ad.zeros((1, 6, 8, 8)))
    with pytest.raises(ConfigurationError):
        ReconstructionDecoder(6, (3, 18, 18), lo=-1, hi=1)


def test_decoder_gradcheck():
    dec = _decoder(width=4)
    x = ad.as_tensor(np.random.default_rng(6).standard_normal((2, 6, 4, 4)))
    probe = np.random.default_rng(7).standard_normal((2, 3, 16, 16))
    res = gradcheck(lambda: (dec(x) * probe).sum(), dec.parameters(), max_entries=30,
                    rng=np.random.default_rng(8), refine=(1e-5, 1e-6))
    assert res["passed"], res


# -- cross entropy -------------------------------------------------------------

def test_uniform_logits():
    assert float(cross_entropy(ad.zeros((4, 10)), [0, 3, 9, 5]).data) == pytest.approx(np.log(10), abs=1e-6)


def test_saturated_logits():
    logits = np.zeros((3, 5))
    labels = np.array([1, 4, 0])
    logits[np.arange(3), labels] = 40.0
    assert float(cross_entropy(ad.as_tensor(logits), labels).data) < 1e-6


def test_cross_entropy_matches_float64_reference():
    rng = np.random.default_rng(9)
    logits = rng.normal(0, 5, (16, 10))
    labels = rng.integers(0, 10, 16)
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    ref = np.mean(lse - logits[np.arange(16), labels])
    assert abs(float(cross_entropy(ad.as_tensor(logits), labels).data) - ref) < 1e-5


def test_cross_entropy_label_checks():
    with pytest.raises(ContractError):
        cross_entropy(ad.zeros((2, 3)), [0, 3])
    with pytest.raises(ContractError):
        cross_entropy(ad.zeros((2, 3)), [0])


# -- masked MSE ----------------------------------------------------------------

def test_masked_mse_examples():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    m = np.zeros_like(x)
    m[:, :, :2] = 1
    loss, guard = masked_mse(ad.as_tensor(x), x, m)
    assert float(loss.data) == 0.0 and not guard
    loss, guard = masked_mse(ad.as_tensor(x + 0.5), x, m)
    assert float(loss.data) == pytest.approx(0.25, rel=1e-6)
    loss, guard = masked_mse(ad.as_tensor(x + 0.5), x, np.zeros_like(x))
    assert float(loss.data) == 0.0 and guard


def test_masked_mse_ignores_visible_pixels():
    x = np.zeros((1, 1, 2, 2), np.float32)
    rec = np.array([[[[1.0, 100.0], [2.0, -50.0]]]])
    m = np.array([[[[1, 0], [1, 0]]]], np.float32)
    assert float(masked_mse(ad.as_tensor(rec), x, m)[0].data) == pytest.approx(2.5)


# -- joint loss ----------------------------------------------------------------

def test_lambda_examples():
    _, r = joint_loss(ad.as_tensor(2.0), ad.as_tensor(0.5))
    assert (r.lambda_, r.total) == (4.0, 4.0)
    _, r = joint_loss(ad.as_tensor(1.3), ad.as_tensor(1.3))
    assert r.lambda_ == 1.0 and r.total == pytest.approx(2.6, rel=1e-6)


def test_adaptive_identity_random():
    rng = np.random.default_rng(11)
    for _ in range(100):
        c, m = rng.uniform(1e-3, 5, 2)
        total, r = joint_loss(ad.as_tensor(c), ad.as_tensor(m))
        assert abs(float(total.data) - 2 * r.l_cls) <= 1e-6 * max(1.0, r.l_cls)


def test_epsilon_guard():
    _, r = joint_loss(ad.as_tensor(1.0), ad.as_tensor(0.0))
    assert r.epsilon_guard_triggered and np.isfinite(r.lambda_)


def test_non_finite_rejected():
    with pytest.raises(NonFiniteLossError):
        joint_loss(ad.as_tensor(np.nan), ad.as_tensor(1.0))


def test_frozen_lambda_gradient_equivalence():
    rng = np.random.default_rng(12)
    w = ad.parameter(rng.standard_normal((5, 3)))
    x = rng.standard_normal((4, 5)).astype(np.float32)
    target = rng.standard_normal((4, 3)).astype(np.float32)

    def losses():
        out = ad.matmul(ad.as_tensor(x), w)
        cls = cross_entropy(out, [0, 1, 2, 1])
        mse, _ = masked_mse(out, target, np.ones_like(target))
        return cls, mse

    total, r = joint_loss(*losses())
    total.backward()
    adaptive = w.grad.copy()
    w.grad = None
    fixed, _ = joint_loss(*losses(), mode="fixed", fixed_lambda=r.lambda_)
    fixed.backward()
    np.testing.assert_allclose(adaptive, w.grad, atol=1e-6)
    # and equal to the hand-assembled combination
    parts = []
    for i in range(2):
        w.grad = None
        losses()[i].backward()
        parts.append(w.grad.copy())
    np.testing.assert_allclose(adaptive, parts[0] + np.float32(r.lambda_) * parts[1], atol=1e-6)


def test_single_task_modes():
    c, m = ad.as_tensor(0.7), ad.as_tensor(0.2)
    assert joint_loss(c, None)[1].lambda_ == 0.0
    total, r = joint_loss(None, m)
    assert r.lambda_ == 1.0 and float(total.data) == pytest.approx(0.2)
    with pytest.raises(ContractError):
        joint_loss(None, None)
