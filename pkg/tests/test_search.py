import json
from dataclasses import replace

import numpy as np
import pytest

from masknas import autodiff as ad
from masknas.autodiff.gradcheck import gradcheck
from masknas.data import load_dataset
from masknas.nn import set_requires_grad
from masknas.optim import SGD, Adam
from masknas.search import (
    ConfigError,
    SearchConfig,
    SearchState,
    gradients,
    run_search,
    task_loss,
    unrolled_alpha_grad,
)
from masknas.space import discretize, mixed_op_forward
from masknas.space.operations import Identity, Zero

TINY = SearchConfig(image_size=8, patch=4, channels=2, steps=2, layers=3, stem_multiplier=1,
                    batch_size=16, dataset_size=80, decoder_width=4, epochs=2)


def _state(**kw):
    cfg = replace(TINY, **kw)
    return SearchState(cfg, load_dataset(cfg))


def _batches(state):
    bt = next(state._epoch_batches(state.train_stream))
    bv = next(state._epoch_batches(state.val_stream))
    return bt, bv


def _copy(tensors):
    return [t.data.copy() for t in tensors]


def _same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


# -- configuration -----------------------------------------------------------

@pytest.mark.parametrize("kw", [{"task": "seg"}, {"input": "blurred"}, {"order": "third"},
                                {"image_size": 10}, {"patch": 3}, {"mask_ratio": 1.5},
                                {"task": "mim", "mim_on_val": False}])
def test_invalid_config_rejected(kw):
    with pytest.raises(ConfigError):
        replace(TINY, **kw).validate()


def test_effective_ratio_floor():
    cfg = replace(TINY, mask_ratio=0.0)
    assert cfg.effective_ratio == 1 / cfg.num_patches
    assert replace(cfg, input="clean").effective_ratio == 0.0


# -- weight step ----------------------------------------------------------------

def test_zero_lr_keeps_weights():
    st = _state(w_lr=0.0, w_lr_min=0.0)
    st.w_opt.lr = 0.0
    before = _copy(st.weights)
    st.w_step(_batches(st)[0])
    assert _same(before, _copy(st.weights))


def test_quadratic_sgd_step():
    w = ad.parameter(np.zeros(1))
    opt = SGD([w], 0.1)
    ((w - 3.0) * (w - 3.0)).sum().backward()
    opt.step()
    assert w.data[0] == pytest.approx(0.6, abs=1e-7)


def test_weight_step_descends():
    st = _state(w_lr=1e-3, w_momentum=0.0, w_weight_decay=0.0, grad_clip=1e9)
    st.w_opt.lr = 1e-3
    st.model.eval()  # fixed normalization so the loss is a function of the weights alone
    bt, _ = _batches(st)
    before = float(task_loss(st.model, st.alpha, bt, st.cfg)[0].data)
    st.w_step(bt)
    after = float(task_loss(st.model, st.alpha, bt, st.cfg)[0].data)
    assert after < before


# -- architecture step -------------------------------------------------------------

def test_zero_alpha_lr_keeps_alpha():
    st = _state(alpha_lr=0.0)
    before = _copy(st.alpha.tensors())
    st.alpha_step_first_order(_batches(st)[1])
    assert _same(before, _copy(st.alpha.tensors()))


def test_alternation_purity():
    st = _state()
    bt, bv = _batches(st)
    w0, a0 = _copy(st.weights), _copy(st.alpha.tensors())
    st.w_step(bt)
    assert _same(a0, _copy(st.alpha.tensors())) and not _same(w0, _copy(st.weights))
    w1 = _copy(st.weights)
    st.alpha_step(bt, bv)
    assert _same(w1, _copy(st.weights)) and not _same(a0, _copy(st.alpha.tensors()))
    st2 = _state(order="second")
    w2 = _copy(st2.weights)
    st2.alpha_step(*_batches(st2))
    assert _same(w2, _copy(st2.weights))


def test_split_provenance():
    st = _state()
    bt, bv = _batches(st)
    with pytest.raises(ad.ContractError):
        st.w_step(bv)
    with pytest.raises(ad.ContractError):
        st.alpha_step_first_order(bt)
    with pytest.raises(ad.ContractError):
        st.alpha_step_second_order(bv, bt)


def test_skip_beats_zero_on_identity_teacher():
    alpha = ad.parameter(np.zeros(2))
    opt = Adam([alpha], 3e-3)
    x = ad.as_tensor(np.random.default_rng(0).standard_normal((4, 2, 3, 3)))
    gaps = []
    for _ in range(50):
        opt.zero_grad()
        diff = mixed_op_forward(x, alpha, [Identity(), Zero(1)]) - x
        (diff * diff).mean().backward()
        opt.step()
        gaps.append(alpha.data[0] - alpha.data[1])
    assert np.all(np.diff(gaps) > 0) and gaps[0] > 0


def test_alpha_gradient_matches_finite_differences():
    st = _state()
    st.alpha.load(*(np.random.default_rng(1).normal(0, 0.5, a.shape) for a in st.alpha.arrays()))
    _, bv = _batches(st)
    # adaptive lambda is detached, so the oracle differentiates with lambda frozen at its batch value
    lam = task_loss(st.model, st.alpha, bv, st.cfg)[1].loss.lambda_
    frozen = replace(st.cfg, lambda_mode="fixed", fixed_lambda=lam)
    res = gradcheck(lambda: task_loss(st.model, st.alpha, bv, frozen)[0], st.alpha.tensors(),
                    refine=(1e-5, 1e-6))
    assert res["passed"], res


# -- second order ---------------------------------------------------------------------

def test_xi_zero_equals_first_order():
    st = _state(order="second")
    bt, bv = _batches(st)
    set_requires_grad(st.weights, False)
    first, _ = gradients(lambda: task_loss(st.model, st.alpha, bv, st.cfg)[0], st.alpha.tensors())
    set_requires_grad(st.weights, True)
    second = unrolled_alpha_grad(lambda: task_loss(st.model, st.alpha, bt, st.cfg)[0],
                                 lambda: task_loss(st.model, st.alpha, bv, st.cfg)[0],
                                 st.weights, st.alpha.tensors(), xi=0.0)
    assert _same(first, second)


def test_analytic_toy():
    for w0, a0, xi in [(1.5, 0.3, 0.1), (-2.0, 1.0, 0.05), (0.7, -0.4, 0.3)]:
        w = ad.parameter(np.array([w0]))
        a = ad.parameter(np.array([a0]))
        got = unrolled_alpha_grad(lambda: ((w - a) * (w - a)).sum(), lambda: (w * w).sum(), [w], [a], xi)[0]
        w_prime = w0 - xi * 2 * (w0 - a0)
        assert abs(got[0] - 4 * xi * w_prime) < 1e-4
        assert w.data[0] == np.float32(w0)


def test_hvp_matches_double_perturbation():
    rng = np.random.default_rng(2)
    A = rng.normal(0, 0.5, (4, 10))
    B = rng.normal(0, 0.5, (3, 10))
    w = ad.parameter(rng.normal(0, 1, (10, 1)))
    a = ad.parameter(rng.normal(0, 0.5, (4, 1)))

    def f_train(w_, a_):
        u = ad.matmul(ad.as_tensor(A), w_)
        return (ad.exp(a_) * u * u).sum() + (w_ * w_).sum() * 0.1

    def f_val(w_, a_):
        v = ad.matmul(ad.as_tensor(B), w_) - 1.0
        return (v * v).sum() * ad.exp(a_ * 0.5).sum()

    xi = 0.05
    got = unrolled_alpha_grad(lambda: f_train(w, a), lambda: f_val(w, a), [w], [a], xi)[0]

    # float64 oracle, every derivative by finite differences
    def ev(f, wv, av):
        with ad.precision(np.float64), ad.no_grad():
            return float(f(ad.as_tensor(wv), ad.as_tensor(av)).data)

    w0 = w.data.astype(np.float64)
    a0 = a.data.astype(np.float64)
    h = 1e-5

    def grad(f, wv, av, wrt):
        base = wv if wrt == "w" else av
        out = np.zeros_like(base)
        for i in range(base.size):
            e = np.zeros_like(base)
            e.flat[i] = h
            if wrt == "w":
                out.flat[i] = (ev(f, wv + e, av) - ev(f, wv - e, av)) / (2 * h)
            else:
                out.flat[i] = (ev(f, wv, av + e) - ev(f, wv, av - e)) / (2 * h)
        return out

    w_prime = w0 - xi * grad(f_train, w0, a0, "w")
    v = grad(f_val, w_prime, a0, "w")
    d_alpha = grad(f_val, w_prime, a0, "a")
    eps, delta = 1e-4, 1e-4
    hvp = np.zeros_like(a0)
    for i in range(a0.size):
        e = np.zeros_like(a0)
        e.flat[i] = delta
        hvp.flat[i] = (ev(f_train, w0 + eps * v, a0 + e) - ev(f_train, w0 + eps * v, a0 - e)
                       - ev(f_train, w0 - eps * v, a0 + e) + ev(f_train, w0 - eps * v, a0 - e)) / (4 * eps * delta)
    want = d_alpha - xi * hvp
    np.testing.assert_allclose(got, want, rtol=1e-2, atol=1e-4)


# -- whole runs -------------------------------------------------------------------------

def test_zero_epochs():
    cfg = replace(TINY, epochs=0)
    rec = run_search(cfg)
    assert rec.metrics == []
    st = SearchState(cfg, load_dataset(cfg))
    assert rec.genotype == discretize(st.alpha, "darts", 2)


def _strip(metrics):
    return [{k: v for k, v in m.items() if k != "wall_clock_s"} for m in metrics]


def test_determinism():
    a, b = run_search(TINY), run_search(TINY)
    assert a.genotype.to_json() == b.genotype.to_json()
    assert json.dumps(_strip(a.metrics)) == json.dumps(_strip(b.metrics))
    assert a.metrics_csv(wall_clock=False) == b.metrics_csv(wall_clock=False)


def test_metrics_rows():
    rec = run_search(replace(TINY, task="cls+mim"))
    assert [m["epoch"] for m in rec.metrics] == [1, 2]
    for m in rec.metrics:
        assert 0 <= m["skip_fraction"] <= 1 and m["alpha_std_total"] >= 0 and 0 <= m["val_acc"] <= 1
    steps = [s for s in rec.steps if s["l_mse"] > 1e-8]
    assert steps and all(abs(s["total"] - 2 * s["l_cls"]) <= 1e-6 * max(1, s["l_cls"]) for s in steps)


@pytest.mark.parametrize("order", ["first", "second"])
def test_resume_matches_uninterrupted(tmp_path, order):
    cfg = replace(TINY, epochs=3, order=order)
    full = run_search(cfg, run_dir=tmp_path / "full")
    run_search(cfg, run_dir=tmp_path / "cut", stop_after=1)
    resumed = run_search(cfg, run_dir=tmp_path / "cut", resume=True)
    assert resumed.genotype.to_json() == full.genotype.to_json()
    assert _strip(resumed.metrics) == _strip(full.metrics)
    assert _same(resumed.state.alpha.arrays(), full.state.alpha.arrays())
    assert _same(_copy(resumed.state.weights), _copy(full.state.weights))


def test_resume_without_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        run_search(TINY, run_dir=tmp_path, resume=True)


def test_nan_aborts_and_restores(tmp_path):
    cfg = replace(TINY, epochs=3)
    splits = load_dataset(cfg)
    st_rec = run_search(cfg, splits=splits, stop_after=1)
    bad = load_dataset(cfg)
    bad.search_val.images = bad.search_val.images.copy()
    bad.search_val.images[:] = np.nan
    rec = run_search(cfg, splits=bad, run_dir=tmp_path)
    assert rec.status.startswith("aborted")
    assert rec.metrics == []
    assert _same(rec.state.alpha.arrays(), SearchState(cfg, splits).alpha.arrays())
    assert (tmp_path / "record.json").exists()
    assert st_rec.status == "completed"
