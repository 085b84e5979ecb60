import itertools
import json

import numpy as np
import pytest

from masknas import autodiff as ad
from masknas.autodiff.gradcheck import gradcheck
from masknas.space import (
    DARTS_OPS,
    NB201_OPS,
    Alpha,
    ConfigurationError,
    Genotype,
    Supernet,
    alpha_std_total,
    darts_edges,
    discretize,
    mixed_op_forward,
    num_edges,
    random_genotype,
    skip_fraction,
    uniform_genotype,
)
from masknas.space.operations import Identity, Zero, build_op


def test_edge_counts():
    assert num_edges("darts", 4) == 14
    assert num_edges("nb201", 3) == 6
    assert len(DARTS_OPS) == 8 and len(NB201_OPS) == 5
    assert all(src < dst for src, dst in darts_edges(4))


# -- mixed op ----------------------------------------------------------------

def test_mixed_op_uniform_half():
    x = ad.as_tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 4)))
    out = mixed_op_forward(x, np.zeros(2), [Identity(), Zero(1)])
    np.testing.assert_allclose(out.data, 0.5 * x.data, rtol=1e-6)


def test_mixed_op_three_quarters():
    x = ad.as_tensor(np.random.default_rng(1).standard_normal((2, 3, 4, 4)))
    out = mixed_op_forward(x, np.array([np.log(3.0), 0.0]), [Identity(), Zero(1)])
    np.testing.assert_allclose(out.data, 0.75 * x.data, rtol=1e-6)


def test_mixed_op_saturated_matches_single_op():
    rng = np.random.default_rng(2)
    ops = [build_op(n, 4, 1, affine=False, rng=rng, pool_bn=True) for n in DARTS_OPS]
    x = ad.as_tensor(rng.standard_normal((2, 4, 6, 6)))
    for k in (1, 4, 7):
        a = np.zeros(len(ops))
        a[k] = 40.0
        got = mixed_op_forward(x, a, ops).data
        want = ops[k](x).data
        np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-6)


def test_mixture_bound():
    rng = np.random.default_rng(3)
    x = ad.as_tensor(rng.uniform(-1, 1, (2, 4, 6, 6)))
    ops = [Identity(), Zero(1), build_op("max_pool_3x3", 4, 1, False, rng), build_op("avg_pool_3x3", 4, 1, False, rng)]
    bound = max(np.abs(op(x).data).max() for op in ops if not isinstance(op, Zero))
    for _ in range(10):
        out = mixed_op_forward(x, rng.normal(0, 3, len(ops)), ops)
        assert np.abs(out.data).max() <= bound + 1e-6


# -- supernet ----------------------------------------------------------------

def _net(space="darts", channels=2, steps=2, size=8, seed=0):
    rng = np.random.default_rng(seed)
    steps = 3 if space == "nb201" else steps
    net = Supernet(space, channels=channels, layers=3, steps=steps, stem_multiplier=2,
                   image_size=(size, size), rng=rng)
    return net, Alpha.initial(space, steps, rng)


@pytest.mark.parametrize("space", ["darts", "nb201"])
def test_supernet_output_shape(space):
    net = Supernet(space, channels=4, layers=3, steps=4 if space == "darts" else 3, image_size=(32, 32))
    alpha = Alpha.initial(space, net.steps, np.random.default_rng(0))
    out = net(ad.zeros((2, 3, 32, 32)), alpha)
    assert out.shape[2:] == (8, 8)
    assert out.shape == net.output_shape(2)


def test_supernet_rejects_bad_geometry():
    with pytest.raises(ConfigurationError):
        Supernet("darts", channels=2, steps=2, image_size=(30, 30))


def test_zero_weights_give_zero_output():
    net, alpha = _net()
    for p in net.parameters():
        p.data = np.zeros_like(p.data)
    x = ad.as_tensor(np.random.default_rng(4).standard_normal((2, 3, 8, 8)))
    assert not net(x, alpha).data.any()


@pytest.mark.parametrize("space", ["darts", "nb201"])
def test_alpha_gradient_matches_finite_differences(space):
    net, alpha = _net(space)
    alpha.load(*(np.random.default_rng(5).normal(0, 0.5, a.shape) for a in alpha.arrays()))
    x = ad.as_tensor(np.random.default_rng(6).standard_normal((2, 3, 8, 8)))
    probe = np.random.default_rng(7).standard_normal(net.output_shape(2))
    res = gradcheck(lambda: (net(x, alpha) * probe).sum(), alpha.tensors(), refine=(1e-5, 1e-6))
    assert res["passed"], res


def test_supernet_matches_derived_network():
    net, alpha = _net(channels=3, seed=8)
    rng = np.random.default_rng(9)
    x = ad.as_tensor(rng.standard_normal((4, 3, 8, 8)))
    net(x, alpha)  # populate running statistics
    net.eval()
    geno = random_genotype("darts", 2, rng)
    edges = darts_edges(2)
    rows = []
    for cell in (geno.normal, geno.reduce):
        a = np.zeros((len(edges), len(DARTS_OPS)))
        a[:, 0] = 40.0  # dropped edges become 'none'
        for j, node in enumerate(cell):
            for op, src in node:
                e = edges.index((src, j + 2))
                a[e] = 0.0
                a[e, DARTS_OPS.index(op)] = 40.0
        rows.append(a)
    alpha.load(*rows)
    assert discretize(alpha, "darts", 2).to_json() == geno.to_json()
    with ad.no_grad():
        mixed = net(x, alpha).data
        derived = net.derive(geno)(x).data
    np.testing.assert_allclose(mixed, derived, rtol=1e-3, atol=1e-4)


# -- discretization ----------------------------------------------------------------

def test_discretize_all_equal():
    g = discretize((np.zeros((14, 8)), np.zeros((14, 8))), "darts", 4)
    for j, node in enumerate(g.normal):
        assert node == [("skip_connect", 0), ("skip_connect", 1)]


def _brute_force(alpha, steps):
    w = np.exp(alpha) / np.exp(alpha).sum(axis=1, keepdims=True)
    edges = darts_edges(steps)
    cell = []
    for j in range(2, steps + 2):
        idx = [e for e, (_, d) in enumerate(edges) if d == j]
        best = None
        for pair in itertools.combinations(idx, 2):
            for ka, kb in itertools.product(range(1, 8), repeat=2):
                score = w[pair[0], ka] + w[pair[1], kb]
                if best is None or score > best[0]:
                    best = (score, [(DARTS_OPS[ka], edges[pair[0]][0]), (DARTS_OPS[kb], edges[pair[1]][0])])
        cell.append(best[1])
    return cell


def test_discretize_matches_brute_force():
    rng = np.random.default_rng(10)
    for _ in range(20):
        a = rng.normal(0, 2, (14, 8))
        assert discretize((a, a), "darts", 4).normal == _brute_force(a, 4)


def test_discretize_nb201_all_none():
    a = np.zeros((6, 5))
    a[:, 0] = 5.0
    g = discretize((a, a), "nb201", 3)
    assert all(op == "none" for node in g.normal for op, _ in node)
    assert sum(len(n) for n in g.normal) == 6


def test_discretize_shift_invariant():
    rng = np.random.default_rng(11)
    a = rng.standard_normal((14, 8))
    shifted = a + rng.normal(0, 10, (14, 1))
    assert discretize((a, a), "darts", 4) == discretize((shifted, shifted), "darts", 4)


# -- diagnostics -------------------------------------------------------------

def test_skip_fraction_examples():
    assert skip_fraction(uniform_genotype("darts", 4)) == 1.0
    assert skip_fraction(uniform_genotype("darts", 4, "sep_conv_3x3")) == 0.0
    g = uniform_genotype("darts", 4)
    g.normal[0] = [("sep_conv_3x3", 0), ("sep_conv_3x3", 1)]
    g.normal[1] = [("max_pool_3x3", 0), ("dil_conv_3x3", 2)]
    assert skip_fraction(g) == 0.5


def test_alpha_std_total_examples():
    assert alpha_std_total((np.zeros((14, 8)), np.zeros((14, 8)))) == 0.0
    one = np.array([[np.log(3.0), 0.0]])
    assert alpha_std_total((one, one)) == pytest.approx(0.25, abs=1e-12)


def test_alpha_std_total_matches_recomputation():
    a = np.random.default_rng(12).normal(0, 1.5, (14, 8))
    total = 0.0
    for row in a:
        p = np.exp(row) / np.exp(row).sum()
        total += np.sqrt(np.mean((p - p.mean()) ** 2))
    assert abs(alpha_std_total((a, a)) - total) < 1e-9


# -- serialization -----------------------------------------------------------------

@pytest.mark.parametrize("space,steps", [("darts", 4), ("nb201", 3)])
def test_genotype_round_trip(space, steps):
    g = random_genotype(space, steps, np.random.default_rng(13))
    text = g.to_json()
    assert list(json.loads(text)) == ["space", "normal", "reduce"]
    assert Genotype.from_json(text) == g
    assert Genotype.from_json(text).to_json() == text


@pytest.mark.parametrize("doc", [
    {"normal": [], "space": "darts", "reduce": []},
    {"space": "nope", "normal": [], "reduce": []},
    {"space": "darts", "normal": [[["skip_connect", 0]]], "reduce": []},
    {"space": "darts", "normal": [[["none", 0], ["skip_connect", 1]]], "reduce": []},
    {"space": "darts", "normal": [[["skip_connect", 0], ["skip_connect", 5]]], "reduce": []},
    {"space": "darts", "normal": [[["warp_drive", 0], ["skip_connect", 1]]], "reduce": []},
])
def test_genotype_rejects_malformed(doc):
    with pytest.raises(ValueError):
        Genotype.from_dict(doc)
