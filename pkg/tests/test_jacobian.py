import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tqrobust.jacobian import (
    chain_product,
    jacobian_columns,
    jacobian_full,
    jacobian_per_layer,
    jr_frobenius,
    sensitivity_probe,
    write_probe_csv,
)
from tqrobust.model import LayerSpec, Model, forward
from tqrobust.presets import build
from oracles import rel_err


def linear(W, b=None):
    W = np.asarray(W, float)
    p = {"kernel": W.T.copy()}
    if b is not None:
        p["bias"] = np.asarray(b, float)
    return Model([LayerSpec(kind="dense", units=W.shape[0], use_bias=b is not None)], (W.shape[1],), [p], [{}])


def random_net(seed, depth=3, d=4, k=3, act="sigmoid", bn=False):
    rng = np.random.default_rng(seed)
    layers = []
    for _ in range(depth - 1):
        layers.append(LayerSpec(kind="dense", units=int(rng.integers(3, 7))))
        if bn:
            layers.append(LayerSpec(kind="batch_norm"))
        layers.append(LayerSpec(kind=act))
    layers.append(LayerSpec(kind="dense", units=k))
    m = Model(layers, (d,), seed=seed)
    for p in m.params:
        if "bias" in p:
            p["bias"][:] = rng.normal(size=p["bias"].shape)
    for s in m.state:
        if s:
            s["moving_mean"][:] = rng.normal(size=s["moving_mean"].shape)
            s["moving_var"][:] = rng.uniform(0.5, 2, size=s["moving_var"].shape)
    return m


def test_linear_jacobian_is_W():
    W = [[1.0, 2.0], [3.0, 4.0]]
    m = linear(W, [0.5, -0.5])
    x = np.array([0.3, -0.7])
    assert np.array_equal(jacobian_full(m, x).matrix, W)
    assert np.array_equal(jacobian_columns(m, x).matrix, W)
    assert jr_frobenius(m, x) == 30.0
    assert jr_frobenius(m, x, form="entries") == 30.0


def test_relu_jacobian_is_diagonal_slope():
    m = Model([LayerSpec(kind="relu")], (2,))
    assert np.array_equal(jacobian_full(m, [2.0, -1.0]).matrix, np.diag([1.0, 0.0]))
    m3 = Model([LayerSpec(kind="relu")], (3,))
    assert np.array_equal(jacobian_per_layer(m3, [3.0, -2.0, 0.5], 1).matrix, np.diag([1.0, 0.0, 1.0]))


def test_per_layer_dense_is_W():
    W = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]])
    m = Model([LayerSpec(kind="dense", units=2), LayerSpec(kind="relu")], (3,), [{"kernel": W.T, "bias": np.ones(2)}, {}], [{}, {}])
    assert np.array_equal(jacobian_per_layer(m, [1.0, 1.0, 1.0], 1).matrix, W)


@pytest.mark.parametrize("seed", range(3))
def test_full_jacobian_matches_finite_differences(seed):
    m = build("mlp", (4,), 3, seed=seed, hidden=(5,))
    m = m.with_layers([s.model_copy(update={"kind": "sigmoid"}) if s.kind == "relu" else s for s in m.layers])
    x = np.random.default_rng(seed).normal(size=4)
    J = jacobian_full(m, x).matrix
    h = 1e-5
    fd = np.stack([(forward(m, (x + h * e)[None])[0] - forward(m, (x - h * e)[None])[0]) / (2 * h) for e in np.eye(4)], axis=1)
    assert np.all(np.abs(J - fd) <= 1e-5 * np.maximum(np.abs(fd), 1e-3))


def test_post_softmax_jacobian_matches_finite_differences():
    m = random_net(7)
    x = np.random.default_rng(1).normal(size=4)
    J = jacobian_full(m, x, post_softmax=True).matrix

    def p(v):
        z = forward(m, v[None])[0]
        e = np.exp(z - z.max())
        return e / e.sum()

    fd = np.stack([(p(x + 1e-5 * e) - p(x - 1e-5 * e)) / 2e-5 for e in np.eye(4)], axis=1)
    assert rel_err(J, fd) < 1e-6


def test_constant_model_has_zero_jacobian():
    m = Model([LayerSpec(kind="dense", units=3), LayerSpec(kind="softmax_out")], (4,), [{"kernel": np.zeros((4, 3)), "bias": np.zeros(3)}, {}], [{}, {}])
    assert jr_frobenius(m, np.ones(4)) == 0.0
    assert not np.any(jacobian_full(m, np.ones(4)).matrix)


@pytest.mark.parametrize("seed", range(5))
def test_frobenius_forms_agree(seed):
    m = random_net(seed, depth=3, bn=seed % 2 == 1)
    x = np.random.default_rng(seed).normal(size=4)
    assert abs(jr_frobenius(m, x, form="rows") - jr_frobenius(m, x, form="entries")) < 1e-10


@pytest.mark.parametrize("seed,depth", [(s, d) for s in range(5) for d in (2, 3, 4)])
def test_chain_identity(seed, depth):
    m = random_net(seed, depth=depth, act=["sigmoid", "relu"][seed % 2], bn=seed % 3 == 0)
    x = np.random.default_rng(100 + seed).normal(size=4)
    assert np.max(np.abs(chain_product(m, x) - jacobian_full(m, x).matrix)) < 1e-8


@pytest.mark.parametrize("scheme", ["fp", "stq", "4bit"])
def test_chain_identity_on_residual_cnn(scheme):
    m = build("tiny_cnn", (6, 6, 1), 2, scheme, seed=1, width=2, hidden=(6,))
    x = np.random.default_rng(0).normal(size=(6, 6, 1))
    assert np.max(np.abs(chain_product(m, x) - jacobian_full(m, x).matrix)) < 1e-8
    assert np.max(np.abs(jacobian_columns(m, x).matrix - jacobian_full(m, x).matrix)) < 1e-10


@settings(max_examples=30, deadline=None)
@given(x=arrays(np.float64, (4,), elements=st.floats(-3, 3, allow_nan=False)), seed=st.integers(0, 50))
def test_frobenius_non_negative_and_zero_iff_zero_matrix(x, seed):
    m = random_net(seed, act="relu")
    f = jr_frobenius(m, x)
    J = jacobian_full(m, x).matrix
    assert f >= 0 and (f == 0) == (not np.any(J))


def test_batchnorm_model_jacobian_is_deterministic():
    m = random_net(3, bn=True)
    x = np.random.default_rng(0).normal(size=4)
    assert np.array_equal(jacobian_full(m, x).matrix, jacobian_full(m, x).matrix)


def test_batch_and_bad_layer_rejected():
    m = random_net(0)
    with pytest.raises(ValueError, match="single sample"):
        jacobian_full(m, np.zeros((2, 4)))
    for l in (0, len(m.layers) + 1):
        with pytest.raises(ValueError):
            jacobian_per_layer(m, np.zeros(4), l)


@settings(max_examples=40, deadline=None)
@given(d=arrays(np.float64, (3,), elements=st.floats(-2, 2, allow_nan=False)).filter(lambda v: np.sum(v * v) > 1e-12))
def test_probe_on_linear_model_always_holds(d):
    W = np.array([[1.0, -2.0, 0.5], [0.3, 0.0, 4.0]])
    m = linear(W, [1.0, 2.0])
    x = np.array([0.1, 0.2, 0.3])
    r = sensitivity_probe(m, x, x + d, n_segment_samples=3)
    assert r.holds
    assert r.ratio == pytest.approx(np.sum((W @ d) ** 2) / np.sum(d * d), rel=1e-9)
    assert r.max_frob == pytest.approx(np.sum(W * W), rel=1e-12)


def test_probe_tiny_step_matches_first_order():
    m = random_net(2)
    x = np.random.default_rng(0).normal(size=4)
    d = 1e-6 * np.random.default_rng(1).normal(size=4)
    r = sensitivity_probe(m, x, x + d)
    J = jacobian_full(m, x).matrix
    assert r.holds
    assert r.ratio == pytest.approx(np.sum((J @ d) ** 2) / np.sum(d * d), rel=1e-4)


def test_probe_constant_head_and_errors(tmp_path):
    m = linear(np.zeros((2, 3)), np.ones(2))
    r = sensitivity_probe(m, np.zeros(3), np.ones(3))
    assert (r.ratio, r.max_frob, r.holds) == (0.0, 0.0, True)
    with pytest.raises(ValueError):
        sensitivity_probe(m, np.zeros(3), np.zeros(3))
    p = tmp_path / "probe.csv"
    write_probe_csv([r], p)
    assert p.read_text().splitlines() == ["ratio,max_frob,holds", "0.0,0.0,true"]


def test_per_layer_probe_on_dense_layer():
    m = random_net(4)
    x = np.random.default_rng(0).normal(size=4)
    r = sensitivity_probe(m, x, x + 0.3, layer=1)
    assert r.holds
