import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import finite_difference_grad, gradient_mismatch, random_params
from gossip_dfl import data as D
from gossip_dfl import model as M
from gossip_dfl.numerics import ParameterError, SeededRng, ShapeError


def small_cfg(**kw):
    base = dict(input_dim=6, hidden_dims=(4,), latent_dim=2, num_classes=3)
    base.update(kw)
    return M.ModelConfig(**base)


def identity_params(d, classes=2):
    shapes = (M.LayerShape(M.ENCODER, d, d), M.LayerShape(M.HEAD, d, classes))
    views = [{"W": np.eye(d), "b": np.zeros(d)}, {"W": np.zeros((classes, d)), "b": np.zeros(classes)}]
    return M.ModelParams.from_views(shapes, views)


# ---------------------------------------------------------------- params layout


def test_layer_layout_mirrors_encoder():
    kinds = [(s.kind, s.n_in, s.n_out) for s in M.build_layers(M.ModelConfig(input_dim=100))]
    assert kinds == [("encoder", 100, 64), ("encoder", 64, 32), ("encoder", 32, 16),
                     ("decoder", 16, 32), ("decoder", 32, 64), ("decoder", 64, 100),
                     ("head", 16, 2)]


def test_flat_roundtrip(rng):
    cfg = small_cfg(attention_enabled=True, attention_chunk=3)
    p = M.init_params(cfg, rng)
    assert p.size == sum(s.n_params for s in p.layer_shapes)
    q = M.ModelParams.from_views(p.layer_shapes, p.views())
    assert q == p


def test_params_are_immutable(rng):
    p = M.init_params(small_cfg(), rng)
    with pytest.raises(ValueError):
        p.flat[0] = 1.0


def test_init_is_glorot_uniform():
    cfg = M.ModelConfig(input_dim=100)
    p = M.init_params(cfg, SeededRng(0))
    W = p.views()[0]["W"]
    r = math.sqrt(6 / (100 + 64))
    assert np.abs(W).max() <= r
    assert np.abs(W).max() > 0.95 * r
    assert not p.views()[0]["b"].any()


@pytest.mark.parametrize("kw", [dict(hidden_dims=()), dict(latent_dim=6), dict(num_classes=1),
                                dict(attention_enabled=True, attention_chunk=4),
                                dict(attention_enabled=True, attention_heads=2, attention_chunk=3)])
def test_config_validation(kw):
    with pytest.raises(ParameterError):
        small_cfg(**kw)


# ---------------------------------------------------------------- forward / loss


def test_zero_params_give_zero_reconstruction_uniform_probs():
    cfg = small_cfg()
    p = M.ModelParams(M.build_layers(cfg), np.zeros(sum(s.n_params for s in M.build_layers(cfg))))
    tr = M.forward(p, cfg, np.linspace(0, 1, 6))
    assert not tr.reconstruction.any()
    np.testing.assert_allclose(tr.class_probs, np.full(3, 1 / 3), atol=1e-15)


def test_identity_layer_reconstruction_is_leaky_relu():
    cfg = M.ModelConfig(input_dim=4, hidden_dims=(2,), latent_dim=2)
    p = identity_params(4)
    v = np.array([0.0, 0.25, 0.5, 1.0])
    tr = M.forward(p, cfg, v)
    expected = np.where(v > 0, v, 0.01 * v)
    np.testing.assert_array_equal(tr.reconstruction, expected)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_class_probs_on_simplex(seed, attention):
    rng = SeededRng(seed)
    cfg = small_cfg(attention_enabled=attention, attention_chunk=3)
    p = M.init_params(cfg, rng)
    p = p.with_flat(p.flat * 5)
    tr = M.forward(p, cfg, rng.uniform(size=6))
    assert np.all(tr.class_probs >= 0)
    assert abs(tr.class_probs.sum() - 1) <= 1e-9


def test_forward_shape_error(rng):
    cfg = small_cfg()
    with pytest.raises(ShapeError):
        M.forward(M.init_params(cfg, rng), cfg, np.zeros(5))


def test_loss_examples():
    cfg = M.ModelConfig(input_dim=2, hidden_dims=(2,), latent_dim=1)
    v = np.array([1.0, 0.0])
    perfect = M.ForwardTrace([], [], np.zeros(1), v.copy(), np.array([0.5, 0.5]))
    assert M.loss(perfect, v, 0, 0.0) == 0.0
    zero = M.ForwardTrace([], [], np.zeros(1), np.zeros(2), np.array([0.5, 0.5]))
    assert M.loss(zero, v, 0, 0.0) == 0.5
    assert M.loss(zero, v, 1, 1.0) == pytest.approx(0.5 + math.log(2), abs=1e-12)
    with pytest.raises(ParameterError):
        M.loss(zero, v, 2, 1.0)
    del cfg


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 3))
def test_loss_nonnegative(seed, lam):
    rng = SeededRng(seed)
    cfg = small_cfg()
    p = M.init_params(cfg, rng)
    v = rng.uniform(size=6)
    assert M.loss(M.forward(p, cfg, v), v, int(rng.integers(0, 3)), lam) >= 0


# ---------------------------------------------------------------- gradients


def test_gradient_zero_at_identity_fit():
    cfg = M.ModelConfig(input_dim=4, hidden_dims=(2,), latent_dim=2)
    p = identity_params(4)
    g = M.backward(p, cfg, np.array([0.1, 0.4, 0.7, 0.9]), 1, 0.0)
    assert g.shape == p.flat.shape
    assert not g.any()


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences_6_4_2(seed):
    rng = SeededRng(seed)
    cfg = small_cfg()
    p = random_params(cfg, rng)
    v = rng.uniform(size=6)
    lam = float(rng.uniform(0, 2))
    label = int(rng.integers(0, 3))
    g = M.backward(p, cfg, v, label, lam)
    fd = finite_difference_grad(p, cfg, v, label, lam)
    assert gradient_mismatch(g, fd).size == 0


@pytest.mark.parametrize("seed", range(3))
def test_backward_with_attention_matches_finite_differences(seed):
    rng = SeededRng(100 + seed)
    cfg = small_cfg(attention_enabled=True, attention_chunk=2)
    p = random_params(cfg, rng)
    v = rng.uniform(size=6)
    g = M.backward(p, cfg, v, 1, 0.7)
    fd = finite_difference_grad(p, cfg, v, 1, 0.7)
    assert gradient_mismatch(g, fd).size == 0


def test_backward_linear_in_lambda(rng):
    cfg = small_cfg()
    p = M.init_params(cfg, rng)
    v = rng.uniform(size=6)
    g0, g1, g2 = (M.backward(p, cfg, v, 2, lam) for lam in (0.0, 1.0, 2.0))
    np.testing.assert_allclose(g2 - g0, 2 * (g1 - g0), atol=1e-9, rtol=0)


def test_minibatch_singleton_and_copies(rng):
    cfg = small_cfg()
    p = M.init_params(cfg, rng)
    v = rng.uniform(size=6)
    g = M.backward(p, cfg, v, 1, 1.0)
    np.testing.assert_allclose(M.minibatch_gradient(p, cfg, [(v, 1)], 1.0), g, rtol=1e-13, atol=1e-16)
    np.testing.assert_allclose(M.minibatch_gradient(p, cfg, [(v, 1)] * 5, 1.0), g, rtol=1e-12, atol=1e-16)


def test_minibatch_is_mean_of_backward(rng):
    cfg = small_cfg(attention_enabled=True, attention_chunk=3)
    p = M.init_params(cfg, rng)
    batch = [(rng.uniform(size=6), int(rng.integers(0, 3))) for _ in range(4)]
    expected = np.mean([M.backward(p, cfg, v, y, 0.5) for v, y in batch], axis=0)
    np.testing.assert_allclose(M.minibatch_gradient(p, cfg, batch, 0.5), expected, rtol=1e-10, atol=1e-15)


def test_minibatch_empty(rng):
    cfg = small_cfg()
    with pytest.raises(ParameterError):
        M.minibatch_gradient(M.init_params(cfg, rng), cfg, [], 1.0)


def test_backward_rejects_bad_label(rng):
    cfg = small_cfg()
    with pytest.raises(ParameterError):
        M.backward(M.init_params(cfg, rng), cfg, np.zeros(6), 3, 1.0)


def test_sgd_loss_decreases_over_ten_epochs():
    rng = SeededRng(21)
    ds = D.synthesize(1000, 20, 0.2, rng.child(1))
    cfg = M.ModelConfig(input_dim=20)
    p = M.init_params(cfg, rng.child(2))
    _, losses = M.sgd_train(p, cfg, ds.features, ds.labels, lr=1e-3, batch_size=100, epochs=10,
                            rng=rng.child(3))
    non_decreasing = sum(b >= a for a, b in zip(losses[:-1], losses[1:]))
    assert non_decreasing <= 1
    assert losses[-1] < losses[0]


# ---------------------------------------------------------------- threshold / classify


def test_threshold_flat():
    assert M.select_threshold([0.1, 0.1, 0.1, 0.1]).tau == 0.1


def test_threshold_knee():
    # second differences of the sorted curve: 0, 0.77, -0.73 -> knee at 0.12
    assert M.select_threshold([0.1, 0.11, 0.12, 0.9, 0.95]).tau == 0.12


@given(st.lists(st.floats(0, 10), min_size=3, max_size=40), st.randoms())
def test_threshold_permutation_invariant(errors, r):
    shuffled = list(errors)
    r.shuffle(shuffled)
    assert M.select_threshold(errors).tau == M.select_threshold(shuffled).tau


def test_threshold_needs_three():
    with pytest.raises(ParameterError):
        M.select_threshold([0.1, 0.2])


def test_classify_examples():
    v = np.array([1.0, 0.0])
    tr = M.ForwardTrace([], [], np.zeros(1), v.copy(), np.array([0.5, 0.5]))
    assert M.classify(tr, v, M.AnomalyThreshold(0.1)) == (False, 0)
    bad = M.ForwardTrace([], [], np.zeros(1), np.zeros(2), np.array([0.3, 0.7]))
    assert M.classify(bad, v, M.AnomalyThreshold(0.2)) == (True, 1)
