from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmix import model as M
from gmix import tensor as T
from gmix.errors import CheckpointError, ShapeError, ValidationError

from conftest import random_batch, random_model


def test_spec_validation():
    with pytest.raises(ValidationError):
        M.MlpSpec(0, (4,), 2)
    with pytest.raises(ValidationError):
        M.MlpSpec(2, (0,), 2)
    with pytest.raises(ValidationError):
        M.MlpSpec(2, (4,), 1)
    assert M.MlpSpec(3, (4,), 2).total_dim == 3 * 4 + 4 + 4 * 2 + 2


def test_init_is_deterministic_with_zero_bias():
    spec = M.MlpSpec(4, (8, 8), 3)
    a, b = M.init_model(spec, 11), M.init_model(spec, 11)
    assert np.array_equal(M.params_to_vector(a), M.params_to_vector(b))
    assert all(not bias.any() for _, bias in a.layers)


def test_he_std_for_fan_in_two():
    # expected std sqrt(2/2) = 1
    w = M.init_model(M.MlpSpec(2, (5000,), 2), 0).layers[0][0]
    assert w.size == 10_000
    assert abs(w.std() - 1.0) < 0.05


def test_zero_model_gives_ln_m():
    spec = M.MlpSpec(3, (4,), 5)
    zero = M.vector_to_params(np.zeros(spec.total_dim), spec)
    batch = random_batch(np.random.default_rng(0), 6, 3, 5)
    fp = M.forward_losses(zero, batch)
    assert np.allclose(fp.losses.data, np.log(5), atol=1e-12)


def test_mean_loss_and_duplication_invariance():
    rng = np.random.default_rng(1)
    spec, params = random_model(rng)
    batch = random_batch(rng, 7, 3, 3)
    fp = M.forward_losses(params, batch)
    assert abs(fp.mean_loss.item() - fp.losses.data.mean()) < 1e-12
    dup = SimpleNamespace(x=np.vstack([batch.x, batch.x]), y=np.vstack([batch.y, batch.y]))
    assert abs(M.forward_losses(params, dup).mean_loss.item() - fp.mean_loss.item()) < 1e-12


def test_forward_dimension_errors():
    rng = np.random.default_rng(2)
    spec, params = random_model(rng)
    with pytest.raises(ShapeError):
        M.forward_losses(params, random_batch(rng, 4, 2, 3))
    with pytest.raises(ShapeError):
        M.forward_losses(params, random_batch(rng, 4, 3, 2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    spec, params = random_model(rng)
    batch = random_batch(rng, 6, 3, 3, soft=True)
    perm = rng.permutation(6)
    a = M.losses_only(params, batch)
    b = M.losses_only(params, SimpleNamespace(x=batch.x[perm], y=batch.y[perm]))
    assert np.array_equal(a[perm], b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_flat_view_round_trip_bit_exact(seed):
    rng = np.random.default_rng(seed)
    spec, params = random_model(rng, p=int(rng.integers(1, 5)), hidden=(int(rng.integers(1, 6)),) * int(rng.integers(0, 3)))
    v = M.params_to_vector(params)
    back = M.vector_to_params(v, spec)
    assert all(np.array_equal(w1, w2) and np.array_equal(b1, b2)
               for (w1, b1), (w2, b2) in zip(params.layers, back.layers))
    assert np.array_equal(M.params_to_vector(back), v)


def test_flat_ordering_is_layer_major_weights_then_bias():
    spec = M.MlpSpec(2, (3,), 2)
    v = np.arange(spec.total_dim, dtype=float)
    p = M.vector_to_params(v, spec)
    assert np.array_equal(p.layers[0][0], np.arange(6.0).reshape(2, 3))
    assert np.array_equal(p.layers[0][1], [6.0, 7, 8])
    assert np.array_equal(p.layers[1][0], np.arange(9.0, 15).reshape(3, 2))


def test_add_scaled():
    rng = np.random.default_rng(3)
    spec, params = random_model(rng)
    before = M.params_to_vector(params).copy()
    v = rng.normal(size=spec.total_dim)
    same = M.add_scaled(params, v, 0.0)
    assert np.array_equal(M.params_to_vector(same), before)
    there_and_back = M.add_scaled(M.add_scaled(params, v, 0.7), v, -0.7)
    assert np.max(np.abs(M.params_to_vector(there_and_back) - before)) < 1e-12
    assert np.array_equal(M.params_to_vector(params), before)
    with pytest.raises(ShapeError):
        M.add_scaled(params, v[:-1], 1.0)
    with pytest.raises(ShapeError):
        M.vector_to_params(v[:-1], spec)


def test_mlp_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    spec, params = random_model(rng, p=3, hidden=(6, 5), m=3)
    batch = random_batch(rng, 5, 3, 3, soft=True)
    w = M.params_to_vector(params)
    err = T.grad_check(lambda f: M.forward_flat(f, spec, batch), w)
    assert err < 1e-4
    _, g = M.loss_and_grad(params, batch)
    x = T.Tensor(w, requires_grad=True)
    T.backward(M.forward_flat(x, spec, batch))
    assert np.allclose(g, x.grad, rtol=0, atol=1e-14)


def test_weighted_loss_and_grad():
    rng = np.random.default_rng(6)
    spec, params = random_model(rng)
    batch = random_batch(rng, 4, 3, 3)
    wts = np.array([0.25] * 4)
    _, g1 = M.loss_and_grad(params, batch)
    _, g2 = M.loss_and_grad(params, batch, weights=wts)
    assert np.allclose(g1, g2, rtol=0, atol=1e-15)


def test_per_example_grads_match_individual_backward():
    rng = np.random.default_rng(7)
    spec, params = random_model(rng, p=4, hidden=(6, 5), m=3)
    batch = random_batch(rng, 6, 4, 3, soft=True)
    losses, G = M.per_example_grads(params, batch)
    for i in range(6):
        one = SimpleNamespace(x=batch.x[i:i + 1], y=batch.y[i:i + 1])
        li, gi = M.loss_and_grad(params, one)
        assert abs(li[0] - losses[i]) < 1e-12
        assert np.max(np.abs(G[i] - gi)) < 1e-10


def test_factor_algebra_matches_materialized_gradients():
    rng = np.random.default_rng(8)
    spec, params = random_model(rng, p=4, hidden=(6,), m=3)
    batch = random_batch(rng, 8, 4, 3)
    _, factors = M.losses_and_factors(params, batch)
    G = M.factor_grads(factors)
    rows = np.array([1, 4, 5])
    assert np.allclose(M.factor_row_mean(factors, rows), G[rows].mean(axis=0), atol=1e-14)
    v = rng.normal(size=spec.total_dim)
    assert np.allclose(M.factor_dots(factors, v, spec), G @ v, atol=1e-12)


def test_subset_mean_grad_equals_subset_batch_gradient():
    rng = np.random.default_rng(9)
    spec, params = random_model(rng)
    batch = random_batch(rng, 8, 3, 3)
    rows = np.array([0, 3, 6])
    g = M.subset_mean_grad(M.forward_losses(params, batch), rows)
    _, ref = M.loss_and_grad(params, SimpleNamespace(x=batch.x[rows], y=batch.y[rows]))
    assert np.allclose(g, ref, rtol=0, atol=1e-14)


def test_predict_ties_go_to_lowest_class():
    spec = M.MlpSpec(2, (), 3)
    zero = M.vector_to_params(np.zeros(spec.total_dim), spec)
    assert np.array_equal(M.predict(zero, np.ones((3, 2))), [0, 0, 0])


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    spec, params = random_model(rng, hidden=(4, 3))
    path = tmp_path / "m.ckpt"
    M.save_checkpoint(path, params, seed=42, epoch=7)
    ck = M.load_checkpoint(path)
    assert ck.seed == 42 and ck.epoch == 7 and ck.params.spec == spec
    assert np.array_equal(M.params_to_vector(ck.params), M.params_to_vector(params))


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(CheckpointError, match="magic"):
        M.load_checkpoint(bad)
    rng = np.random.default_rng(11)
    _, params = random_model(rng)
    good = tmp_path / "g.ckpt"
    M.save_checkpoint(good, params, 0, 0)
    good.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="parameters"):
        M.load_checkpoint(good)
