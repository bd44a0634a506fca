import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmix import model as M
from gmix import tensor as T
from gmix.data import gen_two_moons
from gmix.errors import ConfigError, NumericError, ValidationError
from gmix.sharpness import (
    SamConfig, ascent_pass, compute_delta, lipschitz_probe, partition_by_sensitivity,
    perturbed_grad, plus_size, sam_gradient, sharpness_value,
)

from conftest import random_batch, random_model


def quadratic(w):
    w = np.asarray(w)
    return np.array([0.5 * w @ w]), w.copy()


def test_config_validation():
    with pytest.raises(ConfigError):
        SamConfig(rho=-0.1)
    with pytest.raises(ConfigError):
        SamConfig(grad_floor=0.0)


def test_compute_delta_examples():
    rec = compute_delta(np.array([3.0, 4.0]), SamConfig(rho=0.5))
    assert np.allclose(rec.delta, [0.3, 0.4], atol=1e-15) and abs(rec.norm - 0.5) < 1e-15
    assert not compute_delta(np.array([3.0, 4.0]), SamConfig(rho=0.0)).delta.any()
    z = compute_delta(np.zeros(4), SamConfig())
    assert z.skipped and not z.delta.any() and z.base_grad_norm == 0.0
    with pytest.raises(NumericError):
        compute_delta(np.array([1.0, np.nan]), SamConfig())


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 10))
def test_delta_norm_and_direction(seed, rho):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=int(rng.integers(1, 100))) * 10.0 ** rng.uniform(-6, 6)
    rec = compute_delta(g, SamConfig(rho=rho))
    assert abs(rec.norm - rho) <= 1e-9 * rho
    cos = rec.delta @ g / (np.linalg.norm(rec.delta) * np.linalg.norm(g))
    assert cos >= 1 - 1e-12


def test_quadratic_oracles():
    # grad of 0.5|w|^2 at w + rho w/|w| is w + rho w/|w|
    pg = sam_gradient(quadratic, [1.0, 0.0], SamConfig(rho=0.5))
    assert np.allclose(pg.grad, [1.5, 0.0], atol=1e-15)
    r = sharpness_value(pg.losses_at_w.mean(), pg.losses_at_w_plus_delta.mean())
    assert r == pytest.approx(0.625, abs=1e-15)
    assert sharpness_value(1.25, 1.25) == 0.0
    with pytest.raises(NumericError):
        sharpness_value(np.nan, 1.0)


def test_perturbed_grad_contract():
    rng = np.random.default_rng(0)
    spec, params = random_model(rng, p=3, hidden=(8,), m=3)
    batch = random_batch(rng, 6, 3, 3, soft=True)
    before = M.params_to_vector(params).copy()
    T.backward_counter.reset()
    pg = perturbed_grad(params, batch, SamConfig(rho=0.5))
    assert T.backward_counter.count == 2
    assert np.array_equal(M.params_to_vector(params), before)
    _, g_plain = M.loss_and_grad(params, batch)
    _, g_shift = M.loss_and_grad(M.add_scaled(params, pg.record.delta, 1.0), batch)
    assert np.array_equal(pg.grad, g_shift)
    assert abs(pg.record.norm - 0.5) < 1e-12
    zero = perturbed_grad(params, batch, SamConfig(rho=0.0))
    assert np.max(np.abs(zero.grad - g_plain)) < 1e-12


def test_ascent_pass_matches_perturbed_grad_first_step():
    rng = np.random.default_rng(1)
    spec, params = random_model(rng)
    batch = random_batch(rng, 5, 3, 3)
    first = ascent_pass(params, batch, SamConfig())
    pg = perturbed_grad(params, batch, SamConfig())
    assert np.array_equal(first.record.delta, pg.record.delta)
    assert np.array_equal(first.losses, pg.losses_at_w)


def test_small_rho_ascends():
    rng = np.random.default_rng(2)
    ups = 0
    for _ in range(200):
        spec, params = random_model(rng, p=2, hidden=(6,), m=2)
        batch = random_batch(rng, 8, 2, 2, soft=True)
        pg = perturbed_grad(params, batch, SamConfig(rho=1e-3))
        ups += pg.losses_at_w_plus_delta.mean() >= pg.losses_at_w.mean()
    assert ups >= 0.99 * 200


def test_partition_examples():
    p = partition_by_sensitivity([3.0, 1.0, 4.0, 2.0], 0.5)
    assert p.plus_indices.tolist() == [0, 2] and p.minus_indices.tolist() == [1, 3] and p.xi == 3.0
    full = partition_by_sensitivity([0.1, 0.2, 0.3], 1.0)
    assert full.n_plus == 3 and full.n_minus == 0
    tie = partition_by_sensitivity([1.0, 1.0, 1.0, 1.0], 0.5)
    assert tie.plus_indices.tolist() == [0, 1]


def test_partition_errors():
    for g in (0.0, -0.5, 1.5):
        with pytest.raises(ConfigError):
            partition_by_sensitivity([1.0, 2.0], g)
    with pytest.raises(ValidationError):
        partition_by_sensitivity([], 0.5)
    with pytest.raises(NumericError):
        partition_by_sensitivity([1.0, np.nan], 0.5)


def test_plus_size_rounds_half_up_with_floor_one():
    assert plus_size(0.5, 5) == 3     # 2.5 rounds up
    assert plus_size(0.01, 10) == 1
    assert plus_size(0.5, 128) == 64
    assert plus_size(1.0, 7) == 7


def brute(scores, gamma):
    n = len(scores)
    k = max(1, int(np.floor(gamma * n + 0.5)))
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    return sorted(order[:k]), sorted(order[k:]), scores[order[k - 1]]


@settings(max_examples=500, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=30) | st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30),
       st.floats(0.001, 1.0))
def test_partition_matches_full_sort(scores, gamma):
    p = partition_by_sensitivity(scores, gamma)
    plus, minus, xi = brute([float(s) for s in scores], gamma)
    assert p.plus_indices.tolist() == plus and p.minus_indices.tolist() == minus
    assert p.xi == xi
    if minus:
        assert min(p.scores[plus]) >= max(p.scores[minus])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=30), st.floats(0.01, 1.0), st.floats(1e-3, 1e3))
def test_partition_is_scale_invariant(scores, gamma, c):
    a = partition_by_sensitivity(scores, gamma)
    b = partition_by_sensitivity(np.asarray(scores) * c, gamma)
    # scaling can merge distinct floats only through underflow, which these bounds exclude
    if len(set(scores)) == len(set((np.asarray(scores) * c).tolist())):
        assert a.plus_indices.tolist() == b.plus_indices.tolist()


def test_lipschitz_probe_linear_mse_oracle():
    ds = gen_two_moons(200, 0.2, 0)
    spec = M.MlpSpec(2, (), 2)
    params = M.init_model(spec, 0)
    aug = np.hstack([ds.features, np.ones((ds.n, 1))])
    # weight Hessian of the mean MSE is (A^T A / n) kron I_m; input Hessian is W W^T
    lam_w = np.linalg.eigvalsh(aug.T @ aug / ds.n).max()
    w = params.layers[0][0]
    lam_x = np.linalg.eigvalsh(w @ w.T).max()
    draws = [lipschitz_probe(params, ds, 50, 0.1, np.random.default_rng(s), loss="mse") for s in range(4)]
    k1 = np.array([d[0] for d in draws])
    assert np.all(k1 <= lam_w * (1 + 1e-9))
    assert k1.max() / k1.min() < 1.10
    assert all(d[1] <= lam_x * (1 + 1e-9) and d[1] > 0.9 * lam_x for d in draws)


def test_lipschitz_probe_radius_stability():
    ds = gen_two_moons(200, 0.2, 0)
    params = M.init_model(M.MlpSpec(2, (), 2), 0)
    a = lipschitz_probe(params, ds, 50, 0.02, np.random.default_rng(0))[0]
    b = lipschitz_probe(params, ds, 50, 0.01, np.random.default_rng(0))[0]
    assert abs(a - b) / b < 0.2


def test_lipschitz_probe_zero_radius_never_divides_by_zero():
    ds = gen_two_moons(20, 0.2, 0)
    params = M.init_model(M.MlpSpec(2, (4,), 2), 0)
    assert lipschitz_probe(params, ds, 3, 0.0, np.random.default_rng(0)) == (0.0, 0.0)
    with pytest.raises(ValidationError):
        lipschitz_probe(params, ds, 0, 0.1, np.random.default_rng(0))
