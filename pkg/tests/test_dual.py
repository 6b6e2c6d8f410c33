import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import random_instance, random_net, unit
from invprop.bounds import classify, crown_alpha, crown_bounds, initial_bounds
from invprop.dual import (Config, DualState, LinearObjective, StaleClassificationError,
                          bound_halfspaces, eval_g, grad_g, invprop, optimize_batch)
from invprop.network import InputBox, OutputSet, fold_output_constraints, forward
from invprop.oracle import exact_min_milp


def random_dual(net, k, rng, gamma_scale=1.0):
    dual = DualState.init(net, k)
    dual.alpha = [None] + [rng.uniform(0.05, 0.95, a.shape) for a in dual.alpha[1:]]
    dual.gamma = rng.exponential(gamma_scale, dual.gamma.shape)
    return dual


def test_config_roundtrip(tmp_path):
    cfg = Config(iters=5, lr=0.3)
    assert Config.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        Config.from_dict({"iterz": 3})
    path = tmp_path / "c.json"
    path.write_text('{"iters": 7}')
    assert Config.from_json(path).iters == 7
    assert cfg.replace(threads=3).threads == 3


def test_objective_shape_checks(rng):
    net = random_net(rng, [2, 3, 1])
    with pytest.raises(ValueError):
        LinearObjective([np.ones((1, 2)), np.ones((2, 3))])
    with pytest.raises(ValueError):
        LinearObjective.on_input(net, np.ones(3)).check(net)
    with pytest.raises(ValueError):
        LinearObjective([np.array([[np.inf, 0.0]]), np.zeros((1, 3))])
    obj = LinearObjective.both_senses(net, 1)
    assert obj.size == 6
    assert np.array_equal(obj.coeffs[1][3:], -np.eye(3))


def test_stale_classes_rejected(rng):
    net, box, out, _ = random_instance(rng)
    f = fold_output_constraints(net, out)
    store = initial_bounds(net, box)
    cls = classify(store)
    store.tighten(0, lo=store.lo[0])
    obj = LinearObjective.on_input(f, np.eye(net.input_dim))
    with pytest.raises(StaleClassificationError):
        eval_g(f, store, obj, DualState.init(f, obj.size), cls)


def test_gradient_matches_finite_differences(rng):
    for _ in range(5):
        net, box, out, _ = random_instance(rng, hidden=[5, 4])
        f = fold_output_constraints(net, out)
        store = initial_bounds(net, box)
        obj = LinearObjective.on_input(f, unit(rng, net.input_dim))
        dual = random_dual(f, 1, rng)
        _, dalpha, dgamma = grad_g(f, store, obj, dual)
        h = 1e-5
        for i in range(1, f.depth):
            for j in range(dual.alpha[i].shape[1]):
                up, dn = dual.copy(), dual.copy()
                up.alpha[i] = up.alpha[i].copy()
                dn.alpha[i] = dn.alpha[i].copy()
                up.alpha[i][0, j] += h
                dn.alpha[i][0, j] -= h
                fd = (eval_g(f, store, obj, up).bound - eval_g(f, store, obj, dn).bound) / (2 * h)
                assert dalpha[i][0, j] == pytest.approx(fd[0], rel=1e-4, abs=1e-7)
        for j in range(dual.gamma.shape[1]):
            up, dn = dual.copy(), dual.copy()
            up.gamma = up.gamma.copy()
            dn.gamma = dn.gamma.copy()
            up.gamma[0, j] += h
            dn.gamma[0, j] -= h
            fd = (eval_g(f, store, obj, up).bound - eval_g(f, store, obj, dn).bound) / (2 * h)
            assert dgamma[0, j] == pytest.approx(fd[0], rel=1e-4, abs=1e-7)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_weak_duality_against_milp(seed):
    rng = np.random.default_rng(seed)
    net, box, out, x_star = random_instance(rng, hidden=[4, 3])
    f = fold_output_constraints(net, out)
    store = initial_bounds(net, box)
    c = unit(rng, net.input_dim)
    milp = exact_min_milp(net, box, out, c).value
    assert milp <= c @ x_star + 1e-9
    obj = LinearObjective.on_input(f, np.tile(c, (20, 1)))
    g = eval_g(f, store, obj, random_dual(f, 20, rng)).bound
    assert np.all(g <= milp + 1e-6)


def test_positive_homogeneity(rng):
    net, box, out, _ = random_instance(rng)
    f = fold_output_constraints(net, out)
    store = initial_bounds(net, box)
    c = unit(rng, net.input_dim)
    dual = random_dual(f, 1, rng)
    base = eval_g(f, store, LinearObjective.on_input(f, c), dual).bound[0]
    scaled = dual.copy()
    scaled.gamma = 3.0 * dual.gamma
    val = eval_g(f, store, LinearObjective.on_input(f, 3.0 * c), scaled).bound[0]
    assert val == pytest.approx(3.0 * base, rel=1e-12, abs=1e-12)


def test_gamma_zero_is_backward_substitution(rng):
    for _ in range(5):
        net = random_net(rng, [2, 5, 4, 3, 1])
        box = InputBox([-1, -1], [1, 1])
        store = initial_bounds(net, box)
        f = fold_output_constraints(net, OutputSet([[1.0]], [0.0]))
        for layer in range(1, net.depth):
            obj = LinearObjective.both_senses(f, layer)
            dual = DualState.init(f, obj.size, gamma_init=0.0)
            for i in range(1, layer):
                dual.alpha[i][:] = crown_alpha(store.lo[i], store.hi[i])
            g = eval_g(f, store, obj, dual).bound
            lo, hi = crown_bounds(net, store, layer)
            n = lo.shape[0]
            assert np.max(np.abs(g[:n] - lo)) < 1e-9
            assert np.max(np.abs(-g[n:] - hi)) < 1e-9


def test_ascent_improves_and_stays_sound(rng):
    net, box, out, x_star = random_instance(rng, hidden=[6, 5])
    f = fold_output_constraints(net, out)
    store = initial_bounds(net, box)
    c = np.vstack([np.eye(net.input_dim), -np.eye(net.input_dim)])
    obj = LinearObjective.on_input(f, c)
    start = eval_g(f, store, obj, DualState.init(f, obj.size)).bound
    best, _ = optimize_batch(f, store, obj, Config(iters=100))
    assert np.all(best >= start - 1e-12)
    for k, ck in enumerate(c):
        assert best[k] <= exact_min_milp(net, box, out, ck).value + 1e-6


def test_toy_tightening(toy):
    net, box, out = toy
    res = invprop(net, initial_bounds(net, box), out, Config())
    assert res.store.lo[1][0] == pytest.approx(0.0, abs=1e-3)
    assert res.store.hi[1][0] == pytest.approx(0.01, abs=1e-3)
    hs = dict((float(c[0]), lb) for c, lb in res.halfspaces())
    assert hs[1.0] == pytest.approx(0.0, abs=1e-3)
    assert -hs[-1.0] == pytest.approx(0.01, abs=1e-3)
    plain = invprop(net, initial_bounds(net, box), out, Config(use_output_constraint=False))
    assert plain.store.lo[1][0] == pytest.approx(-2.0)
    assert plain.store.hi[1][0] == pytest.approx(2.0)


def test_invprop_histories_are_monotone(rng):
    net, box, out, _ = random_instance(rng, hidden=[6, 6])
    res = invprop(net, initial_bounds(net, box), out, Config(iters=50))
    sums = [sum(w) for w in res.width_history]
    assert all(b <= a + 1e-12 for a, b in zip(sums, sums[1:]))
    lbs = np.array(res.bound_history)
    assert np.all(np.diff(lbs, axis=0) >= -1e-12)
    assert len(res.box_history) == len(res.width_history)


def test_sampled_preimage_inside_halfspaces(rng):
    for _ in range(4):
        net, box, out, x_star = random_instance(rng)
        dirs = np.array([[1.0, 0.5] + [0.0] * (net.input_dim - 2), [-1.0] + [0.0] * (net.input_dim - 1)])
        hs = bound_halfspaces(net, initial_bounds(net, box), out, dirs, Config(iters=60))
        x = box.sample(20000, rng)
        feas = x[out.satisfied(forward(net, x))]
        for c, lb in hs:
            assert np.all(feas @ c >= lb - 1e-9)


def test_infeasible_detected():
    from invprop.network import AffineLayer, Network
    net = Network((AffineLayer([[1.0], [-1.0]], [0.0, 0.0]), AffineLayer([[1.0, 1.0]], [0.0])))
    # |x| on [-1, 1] never reaches 5
    res = invprop(net, initial_bounds(net, InputBox([-1.0], [1.0])),
                  OutputSet([[-1.0]], [5.0]), Config(iters=50))
    assert res.infeasible


def test_threads_do_not_change_results(rng):
    net, box, out, _ = random_instance(rng, hidden=[6, 6])
    f = fold_output_constraints(net, out)
    store = initial_bounds(net, box)
    obj = LinearObjective.on_input(f, rng.standard_normal((70, net.input_dim)))
    a, _ = optimize_batch(f, store, obj, Config(iters=30))
    b, _ = optimize_batch(f, store, obj, Config(iters=30, threads=3))
    assert np.array_equal(a, b)
