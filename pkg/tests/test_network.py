import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import random_net
from invprop.network import (AffineLayer, InputBox, Network, NetworkFormatError, OutputSet,
                             append_affine, concat_networks, encode_closed_loop, encode_max_gap,
                             fold_output_constraints, forward, fuse_affine, identity_layer,
                             interval_output_bounds, load_network, max_gap_shift,
                             network_from_dict, stack, unroll_closed_loop)


def relerr(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))


def test_toy_network_matches_hand_computation(toy):
    net, box, out = toy
    # y = relu(x) + relu(x + 1)
    xs = np.linspace(-2, 2, 9)[:, None]
    want = np.maximum(xs, 0) + np.maximum(xs + 1, 0)
    assert np.allclose(forward(net, xs), want)
    assert out.satisfied(forward(net, np.array([0.005])))
    assert not out.satisfied(forward(net, np.array([0.02])))


def test_loader_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"layers": [{"weights": [[1.0, 2.0]], "bias": [0.0, 1.0]}]}))
    with pytest.raises(NetworkFormatError):
        load_network(bad)
    bad.write_text("{not json")
    with pytest.raises(NetworkFormatError):
        load_network(bad)
    with pytest.raises(NetworkFormatError):
        network_from_dict({"layers": [{"weights": [[1.0, 2.0], [3.0]], "bias": [0, 0]}]})
    with pytest.raises(NetworkFormatError):
        network_from_dict({"layers": [{"weights": [[np.nan]], "bias": [0.0]}]})
    with pytest.raises(NetworkFormatError):
        Network((AffineLayer(np.ones((3, 2)), np.zeros(3)), AffineLayer(np.ones((1, 2)), [0.0])))


def test_roundtrip_dict(rng):
    net = random_net(rng, [3, 4, 2])
    again = network_from_dict(json.loads(json.dumps(net.to_dict())))
    x = rng.standard_normal((5, 3))
    assert np.array_equal(forward(net, x), forward(again, x))


def test_box_validation():
    with pytest.raises(NetworkFormatError):
        InputBox([1.0], [0.0])
    with pytest.raises(NetworkFormatError):
        InputBox([0.0, 0.0], [1.0])
    box = InputBox([0, -1], [2, 1])
    assert box.volume() == pytest.approx(4.0)
    assert list(box.contains(np.array([[1, 0], [3, 0]]))) == [True, False]


def test_output_set_from_box_and_membership():
    out = OutputSet.from_box([0, 0], [1, 2])
    y = np.array([[0.5, 1.0], [1.5, 1.0], [0.0, 2.0]])
    assert list(out.satisfied(y)) == [True, False, True]
    with pytest.raises(NetworkFormatError):
        OutputSet(np.ones((2, 2)), np.ones(3))


def test_fold_identity_and_toy():
    net = Network((AffineLayer([[2.0]], [1.0]),))
    same = fold_output_constraints(net, OutputSet(np.eye(1), np.zeros(1)))
    assert np.array_equal(same.layers[0].weights, net.layers[0].weights)
    # 1 <= y <= 1.02  ->  (1 - y, y - 1.02)
    out = OutputSet([[-1.0], [1.0]], [1.0, -1.02])
    folded = fold_output_constraints(net, out)
    x = np.array([[0.3]])
    y = forward(net, x)[0, 0]
    assert np.allclose(forward(folded, x)[0], [1 - y, y - 1.02])
    with pytest.raises(ValueError):
        fold_output_constraints(net, OutputSet(np.ones((1, 2)), [0.0]))


def test_fold_random(rng):
    net = random_net(rng, [3, 5, 4])
    out = OutputSet(rng.standard_normal((3, 4)), rng.standard_normal(3))
    x = rng.standard_normal((50, 3))
    want = forward(net, x) @ out.H.T + out.d
    assert relerr(forward(fold_output_constraints(net, out), x), want) < 1e-9


def test_fuse_is_associative(rng):
    a, b, c = (AffineLayer(rng.standard_normal((4, 4)), rng.standard_normal(4)) for _ in range(3))
    left = fuse_affine(fuse_affine(a, b), c)
    right = fuse_affine(a, fuse_affine(b, c))
    assert np.max(np.abs(left.weights - right.weights)) < 1e-12
    assert np.max(np.abs(left.bias - right.bias)) < 1e-12
    with pytest.raises(ValueError):
        fuse_affine(a, AffineLayer(np.ones((1, 3)), [0.0]))


def test_append_and_concat(rng):
    net = random_net(rng, [2, 6, 3])
    tail = AffineLayer(rng.standard_normal((2, 3)), rng.standard_normal(2))
    x = rng.standard_normal((20, 2))
    assert relerr(forward(append_affine(net, tail), x), tail(forward(net, x))) < 1e-9
    other = random_net(rng, [3, 4, 1])
    cat = concat_networks(net, other)
    assert cat.depth == net.depth + other.depth - 1
    assert relerr(forward(cat, x), forward(other, forward(net, x))) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10_000))
def test_stack_is_composition(t, seed):
    rng = np.random.default_rng(seed)
    net = random_net(rng, [2, 5, 2], scale=0.8)
    x = rng.standard_normal((10, 2))
    want = x
    for _ in range(t):
        want = forward(net, want)
    assert relerr(forward(stack(net, t), x), want) < 1e-9


def test_stack_rejects_non_square(rng):
    with pytest.raises(ValueError):
        stack(random_net(rng, [2, 3, 1]), 2)
    with pytest.raises(ValueError):
        stack(random_net(rng, [2, 3, 2]), 0)


def closed_loop_truth(A, B, policy, x):
    return x @ A.T + forward(policy, x) @ B.T


def test_closed_loop_encoding(rng):
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    B = np.array([[0.5], [1.0]])
    policy = random_net(rng, [2, 6, 4, 1])
    box = InputBox([-3, -2], [4, 2])
    enc = encode_closed_loop(A, B, policy, box)
    assert enc.hidden_sizes == [8, 6]
    x = box.sample(500, rng)
    assert relerr(forward(enc, x), closed_loop_truth(A, B, policy, x)) < 1e-9
    with pytest.raises(ValueError):
        encode_closed_loop(A, B, policy, None)
    with pytest.raises(ValueError):
        encode_closed_loop(A, np.ones((2, 2)), policy, box)


def test_closed_loop_carry_neurons_stay_active(rng):
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    B = np.array([[0.5], [1.0]])
    policy = random_net(rng, [2, 5, 1])
    box = InputBox([-3, -2], [4, 2])
    _, pre = forward(encode_closed_loop(A, B, policy, box), box.sample(1000, rng), record=True)
    assert np.all(pre[0][:, -2:] > 0)


def test_unroll_closed_loop(rng):
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    B = np.array([[0.5], [1.0]])
    policy = random_net(rng, [2, 6, 3, 1], scale=0.5)
    box = InputBox([-1, -1], [1, 1])
    x = box.sample(300, rng)
    for t in (1, 2, 4):
        net = unroll_closed_loop(A, B, policy, box, t)
        assert net.depth == 2 * t + 1
        want = x
        for _ in range(t):
            want = closed_loop_truth(A, B, policy, want)
        assert relerr(forward(net, x), want) < 1e-9
    with pytest.raises(ValueError):
        unroll_closed_loop(A, B, policy, box, 0)


def test_affine_policy_needs_no_relu():
    A = np.eye(2)
    B = np.array([[1.0], [0.0]])
    policy = Network((AffineLayer([[0.0, 0.0]], [0.0]),))
    enc = encode_closed_loop(A, B, policy, InputBox([-1, -1], [1, 1]))
    assert enc.depth == 1
    assert np.allclose(enc.layers[0].weights, A)


def max_gap_truth(y, a, b, ood):
    return np.maximum(y[:, a], y[:, b]) - y[:, ood]


def test_max_gap_encoding(rng):
    net = random_net(rng, [2, 8, 3])
    box = InputBox([-2, -2], [2, 2])
    enc = encode_max_gap(net, 0, 1, 2, max_gap_shift(net, box, 1, 2))
    x = box.sample(1000, rng)
    assert enc.output_dim == 1
    assert relerr(forward(enc, x)[:, 0], max_gap_truth(forward(net, x), 0, 1, 2)) < 1e-9
    with pytest.raises(ValueError):
        encode_max_gap(net, 0, 0, 2, [0.0, 0.0])
    with pytest.raises(IndexError):
        encode_max_gap(net, 0, 1, 5, [0.0, 0.0])
    with pytest.raises(ValueError):
        encode_max_gap(net, 0, 1, 2, [0.0])


def test_max_gap_invariant_to_common_offset(rng):
    net = random_net(rng, [2, 6, 3])
    box = InputBox([-1, -1], [1, 1])
    shift = max_gap_shift(net, box, 1, 2)
    g = encode_max_gap(net, 0, 1, 2, shift)
    last = net.layers[-1]
    moved = Network(net.layers[:-1] + (AffineLayer(last.weights, last.bias + 0.7),))
    # the shift constants must stay valid lower bounds after the offset
    g2 = encode_max_gap(moved, 0, 1, 2, shift)
    x = box.sample(400, rng)
    assert relerr(forward(g2, x), forward(g, x)) < 1e-9


def test_interval_output_bounds_enclose(rng):
    net = random_net(rng, [3, 7, 5, 2])
    box = InputBox(-np.ones(3), np.ones(3))
    lo, hi = interval_output_bounds(net, box)
    y = forward(net, box.sample(5000, rng))
    assert np.all(y >= lo - 1e-12) and np.all(y <= hi + 1e-12)


def test_identity_layer():
    layer = identity_layer(3)
    assert np.array_equal(layer(np.arange(3.0)), np.arange(3.0))
