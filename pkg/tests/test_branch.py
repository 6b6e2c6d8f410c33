import numpy as np
import pytest

from helpers import random_instance
from invprop.branch import (DONE, PRUNED, branch_and_bound, interval_excludes, plan_tree, split,
                            split_widest)
from invprop.dual import Config
from invprop.geometry import approx_ratio, gen_directions_2d
from invprop.network import AffineLayer, InputBox, Network, OutputSet, forward


def test_split():
    box = InputBox([0, 0], [4, 2])
    a, b = split(box, 0, 1.0)
    assert list(a.hi) == [1, 2] and list(b.lo) == [1, 0]
    with pytest.raises(ValueError):
        split(box, 0, 4.0)
    a, b = split_widest(box)
    assert a.hi[0] == 2.0


def test_plan_tree_leaf_counts():
    for n in (1, 2, 3, 4, 7):
        top = plan_tree(InputBox([0, 0], [1, 1]), n)
        leaves = []
        stack = [top]
        while stack:
            node = stack.pop()
            stack.extend(node.children)
            if not node.children:
                leaves.append(node)
        assert len(leaves) == n
        assert sum(l.box.volume() for l in leaves) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        plan_tree(InputBox([0.0], [1.0]), 0)


def test_unreachable_quadrant_pruned():
    ident = Network((AffineLayer(np.eye(2), np.zeros(2)),))
    out = OutputSet([[1.0, 0.0], [0.0, 1.0]], [0.5, 0.5])      # x1, x2 <= -0.5
    box = InputBox([-1, -1], [1, 1])
    assert interval_excludes(ident, out, InputBox([0, 0], [1, 1]))
    res = branch_and_bound(ident, out, box, gen_directions_2d(8), Config(iters=40), 4)
    status = {tuple(l.box.lo): l.status for l in res.leaves()}
    assert status[(-1.0, -1.0)] == DONE
    assert status[(0.0, 0.0)] == PRUNED
    assert len(res.union.leaves) == 1
    assert not res.all_pruned


def test_all_pruned_when_empty(toy):
    net, box, _ = toy
    res = branch_and_bound(net, OutputSet([[0.0]], [1.0]), box, [[1.0], [-1.0]], Config(iters=20), 2)
    assert res.all_pruned and res.union.empty


def test_branching_sound_and_tighter(rng):
    net, box, out, _ = random_instance(rng, n_in=2, hidden=[8, 8])
    dirs = gen_directions_2d(12)
    one = branch_and_bound(net, out, box, dirs, Config(iters=60), 1)
    four = branch_and_bound(net, out, box, dirs, Config(iters=60), 4)
    r1 = approx_ratio(one.union, net, out, box, 100_000, 0)
    r4 = approx_ratio(four.union, net, out, box, 100_000, 0)
    assert r1.n_feasible_outside == 0 and r4.n_feasible_outside == 0
    assert r4.ratio <= r1.ratio + 1e-12


def test_budget_exhaustion_stays_sound(rng):
    net, box, out, _ = random_instance(rng, n_in=2, hidden=[8, 8])
    res = branch_and_bound(net, out, box, gen_directions_2d(8), Config(iters=30, time_limit=0.0), 4)
    assert res.budget_exhausted
    x = box.sample(50_000, rng)
    feas = x[out.satisfied(forward(net, x))]
    assert res.union.contains_many(feas).all()


def test_parallel_levels_identical(rng):
    net, box, out, _ = random_instance(rng, n_in=2, hidden=[6, 6])
    dirs = gen_directions_2d(8)
    a = branch_and_bound(net, out, box, dirs, Config(iters=30), 4)
    b = branch_and_bound(net, out, box, dirs, Config(iters=30, threads=4), 4)
    assert [l.to_dict() for l in a.union.leaves] == [l.to_dict() for l in b.union.leaves]
