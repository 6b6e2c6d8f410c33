"""Input-space branch and bound over the dual tightening loop."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bounds import BoundStore, initial_bounds
from .dual import Config, InvpropResult, invprop
from .geometry import HalfSpace, Leaf, PolytopeUnion
from .network import InputBox, Network, OutputSet, fold_output_constraints, interval_output_bounds

PENDING, DONE, PRUNED = "pending", "done", "pruned-infeasible"


@dataclass
class BranchNode:
    box: InputBox
    depth: int = 0
    status: str = PENDING
    result: list | None = None          # certified HalfSpace list (own + inherited)
    parent: "BranchNode | None" = field(default=None, repr=False)
    children: list = field(default_factory=list, repr=False)
    store: BoundStore | None = field(default=None, repr=False)
    run: InvpropResult | None = field(default=None, repr=False)

    @property
    def is_leaf(self) -> bool:
        return not self.children


def split(box: InputBox, dim: int, s: float):
    """(box ∩ {x_dim <= s}, box ∩ {x_dim >= s})."""
    if not box.lo[dim] < s < box.hi[dim]:
        raise ValueError(f"split point {s} outside ({box.lo[dim]}, {box.hi[dim]})")
    hi_a = box.hi.copy()
    hi_a[dim] = s
    lo_b = box.lo.copy()
    lo_b[dim] = s
    return InputBox(box.lo, hi_a), InputBox(lo_b, box.hi)


def split_widest(box: InputBox):
    dim = int(np.argmax(box.widths))
    return split(box, dim, 0.5 * (box.lo[dim] + box.hi[dim]))


def interval_excludes(net: Network, out_set: OutputSet, box: InputBox) -> bool:
    """True when some constraint row is violated on the whole box by interval bounds."""
    lo, hi = interval_output_bounds(net, box)
    H = out_set.H
    row_min = np.clip(H, 0, None) @ lo + np.clip(H, None, 0) @ hi + out_set.d
    return bool(np.any(row_min > 0))


def plan_tree(root: InputBox, max_branches: int) -> BranchNode:
    """Breadth-first widest-midpoint splits until ``max_branches`` leaves."""
    if max_branches < 1:
        raise ValueError("max_branches must be >= 1")
    top = BranchNode(root)
    frontier = [top]
    leaves = 1
    while leaves < max_branches and frontier:
        node = frontier.pop(0)
        if not np.any(node.box.widths > 0):
            continue
        a, b = split_widest(node.box)
        node.children = [BranchNode(a, node.depth + 1, parent=node),
                         BranchNode(b, node.depth + 1, parent=node)]
        frontier.extend(node.children)
        leaves += 1
    return top


def _walk(node: BranchNode):
    yield node
    for child in node.children:
        yield from _walk(child)


@dataclass
class BranchResult:
    union: PolytopeUnion
    root: BranchNode
    budget_exhausted: bool = False

    def leaves(self) -> list:
        return sorted((n for n in _walk(self.root) if n.is_leaf),
                      key=lambda n: (tuple(n.box.lo), tuple(n.box.hi)))

    @property
    def all_pruned(self) -> bool:
        return all(n.status == PRUNED for n in self.leaves())


def _analyze(node: BranchNode, net: Network, folded: Network, out_set: OutputSet,
             directions: np.ndarray, config: Config, prior: BoundStore | None = None,
             frozen=()) -> None:
    parent = node.parent
    if parent is not None and parent.status == PRUNED:
        node.status = PRUNED
        return
    if interval_excludes(net, out_set, node.box):
        node.status = PRUNED
        return
    store = initial_bounds(net, node.box)
    if prior is not None:
        for i in range(1, store.n_layers):
            store.tighten(i, prior.lo[i], prior.hi[i])
    inherited: list = []
    if parent is not None:
        store.intersect(parent.store)
        inherited = list(parent.result)
    run = invprop(net, store, out_set, config, directions, frozen_layers=frozen, folded=folded)
    node.run = run
    node.store = run.store
    if run.infeasible:
        node.status = PRUNED
        return
    node.result = inherited + [HalfSpace(c, lb) for c, lb in run.halfspaces()]
    node.status = DONE


def _inherit(node: BranchNode) -> None:
    """Fallback when the budget runs out: reuse the parent's certificate."""
    parent = node.parent
    if parent is None or parent.status != DONE:
        node.status = PRUNED if parent is not None and parent.status == PRUNED else PENDING
        if node.status == PENDING:
            node.result = []
            node.store = None
        return
    node.status = DONE
    node.store = parent.store
    node.result = list(parent.result)


def branch_and_bound(net: Network, out_set: OutputSet, root: InputBox, directions,
                     config: Config | None = None, max_branches: int = 1,
                     prior: BoundStore | None = None, frozen_layers=()) -> BranchResult:
    """Split ``root`` into ``max_branches`` boxes and bound the preimage on each.

    ``prior`` holds hidden-layer bounds known to be valid on the whole root
    box; they seed every node, and ``frozen_layers`` are not re-optimized.
    """
    config = config or Config()
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    folded = fold_output_constraints(net, out_set)
    top = plan_tree(root, max_branches)
    start = time.monotonic()
    exhausted = False

    level = [top]
    while level:
        if config.time_limit is not None and time.monotonic() - start > config.time_limit:
            exhausted = True
        if exhausted:
            for node in level:
                _inherit(node)
        elif config.threads > 1 and len(level) > 1:
            inner = config.replace(threads=1)
            with ThreadPoolExecutor(max_workers=config.threads) as pool:
                list(pool.map(lambda n: _analyze(n, net, folded, out_set, directions, inner, prior, frozen_layers),
                              level))
        else:
            for node in level:
                _analyze(node, net, folded, out_set, directions, config, prior, frozen_layers)
        if any(n.run is not None and n.run.budget_exhausted for n in level):
            exhausted = True
        level = [c for n in level for c in n.children]

    result = BranchResult(PolytopeUnion(), top, exhausted)
    for node in result.leaves():
        if node.status == DONE:
            box = node.box
            if node.store is not None:
                lo = np.maximum(box.lo, node.store.lo[0])
                hi = np.minimum(box.hi, node.store.hi[0])
                if np.any(lo > hi + 1e-9 * np.maximum(1.0, np.abs(hi))):
                    continue    # inherited certificate excludes this child entirely
                box = InputBox(lo, np.maximum(hi, lo))
            result.union.leaves.append(Leaf(box, list(node.result or [])))
        elif node.status == PENDING:
            # never analysed (budget ran out before any ancestor finished)
            result.union.leaves.append(Leaf(node.box, []))
    return result
