"""Backward reachability for a closed loop x' = A x + B policy(x)."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .bounds import BoundStore
from .branch import BranchResult, branch_and_bound
from .dual import Config
from .network import (SHIFT_SLACK, InputBox, Network, OutputSet, closed_loop_reach_boxes,
                      encode_closed_loop, interval_output_bounds, unroll_closed_loop)


@dataclass
class ReachStep:
    step: int
    net: Network
    outcome: BranchResult
    seconds: float
    reused_layers: tuple = field(default=())


def one_step_invariant(A, B, policy: Network, domain: InputBox) -> bool:
    """Interval arithmetic shows that one transition maps ``domain`` into itself."""
    lo, hi = interval_output_bounds(encode_closed_loop(A, B, policy, domain), domain)
    return bool(np.all(lo >= domain.lo) and np.all(hi <= domain.hi))


def shifted_prior(prev: BoundStore, A, B, policy: Network, domain: InputBox,
                  steps: int) -> tuple[BoundStore, tuple]:
    """Bounds for the ``steps``-step network taken from the ``steps - 1`` one.

    Steps 2..t of the longer network compute, from x1, exactly what steps
    1..t-1 of the shorter one compute from x0, except that the state carry
    neurons use a different shift constant.  The first step is left open
    (infinite bounds).  Only valid when x1 stays in ``domain``.
    """
    n = domain.dim
    h = policy.depth - 1
    boxes = closed_loop_reach_boxes(A, B, policy, domain, steps)
    shifts = [b.lo - SHIFT_SLACK for b in boxes]
    lo = [domain.lo.copy()]
    hi = [domain.hi.copy()]
    for j in range(1, h + 1):
        size = prev.lo[j].shape[0]
        lo.append(np.full(size, -np.inf))
        hi.append(np.full(size, np.inf))
    for k in range(2, steps + 1):
        delta = shifts[k - 2] - shifts[k - 1]
        for j in range(1, h + 1):
            src = (k - 2) * h + j
            a, b = prev.lo[src].copy(), prev.hi[src].copy()
            a[-n:] += delta
            b[-n:] += delta
            lo.append(a)
            hi.append(b)
    reused = tuple(range(h + 1, steps * h + 1))
    return BoundStore(lo, hi), reused


def backward_reach(A, B, policy: Network, domain: InputBox, obstacle: OutputSet, steps: int,
                   directions, config: Config | None = None, branches: int = 1,
                   reuse: bool = True):
    """Yield one :class:`ReachStep` per horizon t = 1..steps."""
    config = config or Config()
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[0] != domain.dim or obstacle.H.shape[1] != domain.dim:
        raise ValueError("dynamics, domain and obstacle dimensions differ")
    can_reuse = reuse and policy.depth > 1 and one_step_invariant(A, B, policy, domain)
    prev = None
    for t in range(1, steps + 1):
        net = unroll_closed_loop(A, B, policy, domain, t)
        prior, frozen = None, ()
        if can_reuse and prev is not None and prev.root.store is not None:
            prior, frozen = shifted_prior(prev.root.store, A, B, policy, domain, t)
        start = time.perf_counter()
        outcome = branch_and_bound(net, obstacle, domain, directions, config, branches,
                                   prior=prior, frozen_layers=frozen)
        yield ReachStep(t, net, outcome, time.perf_counter() - start, frozen)
        prev = outcome
