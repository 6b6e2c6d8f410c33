"""Exact ground truth for small instances.

Nothing in here touches the dual machinery: the MILP optimum comes from
enumerating activation patterns (a depth-first search with LP feasibility
pruning), and every LP goes through the dense simplex below.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bounds import BoundStore, classify, interval_propagate
from .network import InputBox, Network, OutputSet, fold_output_constraints, forward

PIVOT_TOL = 1e-9
COST_TOL = 1e-9
FEAS_TOL = 1e-7


class LPIterationLimit(RuntimeError):
    pass


class PatternBudgetExceeded(RuntimeError):
    pass


@dataclass
class DenseLP:
    """min c.x  s.t.  A_ub x <= b_ub,  A_eq x = b_eq,  lo <= x <= hi (infinite allowed)."""

    c: np.ndarray
    A_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        n = self.c.shape[0]

        def mat(a, b):
            if a is None:
                return np.zeros((0, n)), np.zeros(0)
            a = np.asarray(a, dtype=float).reshape(-1, n)
            b = np.asarray(b, dtype=float).reshape(-1)
            if a.shape[0] != b.shape[0]:
                raise ValueError("constraint rows and right-hand side disagree")
            return a, b

        self.A_ub, self.b_ub = mat(self.A_ub, self.b_ub)
        self.A_eq, self.b_eq = mat(self.A_eq, self.b_eq)
        self.lo = np.zeros(n) if self.lo is None else np.asarray(self.lo, dtype=float).copy()
        self.hi = np.full(n, np.inf) if self.hi is None else np.asarray(self.hi, dtype=float).copy()
        for arr in (self.c, self.A_ub, self.b_ub, self.A_eq, self.b_eq):
            if not np.all(np.isfinite(arr)):
                raise ValueError("LP data must be finite")
        if np.any(np.isnan(self.lo)) or np.any(np.isnan(self.hi)):
            raise ValueError("NaN variable bound")

    @property
    def n_vars(self) -> int:
        return self.c.shape[0]

    def max_violation(self, x: np.ndarray) -> float:
        v = [0.0]
        if self.A_ub.size:
            v.append(float(np.max(self.A_ub @ x - self.b_ub)))
        if self.A_eq.size:
            v.append(float(np.max(np.abs(self.A_eq @ x - self.b_eq))))
        v.append(float(np.max(self.lo - x, initial=0.0)))
        v.append(float(np.max(x - self.hi, initial=0.0)))
        return max(v)


@dataclass
class LPResult:
    status: str                      # optimal | infeasible | unbounded
    value: float = np.nan
    x: np.ndarray | None = None
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def _pivot(tab: np.ndarray, row: int, col: int) -> None:
    tab[row] /= tab[row, col]
    factor = tab[:, col].copy()
    factor[row] = 0.0
    tab -= np.outer(factor, tab[row])


def _simplex(tab: np.ndarray, basis: list, allowed: int, max_iter: int, counter: list) -> str:
    """Bland's-rule primal simplex on a tableau whose last row is the cost row.

    Only the first ``allowed`` columns may enter.  Returns 'optimal' or
    'unbounded'.
    """
    m = tab.shape[0] - 1
    while True:
        if counter[0] >= max_iter:
            raise LPIterationLimit(f"simplex exceeded {max_iter} pivots")
        cost = tab[-1, :allowed]
        entering = np.flatnonzero(cost < -COST_TOL)
        if entering.size == 0:
            return "optimal"
        col = int(entering[0])
        column = tab[:m, col]
        ok = column > PIVOT_TOL
        if not np.any(ok):
            return "unbounded"
        ratios = np.full(m, np.inf)
        ratios[ok] = tab[:m, -1][ok] / column[ok]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + 1e-12 * max(1.0, abs(best)))
        row = min(ties, key=lambda r: basis[r])
        _pivot(tab, int(row), col)
        basis[row] = col
        counter[0] += 1


def lp_solve(lp: DenseLP, max_iter: int = 20000) -> LPResult:
    """Two-phase dense tableau simplex with Bland's anti-cycling rule."""
    n = lp.n_vars
    # substitute x = T y + o with y >= 0
    cols, offset, extra_ub = [], np.zeros(n), []
    for j in range(n):
        lo, hi = lp.lo[j], lp.hi[j]
        if lo > hi:
            return LPResult("infeasible")
        e = np.zeros(n)
        e[j] = 1.0
        if np.isfinite(lo):
            offset[j] = lo
            cols.append(e)
            if np.isfinite(hi):
                extra_ub.append((len(cols) - 1, hi - lo))
        elif np.isfinite(hi):
            offset[j] = hi
            cols.append(-e)
        else:
            cols.append(e)
            cols.append(-e)
    T = np.array(cols).T if cols else np.zeros((n, 0))
    ny = T.shape[1]

    a_ub = lp.A_ub @ T
    b_ub = lp.b_ub - lp.A_ub @ offset
    if extra_ub:
        rows = np.zeros((len(extra_ub), ny))
        for r, (k, width) in enumerate(extra_ub):
            rows[r, k] = 1.0
        a_ub = np.vstack([a_ub, rows])
        b_ub = np.concatenate([b_ub, [w for _, w in extra_ub]])
    a_eq = lp.A_eq @ T
    b_eq = lp.b_eq - lp.A_eq @ offset

    m_ub, m_eq = a_ub.shape[0], a_eq.shape[0]
    m = m_ub + m_eq
    nv = ny + m_ub                      # structural + slack columns
    A = np.zeros((m, nv))
    A[:m_ub, :ny] = a_ub
    A[:m_ub, ny:] = np.eye(m_ub)
    A[m_ub:, :ny] = a_eq
    b = np.concatenate([b_ub, b_eq])
    neg = b < 0
    A[neg] *= -1
    b[neg] *= -1

    # phase 1: artificial column per row
    tab = np.zeros((m + 1, nv + m + 1))
    tab[:m, :nv] = A
    tab[:m, nv:nv + m] = np.eye(m)
    tab[:m, -1] = b
    tab[-1, :nv] = -A.sum(axis=0)
    tab[-1, -1] = -b.sum()
    basis = list(range(nv, nv + m))
    counter = [0]
    _simplex(tab, basis, nv, max_iter, counter)
    if -tab[-1, -1] > FEAS_TOL * max(1.0, float(np.abs(b).max(initial=0.0))):
        return LPResult("infeasible", iterations=counter[0])

    # drive artificials out of the basis; drop redundant rows
    keep = []
    for r in range(m):
        if basis[r] >= nv:
            cand = np.flatnonzero(np.abs(tab[r, :nv]) > PIVOT_TOL)
            if cand.size == 0:
                continue
            _pivot(tab, r, int(cand[0]))
            basis[r] = int(cand[0])
        keep.append(r)
    tab = np.vstack([tab[keep][:, list(range(nv)) + [tab.shape[1] - 1]],
                     np.zeros((1, nv + 1))])
    basis = [basis[r] for r in keep]

    # phase 2
    cost = np.concatenate([T.T @ lp.c, np.zeros(m_ub)])
    tab[-1, :nv] = cost
    tab[-1, -1] = 0.0
    for r, bcol in enumerate(basis):
        if tab[-1, bcol] != 0.0:
            tab[-1] -= tab[-1, bcol] * tab[r]
    status = _simplex(tab, basis, nv, max_iter, counter)
    if status == "unbounded":
        return LPResult("unbounded", value=-np.inf, iterations=counter[0])
    y = np.zeros(nv)
    for r, bcol in enumerate(basis):
        y[bcol] = tab[r, -1]
    x = T @ y[:ny] + offset
    return LPResult("optimal", float(lp.c @ x), x, counter[0])


# ---------------------------------------------------------------- MILP

@dataclass
class MilpResult:
    value: float                     # +inf when the preimage is empty
    x: np.ndarray | None
    patterns: int = 0                # feasible full patterns visited
    lp_calls: int = 0
    regions: list = field(default_factory=list, repr=False)

    @property
    def empty(self) -> bool:
        return self.x is None


def exact_min_milp(net: Network, box: InputBox, out_set: OutputSet, c,
                   store: BoundStore | None = None, max_patterns: int = 2 ** 14,
                   keep_regions: bool = False) -> MilpResult:
    """min c.x over {x in box : H net(x) + d <= 0} by activation-pattern search.

    Neurons whose sign is fixed over the whole box (by interval propagation)
    are never branched on.  ``store`` may supply extra sound bounds to
    stabilize more neurons; those neurons keep an explicit sign constraint.
    """
    c = np.asarray(c, dtype=float).reshape(-1)
    folded = fold_output_constraints(net, out_set)
    base = interval_propagate(net, box)
    classes = classify(base)
    hint = classify(store) if store is not None else None
    n0 = net.input_dim
    res = MilpResult(np.inf, None)
    rows: list = []        # (a, b) meaning a.x <= b

    def lp_with(extra_a=None, extra_b=None, objective=None):
        a = [r[0] for r in rows]
        b = [r[1] for r in rows]
        if extra_a is not None:
            a.extend(extra_a)
            b.extend(extra_b)
        lp = DenseLP(np.zeros(n0) if objective is None else objective,
                     np.array(a).reshape(-1, n0) if a else None,
                     np.array(b) if b else None, lo=box.lo, hi=box.hi)
        res.lp_calls += 1
        return lp_solve(lp)

    def visit(layer: int, j: int, G: np.ndarray, h: np.ndarray, post_G: list, post_h: list):
        # G, h: pre-activation map of the current layer; post_*: rows built so far
        if layer == folded.depth:
            out = folded.layers[-1]
            Gy = out.weights @ G
            hy = out.weights @ h + out.bias
            sol = lp_with(list(Gy), list(-hy), objective=c)
            res.patterns += 1
            if res.patterns > max_patterns:
                raise PatternBudgetExceeded(f"more than {max_patterns} activation patterns")
            if sol.optimal:
                if keep_regions:
                    res.regions.append([r for r in rows] + list(zip(Gy, -hy)))
                if sol.value < res.value:
                    res.value, res.x = sol.value, sol.x
            return
        n = G.shape[0]
        if j == n:
            nG, nh = np.array(post_G).reshape(n, n0), np.array(post_h)
            nxt = folded.layers[layer]
            if layer + 1 == folded.depth:
                visit(layer + 1, 0, nG, nh, [], [])
            else:
                visit(layer + 1, 0, nxt.weights @ nG, nxt.weights @ nh + nxt.bias, [], [])
            return
        g, k = G[j], h[j]
        if classes.active[layer][j]:
            visit(layer, j + 1, G, h, post_G + [g], post_h + [k])
            return
        if classes.inactive[layer][j]:
            visit(layer, j + 1, G, h, post_G + [np.zeros(n0)], post_h + [0.0])
            return
        phases = ("active", "inactive")
        if hint is not None:
            if hint.active[layer][j]:
                phases = ("active",)
            elif hint.inactive[layer][j]:
                phases = ("inactive",)
        for phase in phases:
            row = (-g, k) if phase == "active" else (g, -k)
            rows.append(row)
            if lp_with().optimal:
                if phase == "active":
                    visit(layer, j + 1, G, h, post_G + [g], post_h + [k])
                else:
                    visit(layer, j + 1, G, h, post_G + [np.zeros(n0)], post_h + [0.0])
            rows.pop()

    first = folded.layers[0]
    if folded.depth == 1:
        visit(1, 0, np.eye(n0), np.zeros(n0), [], [])
    else:
        visit(1, 0, first.weights.copy(), first.bias.copy(), [], [])
    return res


def exact_lp_relaxation(net: Network, store: BoundStore, out_set: OutputSet, c0,
                        layer_coeffs: dict | None = None) -> float:
    """Optimum of the triangle-relaxation LP with the store's bounds.

    Objective c0.x̂0 + sum_i c_i.x_i (``layer_coeffs`` maps a hidden layer
    index to c_i).  Returns +inf when the relaxation is infeasible.
    """
    folded = fold_output_constraints(net, out_set)
    classes = classify(store)
    L = folded.depth
    sizes = [folded.input_dim] + folded.hidden_sizes
    # variable layout: x̂0 | for each hidden i: z_i, a_i
    z_off, a_off = {}, {0: 0}
    pos = sizes[0]
    for i in range(1, L):
        z_off[i] = pos
        a_off[i] = pos + sizes[i]
        pos += 2 * sizes[i]
    nv = pos
    c = np.zeros(nv)
    c[:sizes[0]] = np.asarray(c0, dtype=float)
    for i, ci in (layer_coeffs or {}).items():
        c[z_off[i]:z_off[i] + sizes[i]] = ci
    lo = np.full(nv, -np.inf)
    hi = np.full(nv, np.inf)
    lo[:sizes[0]] = store.lo[0]
    hi[:sizes[0]] = store.hi[0]
    A_eq, b_eq, A_ub, b_ub = [], [], [], []
    for i in range(1, L):
        W, b = folded.layers[i - 1].weights, folded.layers[i - 1].bias
        l, u = store.lo[i], store.hi[i]
        for j in range(sizes[i]):
            row = np.zeros(nv)
            row[z_off[i] + j] = 1.0
            row[a_off[i - 1]:a_off[i - 1] + sizes[i - 1]] = -W[j]
            A_eq.append(row)
            b_eq.append(b[j])
            zj, aj = z_off[i] + j, a_off[i] + j
            if classes.active[i][j]:
                row = np.zeros(nv)
                row[aj], row[zj] = 1.0, -1.0
                A_eq.append(row)
                b_eq.append(0.0)
            elif classes.inactive[i][j]:
                lo[aj] = hi[aj] = 0.0
            else:
                lo[aj] = 0.0
                row = np.zeros(nv)
                row[zj], row[aj] = 1.0, -1.0
                A_ub.append(row)
                b_ub.append(0.0)
                row = np.zeros(nv)
                row[aj], row[zj] = u[j] - l[j], -u[j]
                A_ub.append(row)
                b_ub.append(-u[j] * l[j])
    W, b = folded.layers[-1].weights, folded.layers[-1].bias
    for k in range(W.shape[0]):
        row = np.zeros(nv)
        row[a_off[L - 1]:a_off[L - 1] + sizes[L - 1]] = W[k]
        A_ub.append(row)
        b_ub.append(-b[k])
    lp = DenseLP(c, np.array(A_ub) if A_ub else None, np.array(b_ub) if b_ub else None,
                 np.array(A_eq) if A_eq else None, np.array(b_eq) if b_eq else None, lo, hi)
    sol = lp_solve(lp)
    if sol.status == "infeasible":
        return np.inf
    if sol.status == "unbounded":
        return -np.inf
    return sol.value


def sample_feasible(net: Network, box: InputBox, out_set: OutputSet, n: int,
                    seed: int | np.random.Generator = 0, chunk: int = 200_000) -> np.ndarray:
    """Uniform box samples whose image satisfies H y + d <= 1e-9."""
    rng = np.random.default_rng(seed)
    kept = []
    left = n
    while left > 0:
        m = min(chunk, left)
        x = box.sample(m, rng)
        ok = out_set.satisfied(forward(net, x), tol=1e-9)
        kept.append(x[ok])
        left -= m
    return np.concatenate(kept) if kept else np.zeros((0, box.dim))
