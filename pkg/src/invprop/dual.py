"""Dual bound propagation under output constraints.

Every quantity is batched over a leading objective axis K: each row of an
objective is optimized with its own slopes (alpha) and output multipliers
(gamma).  The network handed to :func:`eval_g`, :func:`grad_g` and
:func:`optimize_bound` must already have its output constraints folded in
(see :func:`invprop.network.fold_output_constraints`), so the constraint
reads ``net(x) <= 0``.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .bounds import BoundStore, NeuronClass, classify
from .network import Network, OutputSet, fold_output_constraints

log = logging.getLogger(__name__)


class StaleClassificationError(RuntimeError):
    pass


@dataclass
class Config:
    iters: int = 200
    lr: float = 0.1
    lr_decay: float = 0.98
    tolerance: float = 1e-4
    max_sweeps: int = 50
    alpha_init: float = 0.5
    gamma_init: float = 0.025
    check_every: int = 10
    # extensions
    threads: int = 1
    time_limit: float | None = None
    use_output_constraint: bool = True

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "Config":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "Config":
        return Config(**{**self.to_dict(), **kw})


class LinearObjective:
    """Batch of linear objectives c0.x̂0 + sum_i c_i.x_i.

    ``coeffs[0]`` has shape (K, input_dim); ``coeffs[i]`` for 1 <= i < L has
    shape (K, n_i) and weighs hidden pre-activations.
    """

    def __init__(self, coeffs):
        self.coeffs = [np.atleast_2d(np.asarray(c, dtype=float)) for c in coeffs]
        k = {c.shape[0] for c in self.coeffs}
        if len(k) != 1:
            raise ValueError("objective layers disagree on batch size")
        if not np.all([np.all(np.isfinite(c)) for c in self.coeffs]):
            raise ValueError("objective has non-finite coefficients")

    @property
    def size(self) -> int:
        return self.coeffs[0].shape[0]

    def rows(self, sel) -> "LinearObjective":
        return LinearObjective([c[sel] for c in self.coeffs])

    def check(self, net: Network) -> None:
        sizes = [net.input_dim] + net.hidden_sizes
        if len(self.coeffs) != len(sizes):
            raise ValueError("objective depth does not match the network")
        for c, n in zip(self.coeffs, sizes):
            if c.shape[1] != n:
                raise ValueError("objective width does not match the network")

    @classmethod
    def on_input(cls, net: Network, c) -> "LinearObjective":
        c = np.atleast_2d(np.asarray(c, dtype=float))
        k = c.shape[0]
        return cls([c] + [np.zeros((k, n)) for n in net.hidden_sizes])

    @classmethod
    def on_layer(cls, net: Network, layer: int, c) -> "LinearObjective":
        c = np.atleast_2d(np.asarray(c, dtype=float))
        k = c.shape[0]
        sizes = [net.input_dim] + net.hidden_sizes
        coeffs = [np.zeros((k, n)) for n in sizes]
        coeffs[layer] = c
        return cls(coeffs)

    @classmethod
    def neuron(cls, net: Network, layer: int, j: int, sense: str = "lower") -> "LinearObjective":
        sizes = [net.input_dim] + net.hidden_sizes
        c = np.zeros(sizes[layer])
        c[j] = 1.0 if sense == "lower" else -1.0
        return cls.on_layer(net, layer, c)

    @classmethod
    def both_senses(cls, net: Network, layer: int) -> "LinearObjective":
        """Rows 0..n-1 lower-bound each neuron, rows n..2n-1 upper-bound it."""
        sizes = [net.input_dim] + net.hidden_sizes
        eye = np.eye(sizes[layer])
        return cls.on_layer(net, layer, np.vstack([eye, -eye]))


@dataclass
class DualState:
    alpha: list            # index 0 unused; alpha[i] has shape (K, n_i)
    gamma: np.ndarray      # (K, n_constraints)
    step: int = 0
    sq_alpha: list = field(default=None, repr=False)
    sq_gamma: np.ndarray = field(default=None, repr=False)

    @classmethod
    def init(cls, net: Network, k: int, alpha_init: float = 0.5,
             gamma_init: float = 0.025) -> "DualState":
        alpha = [None] + [np.full((k, n), alpha_init) for n in net.hidden_sizes]
        gamma = np.full((k, net.output_dim), gamma_init)
        return cls(alpha, gamma)

    @property
    def size(self) -> int:
        return self.gamma.shape[0]

    def rows(self, sel) -> "DualState":
        pick = lambda a: None if a is None else a[sel]
        return DualState([pick(a) for a in self.alpha], self.gamma[sel], self.step,
                         None if self.sq_alpha is None else [pick(a) for a in self.sq_alpha],
                         pick(self.sq_gamma))

    def copy(self) -> "DualState":
        return self.rows(slice(None))


@dataclass
class DualTrace:
    nu: list        # nu[i] for i in 1..L, shape (K, n_i)
    nu_hat: list    # nu_hat[i] for i in 1..L-1
    bound: np.ndarray
    pre_input: np.ndarray   # c0 - nu1 W1, coefficient on the input


class _Relaxation:
    """Per-layer constants of the triangle relaxation for one bound snapshot."""

    def __init__(self, store: BoundStore, classes: NeuronClass):
        self.lo0 = store.lo[0]
        self.hi0 = store.hi[0]
        self.active = [None]      # float masks, so the passes can multiply
        self.unstable = [None]
        self.any_unstable = [False]
        self.slope = [None]
        self.offset = [None]
        for i in range(1, store.n_layers):
            lo, hi = store.lo[i], store.hi[i]
            uns = classes.unstable[i]
            denom = np.where(uns, hi - lo, 1.0)
            self.active.append(classes.active[i].astype(float))
            self.unstable.append(uns.astype(float))
            self.any_unstable.append(bool(np.any(uns)))
            self.slope.append(np.where(uns, hi / denom, 0.0))
            self.offset.append(np.where(uns, hi * lo / denom, 0.0))


def _relaxation(store: BoundStore, classes: NeuronClass | None) -> _Relaxation:
    if classes is None:
        classes = classify(store)
    elif classes.version != store.version:
        raise StaleClassificationError("neuron classes were computed for another bound snapshot")
    return _Relaxation(store, classes)


def _forward(net: Network, rx: _Relaxation, coeffs, alpha, gamma) -> DualTrace:
    L = net.depth
    nu = [None] * (L + 1)
    nu_hat = [None] * L
    nu[L] = -gamma
    total = -(nu[L] @ net.layers[L - 1].bias)
    for i in range(L - 1, 0, -1):
        nh = nu[i + 1] @ net.layers[i].weights
        nu_hat[i] = nh
        v = nh * rx.active[i]
        if rx.any_unstable[i]:
            pos = np.maximum(nh, 0.0)
            v += rx.slope[i] * pos - (alpha[i] * rx.unstable[i]) * (pos - nh)
            total = total + pos @ rx.offset[i]
        if coeffs[i] is not None:
            v -= coeffs[i]
        nu[i] = v
        total = total - v @ net.layers[i - 1].bias
    p = coeffs[0] - nu[1] @ net.layers[0].weights
    total = total + np.maximum(p, 0.0) @ rx.lo0 + np.minimum(p, 0.0) @ rx.hi0
    return DualTrace(nu, nu_hat, total, p)


def _backward(net: Network, rx: _Relaxation, trace: DualTrace, alpha):
    """Reverse pass; kinks take the derivative of the non-negative side."""
    L = net.depth
    dp = np.where(trace.pre_input >= 0, rx.lo0, rx.hi0)
    dnu = -(dp @ net.layers[0].weights.T) - net.layers[0].bias
    dalpha = [None] * L
    for i in range(1, L):
        if rx.any_unstable[i]:
            nh = trace.nu_hat[i]
            nonneg = nh >= 0
            deriv = rx.active[i] + rx.unstable[i] * np.where(nonneg, rx.slope[i], alpha[i])
            dnh = dnu * deriv + np.where(nonneg, rx.offset[i], 0.0)
            dalpha[i] = dnu * np.minimum(nh, 0.0) * rx.unstable[i]
        else:
            dnh = dnu * rx.active[i]
            dalpha[i] = np.zeros_like(dnu)
        dnu = dnh @ net.layers[i].weights.T - net.layers[i].bias
    dgamma = -dnu
    return dalpha, dgamma


def _sparse(coeffs):
    """Hidden-layer objective blocks that are all zero become None."""
    return [coeffs[0]] + [c if np.any(c) else None for c in coeffs[1:]]


def eval_g(net: Network, store: BoundStore, obj: LinearObjective, dual: DualState,
           classes: NeuronClass | None = None) -> DualTrace:
    """Closed-form dual lower bound for every objective row."""
    obj.check(net)
    rx = _relaxation(store, classes)
    trace = _forward(net, rx, _sparse(obj.coeffs), dual.alpha, dual.gamma)
    if not np.all(np.isfinite(trace.bound)):
        raise FloatingPointError("non-finite dual bound")
    return trace


def grad_g(net: Network, store: BoundStore, obj: LinearObjective, dual: DualState,
           classes: NeuronClass | None = None):
    """(bound, d bound / d alpha per layer, d bound / d gamma)."""
    obj.check(net)
    rx = _relaxation(store, classes)
    trace = _forward(net, rx, _sparse(obj.coeffs), dual.alpha, dual.gamma)
    dalpha, dgamma = _backward(net, rx, trace, dual.alpha)
    return trace.bound, dalpha, dgamma


# ---------------------------------------------------------------- ascent

_RHO = 0.99
_EPS = 1e-12


def _ascend(net, rx, coeffs, dual: DualState, config: Config, iters: int):
    """Projected ascent in place on ``dual``; returns the best bound per row."""
    L = net.depth
    if dual.sq_alpha is None:
        dual.sq_alpha = [None] + [np.zeros_like(a) for a in dual.alpha[1:]]
        dual.sq_gamma = np.zeros_like(dual.gamma)
    train_gamma = config.use_output_constraint
    coeffs = _sparse(coeffs)
    layers = [i for i in range(1, L) if rx.any_unstable[i]]
    best = None
    for _ in range(iters):
        trace = _forward(net, rx, coeffs, dual.alpha, dual.gamma)
        best = trace.bound.copy() if best is None else np.maximum(best, trace.bound)
        dalpha, dgamma = _backward(net, rx, trace, dual.alpha)
        dual.step += 1
        lr = config.lr * config.lr_decay ** (dual.step // 10)
        corr = 1.0 - _RHO ** dual.step
        for i in layers:
            g = dalpha[i]
            dual.sq_alpha[i] = _RHO * dual.sq_alpha[i] + (1 - _RHO) * g * g
            step = lr * g / (np.sqrt(dual.sq_alpha[i] / corr) + _EPS)
            dual.alpha[i] = np.clip(dual.alpha[i] + step, 0.0, 1.0)
        if train_gamma:
            dual.sq_gamma = _RHO * dual.sq_gamma + (1 - _RHO) * dgamma * dgamma
            step = lr * dgamma / (np.sqrt(dual.sq_gamma / corr) + _EPS)
            dual.gamma = np.maximum(dual.gamma + step, 0.0)
    final = _forward(net, rx, coeffs, dual.alpha, dual.gamma).bound
    best = final if best is None else np.maximum(best, final)
    if not np.all(np.isfinite(best)):
        raise FloatingPointError("non-finite dual bound during ascent")
    return best


ROW_BLOCK = 32


def _blocks(k: int, size: int = ROW_BLOCK):
    return [slice(i, min(i + size, k)) for i in range(0, k, size)]


def optimize_batch(net: Network, store: BoundStore, obj: LinearObjective,
                   config: Config, dual: DualState | None = None,
                   classes: NeuronClass | None = None, iters: int | None = None):
    """Maximize every objective row of ``obj``; returns (best bounds, dual).

    Rows are always processed in fixed blocks of ``ROW_BLOCK``; with
    ``config.threads > 1`` the blocks are spread over worker threads.  Rows
    never interact and the block shapes do not depend on the thread count,
    so serial and parallel runs give bit-identical results.
    """
    obj.check(net)
    rx = _relaxation(store, classes)
    iters = config.iters if iters is None else iters
    if dual is None:
        dual = DualState.init(net, obj.size, config.alpha_init,
                              config.gamma_init if config.use_output_constraint else 0.0)
    parts = _blocks(obj.size)
    if len(parts) == 1:
        return _ascend(net, rx, obj.coeffs, dual, config, iters), dual

    subs = [dual.rows(s) for s in parts]
    work = lambda a: _ascend(net, rx, [c[a[0]] for c in obj.coeffs], a[1], config, iters)
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(work, zip(parts, subs)))
    else:
        results = [work(a) for a in zip(parts, subs)]
    best = np.concatenate(results)
    merged = DualState(
        [None] + [np.concatenate([s.alpha[i] for s in subs]) for i in range(1, net.depth)],
        np.concatenate([s.gamma for s in subs]), subs[0].step,
        [None] + [np.concatenate([s.sq_alpha[i] for s in subs]) for i in range(1, net.depth)],
        np.concatenate([s.sq_gamma for s in subs]))
    return best, merged


def optimize_bound(net: Network, store: BoundStore, obj: LinearObjective, config: Config,
                   dual: DualState | None = None):
    """Single-objective convenience wrapper around :func:`optimize_batch`."""
    if obj.size != 1:
        raise ValueError("optimize_bound takes one objective; use optimize_batch")
    best, dual = optimize_batch(net, store, obj, config, dual)
    return float(best[0]), dual


# ---------------------------------------------------------------- tightening

def box_directions(n: int) -> np.ndarray:
    eye = np.eye(n)
    return np.vstack([eye, -eye])


def box_floor(directions: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """min over the box of c.x for every row c."""
    return np.clip(directions, 0, None) @ lo + np.clip(directions, None, 0) @ hi


def _fresh(dual: DualState) -> DualState:
    """Keep the multipliers, restart the step-size schedule and moment estimates."""
    return DualState([None if a is None else a.copy() for a in dual.alpha], dual.gamma.copy())


def _write_rows(full: DualState, rows: np.ndarray, sub: DualState) -> None:
    for i in range(1, len(full.alpha)):
        full.alpha[i][rows] = sub.alpha[i]
    full.gamma[rows] = sub.gamma


@dataclass
class InvpropResult:
    store: BoundStore
    directions: np.ndarray
    lower_bounds: np.ndarray
    sweeps: int = 0
    converged: bool = False
    budget_exhausted: bool = False
    width_history: list = field(default_factory=list)    # per sweep, per layer
    bound_history: list = field(default_factory=list)    # per sweep, per direction
    box_history: list = field(default_factory=list)      # per sweep, (lo, hi) of the input

    @property
    def infeasible(self) -> bool:
        return self.store.infeasible

    def halfspaces(self) -> list:
        return [(c.copy(), float(b)) for c, b in zip(self.directions, self.lower_bounds)]


def invprop(net: Network, store: BoundStore, out_set: OutputSet, config: Config | None = None,
            directions=None, frozen_layers=(), folded: Network | None = None) -> InvpropResult:
    """Iteratively tighten all bounds against each other and the output set.

    Each sweep visits hidden layers from the last to the first, improving the
    lower and upper bound of every neuron (all neurons of a layer in one
    batch against a fixed snapshot, committed at the end of the layer), then
    improves the input bounds together with the tracked half-spaces.  Stops
    when both the summed half-space improvement and the summed bound-width
    reduction of a sweep drop below ``tolerance`` (relative), after
    ``max_sweeps`` or on infeasibility.
    """
    config = config or Config()
    start = time.monotonic()
    if folded is None:
        folded = fold_output_constraints(net, out_set)
    store = store.copy()
    n0 = net.input_dim
    directions = box_directions(n0) if directions is None else np.atleast_2d(
        np.asarray(directions, dtype=float))
    if directions.shape[1] != n0:
        raise ValueError("direction dimension does not match network input")
    if np.any(np.all(directions == 0, axis=1)):
        raise ValueError("zero direction")
    frozen = set(frozen_layers)

    tracked = np.vstack([np.eye(n0), -np.eye(n0), directions])
    tracked_obj = LinearObjective.on_input(folded, tracked)
    lbs = box_floor(directions, store.lo[0], store.hi[0])
    result = InvpropResult(store, directions, lbs)
    result.width_history.append(store.width_sums())
    result.bound_history.append(lbs.tolist())
    result.box_history.append((store.lo[0].copy(), store.hi[0].copy()))
    if store.infeasible:
        return result

    duals: dict = {}
    gamma0 = config.gamma_init if config.use_output_constraint else 0.0

    def out_of_time() -> bool:
        return config.time_limit is not None and time.monotonic() - start > config.time_limit

    for sweep in range(config.max_sweeps):
        for i in range(folded.depth - 1, 0, -1):
            if i in frozen:
                continue
            # stable neurons do not enter the relaxation, so only unstable
            # ones are worth optimizing
            uns = np.flatnonzero(classify(store).unstable[i])
            if uns.size == 0:
                continue
            n = store.lo[i].shape[0]
            if i not in duals:
                duals[i] = DualState.init(folded, 2 * n, config.alpha_init, gamma0)
            rows = np.concatenate([uns, n + uns])
            obj = LinearObjective.both_senses(folded, i).rows(rows)
            best, sub = optimize_batch(folded, store, obj, config, _fresh(duals[i].rows(rows)))
            _write_rows(duals[i], rows, sub)
            lo, hi = store.lo[i].copy(), store.hi[i].copy()
            lo[uns] = best[:uns.size]
            hi[uns] = -best[uns.size:]
            store.tighten(i, lo, hi)
            if store.infeasible:
                break
            if out_of_time():
                result.budget_exhausted = True
                break
        if not store.infeasible and not result.budget_exhausted:
            best, duals[0] = optimize_batch(folded, store, tracked_obj, config,
                                            _fresh(duals[0]) if 0 in duals else None,
                                            iters=config.iters + config.check_every)
            store.tighten(0, best[:n0], -best[n0:2 * n0])
            new = np.maximum(best[2 * n0:], box_floor(directions, store.lo[0], store.hi[0]))
            new = np.maximum(new, lbs)
        else:
            new = lbs
        # a half-space bound above the box maximum means the set is empty
        top = -box_floor(-directions, store.lo[0], store.hi[0])
        if np.any(new > top + 1e-9 * np.maximum(1.0, np.abs(top))):
            store.infeasible = True
        gain = float(np.sum(new - lbs))
        scale = max(1.0, float(np.sum(np.abs(lbs))))
        prev_width = float(np.sum(result.width_history[-1]))
        lbs = new
        result.sweeps = sweep + 1
        result.width_history.append(store.width_sums())
        result.bound_history.append(lbs.tolist())
        result.box_history.append((store.lo[0].copy(), store.hi[0].copy()))
        log.debug("sweep %d gain %.3g widths %s", sweep + 1, gain, result.width_history[-1])
        if store.infeasible or result.budget_exhausted:
            break
        if out_of_time():
            result.budget_exhausted = True
            break
        # intermediate bounds can keep shrinking for a few sweeps before any
        # half-space moves, so both have to stall
        shrink = prev_width - float(np.sum(result.width_history[-1]))
        if gain <= config.tolerance * scale and shrink <= config.tolerance * max(1.0, prev_width):
            result.converged = True
            break

    result.store = store
    result.lower_bounds = lbs
    return result


def tighten_all(net: Network, store: BoundStore, out_set: OutputSet,
                config: Config | None = None, **kw) -> BoundStore:
    return invprop(net, store, out_set, config, **kw).store


def bound_halfspaces(net: Network, store: BoundStore, out_set: OutputSet, directions,
                     config: Config | None = None, tighten: bool = True) -> list:
    """Certified (c, lb) pairs with c.x >= lb on the preimage within the box.

    With ``tighten=False`` the given store is taken as final and only the
    half-space objectives are optimized.
    """
    config = config or Config()
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    if tighten:
        return invprop(net, store, out_set, config, directions).halfspaces()
    folded = fold_output_constraints(net, out_set)
    best, _ = optimize_batch(folded, store, LinearObjective.on_input(folded, directions), config)
    best = np.maximum(best, box_floor(directions, store.lo[0], store.hi[0]))
    return [(c.copy(), float(b)) for c, b in zip(directions, best)]
