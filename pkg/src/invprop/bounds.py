"""Per-layer pre-activation bounds.

Layer indexing follows the network: index 0 is the input box, indices
1..L-1 are the hidden pre-activations (the output layer carries no
stored bounds).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .network import InputBox, Network

_versions = itertools.count(1)


class BoundStore:
    """Tighten-only container for input and hidden pre-activation bounds."""

    def __init__(self, lo, hi, infeasible: bool = False):
        self.lo = [np.array(v, dtype=float) for v in lo]
        self.hi = [np.array(v, dtype=float) for v in hi]
        if len(self.lo) != len(self.hi):
            raise ValueError("lo/hi layer count mismatch")
        self.infeasible = infeasible
        self.version = next(_versions)

    @property
    def n_layers(self) -> int:
        """Input plus hidden layers, i.e. L for an L-layer network."""
        return len(self.lo)

    @property
    def input_box(self) -> InputBox:
        return InputBox(self.lo[0], np.maximum(self.hi[0], self.lo[0]))

    def copy(self) -> "BoundStore":
        return BoundStore(self.lo, self.hi, self.infeasible)

    def tighten(self, layer: int, lo=None, hi=None, tol: float = 1e-9) -> None:
        """Intersect the bounds of one layer with [lo, hi].

        Sets the infeasibility flag when a lower bound ends above its upper
        bound by more than ``tol`` (relative to magnitude).
        """
        if lo is not None:
            self.lo[layer] = np.maximum(self.lo[layer], lo)
        if hi is not None:
            self.hi[layer] = np.minimum(self.hi[layer], hi)
        scale = np.maximum(1.0, np.maximum(np.abs(self.lo[layer]), np.abs(self.hi[layer])))
        if np.any(self.lo[layer] > self.hi[layer] + tol * scale):
            self.infeasible = True
        self.version = next(_versions)

    def intersect(self, other: "BoundStore") -> None:
        for i in range(self.n_layers):
            self.tighten(i, other.lo[i], other.hi[i])

    def widths(self, layer: int) -> np.ndarray:
        return self.hi[layer] - self.lo[layer]

    def width_sums(self) -> list[float]:
        return [float(np.sum(self.widths(i))) for i in range(self.n_layers)]

    def to_dict(self) -> dict:
        return {"lo": [v.tolist() for v in self.lo],
                "hi": [v.tolist() for v in self.hi],
                "infeasible": self.infeasible}

    @classmethod
    def from_dict(cls, data: dict) -> "BoundStore":
        return cls(data["lo"], data["hi"], bool(data.get("infeasible", False)))

    def __repr__(self):
        sizes = [v.shape[0] for v in self.lo]
        return f"BoundStore(sizes={sizes}, infeasible={self.infeasible})"


@dataclass(frozen=True)
class NeuronClass:
    """Boolean masks per layer (index 0 unused) of active/inactive/unstable."""

    active: tuple
    inactive: tuple
    unstable: tuple
    version: int

    def counts(self) -> list[int]:
        return [int(m.sum()) for m in self.unstable[1:]]

    @property
    def n_unstable(self) -> int:
        return sum(self.counts())


def classify(store: BoundStore) -> NeuronClass:
    """Split hidden neurons by sign of their bounds; l = 0 and u = 0 count as stable."""
    active, inactive, unstable = [None], [None], [None]
    for i in range(1, store.n_layers):
        lo, hi = store.lo[i], store.hi[i]
        ina = hi <= 0
        act = (lo >= 0) & ~ina
        active.append(act)
        inactive.append(ina)
        unstable.append(~(act | ina))
    return NeuronClass(tuple(active), tuple(inactive), tuple(unstable), store.version)


def interval_propagate(net: Network, box: InputBox) -> BoundStore:
    if box.dim != net.input_dim:
        raise ValueError(f"box dimension {box.dim} != network input {net.input_dim}")
    lo_list, hi_list = [box.lo.copy()], [box.hi.copy()]
    lo, hi = box.lo, box.hi
    for layer in net.layers[:-1]:
        wp = np.clip(layer.weights, 0, None)
        wn = np.clip(layer.weights, None, 0)
        zlo = wp @ lo + wn @ hi + layer.bias
        zhi = wp @ hi + wn @ lo + layer.bias
        lo_list.append(zlo)
        hi_list.append(zhi)
        lo, hi = np.maximum(zlo, 0), np.maximum(zhi, 0)
    return BoundStore(lo_list, hi_list)


def crown_alpha(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Adaptive lower-relaxation slope: 1 where u >= -l, else 0."""
    return (hi >= -lo).astype(float)


def crown_bounds(net: Network, store: BoundStore, layer: int):
    """Backward linear bound substitution for every neuron of one hidden layer.

    Uses the stored bounds of layers below ``layer`` and the adaptive slope
    from :func:`crown_alpha`; no output constraint is involved.
    """
    if not 1 <= layer < net.depth:
        raise ValueError(f"layer must be in [1, {net.depth - 1}]")
    n = net.layers[layer - 1].out_dim
    lam = np.vstack([np.eye(n), -np.eye(n)])
    const = np.zeros(2 * n)
    for k in range(layer, 0, -1):
        w, b = net.layers[k - 1].weights, net.layers[k - 1].bias
        const += lam @ b
        lam = lam @ w
        below = k - 1
        if below == 0:
            break
        lo, hi = store.lo[below], store.hi[below]
        ina = hi <= 0
        act = (lo >= 0) & ~ina
        uns = ~(act | ina)
        lam[:, ina] = 0.0
        if np.any(uns):
            l_u, h_u = lo[uns], hi[uns]
            slope = h_u / (h_u - l_u)
            alpha = crown_alpha(l_u, h_u)
            sub = lam[:, uns]
            pos = sub >= 0
            const += np.sum(np.where(pos, 0.0, -sub * slope * l_u), axis=1)
            lam[:, uns] = np.where(pos, sub * alpha, sub * slope)
    lo0, hi0 = store.lo[0], store.hi[0]
    bound = const + np.clip(lam, 0, None) @ lo0 + np.clip(lam, None, 0) @ hi0
    return bound[:n], -bound[n:]


def rsip_init(net: Network, store: BoundStore) -> BoundStore:
    """Refine interval bounds layer by layer with backward substitution."""
    out = store.copy()
    for i in range(1, net.depth):
        lo, hi = crown_bounds(net, out, i)
        out.tighten(i, lo, hi)
    return out


def initial_bounds(net: Network, box: InputBox) -> BoundStore:
    """Interval propagation followed by reverse symbolic refinement."""
    return rsip_init(net, interval_propagate(net, box))
