"""Feed-forward ReLU networks: containers, JSON loading, evaluation and the
structural rewrites needed to pose control and OOD questions as plain
affine/ReLU stacks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

# slack applied to interval lower bounds used as passthrough shifts
SHIFT_SLACK = 1e-6


class NetworkFormatError(ValueError):
    """Raised for malformed or inconsistent network / set files."""


def _as_matrix(value, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 0)
    if arr.ndim != 2:
        raise NetworkFormatError(f"{what}: expected a matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NetworkFormatError(f"{what}: non-finite entry")
    return arr


def _as_vector(value, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise NetworkFormatError(f"{what}: non-finite entry")
    return arr


@dataclass(frozen=True)
class AffineLayer:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = _as_matrix(self.weights, "weights")
        b = _as_vector(self.bias, "bias")
        if b.shape[0] != w.shape[0]:
            raise NetworkFormatError(
                f"bias length {b.shape[0]} != weight rows {w.shape[0]}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weights.T + self.bias


@dataclass(frozen=True)
class Network:
    """Affine layers with a ReLU after every layer except the last."""

    layers: tuple[AffineLayer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise NetworkFormatError("network needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].in_dim != layers[i - 1].out_dim:
                raise NetworkFormatError(
                    f"layer {i}: in-dim {layers[i].in_dim} != layer {i - 1} "
                    f"out-dim {layers[i - 1].out_dim}")
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def depth(self) -> int:
        """Number of affine layers (L)."""
        return len(self.layers)

    @property
    def hidden_sizes(self) -> list[int]:
        return [layer.out_dim for layer in self.layers[:-1]]

    def to_dict(self) -> dict:
        return {"layers": [{"weights": l.weights.tolist(), "bias": l.bias.tolist()}
                           for l in self.layers]}

    def __call__(self, x):
        return forward(self, x)


@dataclass(frozen=True)
class OutputSet:
    """The polyhedron {y : H y + d <= 0}."""

    H: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        H = _as_matrix(self.H, "H")
        d = _as_vector(self.d, "d")
        if H.shape[0] != d.shape[0]:
            raise NetworkFormatError(f"H has {H.shape[0]} rows but d has {d.shape[0]}")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "d", d)

    @property
    def n_constraints(self) -> int:
        return self.H.shape[0]

    @classmethod
    def from_box(cls, lo, hi) -> "OutputSet":
        """lo <= y <= hi as 2n half-space rows."""
        lo = _as_vector(lo, "lo")
        hi = _as_vector(hi, "hi")
        n = lo.shape[0]
        eye = np.eye(n)
        return cls(np.vstack([-eye, eye]), np.concatenate([lo, -hi]))

    def satisfied(self, y: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        """Row-wise membership test for outputs y of shape (..., out_dim)."""
        viol = y @ self.H.T + self.d
        return np.all(viol <= tol, axis=-1)

    def to_dict(self) -> dict:
        return {"H": self.H.tolist(), "d": self.d.tolist()}


@dataclass(frozen=True)
class InputBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = _as_vector(self.lo, "lo")
        hi = _as_vector(self.hi, "hi")
        if lo.shape != hi.shape:
            raise NetworkFormatError("box lo/hi length mismatch")
        if np.any(lo > hi):
            raise NetworkFormatError("box has lo > hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    def volume(self) -> float:
        return float(np.prod(self.widths))

    def contains(self, x: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        return np.all((x >= self.lo - tol) & (x <= self.hi + tol), axis=-1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.lo + rng.random((n, self.dim)) * self.widths

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}


# ---------------------------------------------------------------- loading

def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"{path}: invalid JSON ({exc})") from exc


def network_from_dict(data: dict) -> Network:
    if not isinstance(data, dict) or "layers" not in data:
        raise NetworkFormatError("missing 'layers' key")
    layers = []
    for i, entry in enumerate(data["layers"]):
        try:
            layers.append(AffineLayer(entry["weights"], entry["bias"]))
        except (KeyError, TypeError) as exc:
            raise NetworkFormatError(f"layer {i}: missing weights/bias") from exc
        except NetworkFormatError as exc:
            raise NetworkFormatError(f"layer {i}: {exc}") from exc
        except ValueError as exc:
            # ragged rows and the like
            raise NetworkFormatError(f"layer {i}: {exc}") from exc
    return Network(tuple(layers))


def load_network(path: str | Path) -> Network:
    return network_from_dict(_read_json(path))


def load_output_set(path: str | Path) -> OutputSet:
    data = _read_json(path)
    try:
        return OutputSet(data["H"], data["d"])
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkFormatError(f"{path}: bad output set ({exc})") from exc


def load_box(path: str | Path) -> InputBox:
    data = _read_json(path)
    try:
        return InputBox(data["lo"], data["hi"])
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkFormatError(f"{path}: bad box ({exc})") from exc


def save_json(obj: dict, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh)


# ---------------------------------------------------------------- evaluation

def forward(net: Network, x, record: bool = False):
    """Evaluate the network on one input or a batch (rows).

    With ``record=True`` also returns the list of hidden pre-activations.
    """
    h = np.asarray(x, dtype=float)
    if h.shape[-1] != net.input_dim:
        raise ValueError(f"input has dimension {h.shape[-1]}, network expects {net.input_dim}")
    pre = []
    for layer in net.layers[:-1]:
        z = layer(h)
        pre.append(z)
        h = np.maximum(z, 0.0)
    out = net.layers[-1](h)
    return (out, pre) if record else out


# ---------------------------------------------------------------- transforms

def fuse_affine(a: AffineLayer, b: AffineLayer) -> AffineLayer:
    """Single layer computing b(a(x))."""
    if a.out_dim != b.in_dim:
        raise ValueError(f"cannot fuse: {a.out_dim} outputs into {b.in_dim} inputs")
    return AffineLayer(b.weights @ a.weights, b.weights @ a.bias + b.bias)


def identity_layer(n: int) -> AffineLayer:
    return AffineLayer(np.eye(n), np.zeros(n))


def _interval_affine(layer: AffineLayer, lo, hi):
    wp = np.clip(layer.weights, 0, None)
    wn = np.clip(layer.weights, None, 0)
    return wp @ lo + wn @ hi + layer.bias, wp @ hi + wn @ lo + layer.bias


def interval_output_bounds(net: Network, box: InputBox):
    """Interval enclosure of the network output over ``box``."""
    lo, hi = box.lo, box.hi
    for k, layer in enumerate(net.layers):
        lo, hi = _interval_affine(layer, lo, hi)
        if k < net.depth - 1:
            lo, hi = np.maximum(lo, 0), np.maximum(hi, 0)
    return lo, hi


def concat_networks(first: Network, second: Network) -> Network:
    """Composition second∘first with the seam layers fused."""
    seam = fuse_affine(first.layers[-1], second.layers[0])
    return Network(first.layers[:-1] + (seam,) + second.layers[1:])


def stack(net: Network, t: int) -> Network:
    """t-fold composition of a square network, seams fused."""
    if net.input_dim != net.output_dim:
        raise ValueError("stack needs input_dim == output_dim")
    if t < 1:
        raise ValueError("t must be >= 1")
    out = net
    for _ in range(t - 1):
        out = concat_networks(out, net)
    return out


def _block_diag(*mats) -> np.ndarray:
    rows = sum(m.shape[0] for m in mats)
    cols = sum(m.shape[1] for m in mats)
    out = np.zeros((rows, cols))
    r = c = 0
    for m in mats:
        out[r:r + m.shape[0], c:c + m.shape[1]] = m
        r += m.shape[0]
        c += m.shape[1]
    return out


def encode_closed_loop(A, B, policy: Network, box: InputBox | None) -> Network:
    """Network for x -> A x + B policy(x), valid for x in ``box``.

    The state is carried through every ReLU stage as max(x - M, 0) + M, with
    M an interval lower bound of x over ``box`` (so the carry neurons are
    always active and add no relaxation).
    """
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("A must be square")
    if B.shape != (n, policy.output_dim):
        raise ValueError(f"B must be {n}x{policy.output_dim}, got {B.shape}")
    if policy.input_dim != n:
        raise ValueError("policy input dim must equal state dim")
    if box is None:
        raise ValueError("closed-loop encoding needs an input box for the shift constant")
    if box.dim != n:
        raise ValueError("box dimension must equal state dim")

    shift = box.lo - SHIFT_SLACK
    if policy.depth == 1:
        # purely affine policy: no ReLU stage needed
        p = policy.layers[0]
        return Network((AffineLayer(A + B @ p.weights, B @ p.bias),))

    eye = np.eye(n)
    layers = []
    first = policy.layers[0]
    layers.append(AffineLayer(np.vstack([first.weights, eye]),
                              np.concatenate([first.bias, -shift])))
    for mid in policy.layers[1:-1]:
        # carry is already non-negative after the first ReLU: pass it as is
        layers.append(AffineLayer(_block_diag(mid.weights, eye),
                                  np.concatenate([mid.bias, np.zeros(n)])))
    last = policy.layers[-1]
    layers.append(AffineLayer(np.hstack([B @ last.weights, A]),
                              B @ last.bias + A @ shift))
    return Network(tuple(layers))


def closed_loop_reach_boxes(A, B, policy: Network, box: InputBox, steps: int) -> list[InputBox]:
    """Interval enclosures of the state at times 0..steps-1 starting in ``box``."""
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    boxes = [box]
    for _ in range(steps - 1):
        step = encode_closed_loop(A, B, policy, boxes[-1])
        lo, hi = interval_output_bounds(step, boxes[-1])
        boxes.append(InputBox(lo, hi))
    return boxes


def unroll_closed_loop(A, B, policy: Network, box: InputBox, steps: int) -> Network:
    """``steps`` closed-loop transitions from ``box``, each with its own sound shift."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    boxes = closed_loop_reach_boxes(A, B, policy, box, steps)
    net = encode_closed_loop(A, B, policy, boxes[0])
    for k in range(1, steps):
        net = concat_networks(net, encode_closed_loop(A, B, policy, boxes[k]))
    return net


def encode_max_gap(net: Network, idx_a: int, idx_b: int, idx_ood: int,
                   lower_shift: Sequence[float]) -> Network:
    """Append a stage whose scalar output is max(y_a, y_b) - y_ood.

    ``lower_shift`` holds lower bounds for (y_b, y_ood); both channels are
    passed through the extra ReLU as max(y - M, 0) + M.
    """
    m = net.output_dim
    idx = (idx_a, idx_b, idx_ood)
    if len(set(idx)) != 3:
        raise ValueError("indices must be distinct")
    if any(not 0 <= i < m for i in idx):
        raise IndexError(f"output index out of range for {m} outputs")
    shift = _as_vector(lower_shift, "lower_shift")
    if shift.shape != (2,):
        raise ValueError("lower_shift must hold two values (y_b, y_ood)")
    m_b, m_ood = shift
    sel = np.zeros((3, m))
    sel[0, idx_a], sel[0, idx_b] = 1.0, -1.0
    sel[1, idx_b] = 1.0
    sel[2, idx_ood] = 1.0
    gap_in = AffineLayer(sel, np.array([0.0, -m_b, -m_ood]))
    gap_out = AffineLayer(np.array([[1.0, 1.0, -1.0]]), np.array([m_b - m_ood]))
    last = fuse_affine(net.layers[-1], gap_in)
    return Network(net.layers[:-1] + (last, gap_out))


def max_gap_shift(net: Network, box: InputBox, idx_b: int, idx_ood: int) -> np.ndarray:
    """Interval lower bounds (slackened) of outputs idx_b and idx_ood over ``box``."""
    lo, _ = interval_output_bounds(net, box)
    return np.array([lo[idx_b], lo[idx_ood]]) - SHIFT_SLACK


def fold_output_constraints(net: Network, out_set: OutputSet) -> Network:
    """Network whose output is H f(x) + d, so membership reads output <= 0."""
    if out_set.H.shape[1] != net.output_dim:
        raise ValueError(f"H has {out_set.H.shape[1]} columns, network outputs {net.output_dim}")
    last = net.layers[-1]
    folded = AffineLayer(out_set.H @ last.weights, out_set.H @ last.bias + out_set.d)
    return Network(net.layers[:-1] + (folded,))


def append_affine(net: Network, layer: AffineLayer) -> Network:
    """Network computing layer(net(x)), fused into the last layer."""
    return Network(net.layers[:-1] + (fuse_affine(net.layers[-1], layer),))
