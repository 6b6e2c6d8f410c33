"""Half-space sets, direction generation and Monte-Carlo volume ratios."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .network import InputBox, Network, OutputSet, forward

MEMBER_TOL = 1e-9


@dataclass(frozen=True)
class HalfSpace:
    """{x : c.x >= lb}"""

    c: np.ndarray
    lb: float

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).reshape(-1)
        if not np.all(np.isfinite(c)) or not np.any(c):
            raise ValueError("half-space normal must be finite and nonzero")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "lb", float(self.lb))


@dataclass
class Leaf:
    box: InputBox
    halfspaces: list = field(default_factory=list)

    def matrix(self):
        if not self.halfspaces:
            return np.zeros((0, self.box.dim)), np.zeros(0)
        return (np.array([h.c for h in self.halfspaces]),
                np.array([h.lb for h in self.halfspaces]))

    def contains_many(self, X: np.ndarray, tol: float = MEMBER_TOL) -> np.ndarray:
        inside = self.box.contains(X, tol)
        C, lb = self.matrix()
        if C.shape[0]:
            inside &= np.all(X @ C.T >= lb - tol, axis=-1)
        return inside

    def to_dict(self) -> dict:
        return {"box": self.box.to_dict(),
                "halfspaces": [{"c": h.c.tolist(), "lb": h.lb} for h in self.halfspaces]}


@dataclass
class PolytopeUnion:
    leaves: list = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.leaves

    def contains_many(self, X: np.ndarray, tol: float = MEMBER_TOL) -> np.ndarray:
        X = np.atleast_2d(X)
        out = np.zeros(X.shape[0], dtype=bool)
        for leaf in self.leaves:
            out |= leaf.contains_many(X, tol)
        return out

    def to_dict(self) -> dict:
        return {"leaves": [leaf.to_dict() for leaf in self.leaves]}

    @classmethod
    def from_dict(cls, data: dict) -> "PolytopeUnion":
        leaves = []
        for entry in data["leaves"]:
            box = InputBox(entry["box"]["lo"], entry["box"]["hi"])
            hs = [HalfSpace(h["c"], h["lb"]) for h in entry["halfspaces"]]
            leaves.append(Leaf(box, hs))
        return cls(leaves)


def contains(union: PolytopeUnion, x, tol: float = MEMBER_TOL) -> bool:
    x = np.asarray(x, dtype=float).reshape(-1)
    if union.leaves and x.shape[0] != union.leaves[0].box.dim:
        raise ValueError("point dimension does not match the set")
    return bool(union.contains_many(x[None, :], tol)[0])


def gen_directions_2d(k: int) -> np.ndarray:
    """k unit vectors at equally spaced angles, the first along +x."""
    if k < 1:
        raise ValueError("need at least one direction")
    theta = 2 * np.pi * np.arange(k) / k
    return np.stack([np.cos(theta), np.sin(theta)], axis=1)


def gen_directions_box(d: int) -> np.ndarray:
    """+e_i and -e_i for every axis."""
    if d < 1:
        raise ValueError("dimension must be >= 1")
    eye = np.eye(d)
    return np.vstack([eye, -eye])


@dataclass
class RatioEstimate:
    ratio: float | None          # None when no sample is feasible
    n_samples: int
    n_inside: int
    n_feasible: int
    seed: int
    n_feasible_outside: int = 0  # soundness violations among the samples

    @property
    def empirically_empty(self) -> bool:
        return self.n_feasible == 0

    @property
    def sigma(self) -> float:
        """Delta-method standard error of the ratio."""
        if not self.n_feasible or not self.n_inside:
            return math.inf
        p_in = self.n_inside / self.n_samples
        p_f = self.n_feasible / self.n_samples
        rel = (1 - p_in) / self.n_inside + (1 - p_f) / self.n_feasible
        return float(self.ratio * math.sqrt(max(rel, 0.0)))

    def to_dict(self) -> dict:
        return {"ratio": self.ratio, "n_samples": self.n_samples, "n_inside": self.n_inside,
                "n_feasible": self.n_feasible, "n_feasible_outside": self.n_feasible_outside,
                "seed": self.seed, "empirically_empty": self.empirically_empty}


def approx_ratio(union: PolytopeUnion, net: Network, out_set: OutputSet, box: InputBox,
                 n_samples: int, seed: int = 0, chunk: int = 250_000) -> RatioEstimate:
    """vol(union) / vol(preimage) from one shared set of uniform box samples."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    inside = feasible = outside = 0
    left = n_samples
    while left > 0:
        m = min(chunk, left)
        X = box.sample(m, rng)
        in_set = union.contains_many(X)
        feas = out_set.satisfied(forward(net, X), tol=1e-9)
        inside += int(in_set.sum())
        feasible += int(feas.sum())
        outside += int((feas & ~in_set).sum())
        left -= m
    ratio = inside / feasible if feasible else None
    return RatioEstimate(ratio, n_samples, inside, feasible, seed, outside)


def halfspaces_csv(union: PolytopeUnion) -> str:
    """One row per half-space: leaf index, c_1..c_d, lb."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if union.leaves:
        d = union.leaves[0].box.dim
        writer.writerow(["leaf"] + [f"c_{i + 1}" for i in range(d)] + ["lb"])
    for k, leaf in enumerate(union.leaves):
        for h in leaf.halfspaces:
            writer.writerow([k] + [repr(float(v)) for v in h.c] + [repr(h.lb)])
    return buf.getvalue()


# ---------------------------------------------------------------- 2D plotting

def polygon_2d(leaf: Leaf) -> np.ndarray:
    """Vertices (counter-clockwise) of a 2D leaf: box clipped by its half-spaces."""
    lo, hi = leaf.box.lo, leaf.box.hi
    poly = [np.array([lo[0], lo[1]]), np.array([hi[0], lo[1]]),
            np.array([hi[0], hi[1]]), np.array([lo[0], hi[1]])]
    for h in leaf.halfspaces:
        poly = _clip(poly, h.c, h.lb)
        if not poly:
            break
    return np.array(poly).reshape(-1, 2)


def _clip(poly, c, lb):
    # Sutherland-Hodgman against c.x >= lb
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        fp, fq = c @ p - lb, c @ q - lb
        if fp >= 0:
            out.append(p)
        if (fp >= 0) != (fq >= 0):
            t = fp / (fp - fq)
            out.append(p + t * (q - p))
    return out


class SvgScene:
    """Minimal SVG writer for 2D preimage panels."""

    def __init__(self, lo, hi, size: int = 480, margin: int = 24):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.size = size
        self.margin = margin
        self.items: list[str] = []

    def _xy(self, p):
        span = np.where(self.hi > self.lo, self.hi - self.lo, 1.0)
        s = (np.asarray(p) - self.lo) / span
        inner = self.size - 2 * self.margin
        return self.margin + s[..., 0] * inner, self.size - self.margin - s[..., 1] * inner

    def points(self, X: np.ndarray, color: str = "#2ca02c", r: float = 0.8, limit: int = 4000):
        X = np.asarray(X)[:limit]
        xs, ys = self._xy(X)
        for x, y in zip(xs, ys):
            self.items.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r}" fill="{color}"/>')

    def polygon(self, verts: np.ndarray, stroke: str = "#1f77b4", fill: str = "none"):
        if len(verts) < 2:
            return
        xs, ys = self._xy(verts)
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
        self.items.append(f'<polygon points="{pts}" stroke="{stroke}" '
                          f'stroke-width="1.5" fill="{fill}"/>')

    def box(self, lo, hi, stroke: str = "#d62728"):
        verts = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
        self.polygon(verts, stroke=stroke, fill="none")

    def text(self, s: str):
        self.items.append(f'<text x="{self.margin}" y="{self.margin - 6}" '
                          f'font-size="12" font-family="sans-serif">{s}</text>')

    def render(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.size}" '
                f'height="{self.size}" viewBox="0 0 {self.size} {self.size}">')
        frame = (f'<rect x="{self.margin}" y="{self.margin}" width="{self.size - 2 * self.margin}" '
                 f'height="{self.size - 2 * self.margin}" fill="white" stroke="#888"/>')
        return "\n".join([head, frame] + self.items + ["</svg>"]) + "\n"


def union_svg(union: PolytopeUnion, samples: np.ndarray, view: InputBox,
              obstacle: InputBox | None = None, title: str = "") -> str:
    scene = SvgScene(view.lo, view.hi)
    if len(samples):
        scene.points(samples)
    for leaf in union.leaves:
        scene.polygon(polygon_2d(leaf))
    if obstacle is not None and obstacle.dim == 2:
        scene.box(obstacle.lo, obstacle.hi)
    if title:
        scene.text(title)
    return scene.render()
