"""Random small instances shared by the test modules."""

from __future__ import annotations

import numpy as np

from invprop.network import AffineLayer, InputBox, Network, OutputSet, forward


def random_net(rng, sizes, scale: float = 1.0) -> Network:
    layers = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        w = rng.standard_normal((b, a)) * scale / np.sqrt(a)
        layers.append(AffineLayer(w, 0.3 * rng.standard_normal(b)))
    return Network(tuple(layers))


def random_instance(rng, n_in: int | None = None, hidden=None, n_rows: int = 2,
                    margin: float = 0.05):
    """(net, box, out_set, x_star) with x_star feasible, so the preimage is non-empty."""
    n_in = n_in or int(rng.integers(2, 4))
    if hidden is None:
        hidden = [int(rng.integers(3, 7)) for _ in range(int(rng.integers(1, 3)))]
    net = random_net(rng, [n_in] + list(hidden) + [2])
    box = InputBox(-np.ones(n_in), np.ones(n_in))
    x_star = rng.uniform(-0.8, 0.8, n_in)
    y_star = forward(net, x_star)
    H = rng.standard_normal((n_rows, 2))
    d = -H @ y_star - margin * rng.uniform(0.5, 2.0, n_rows)
    return net, box, OutputSet(H, d), x_star


def unit(rng, n: int) -> np.ndarray:
    c = rng.standard_normal(n)
    return c / np.linalg.norm(c)


# acceptance results, printed in the terminal summary (see conftest.py)
ACCEPTANCE: dict = {}


def record(key: str, ok: bool, detail: str) -> None:
    line = f"{key} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE[key] = line
    print(line)
