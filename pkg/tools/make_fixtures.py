"""Regenerate the bundled demo networks in src/invprop/data/.

Development-only: needs scikit-learn, which the package itself does not use.
"""

import json
from pathlib import Path

import numpy as np
from scipy.linalg import solve_discrete_are
from sklearn.neural_network import MLPClassifier, MLPRegressor

DATA = Path(__file__).resolve().parents[1] / "src" / "invprop" / "data"


def to_json(coefs, intercepts):
    return {"layers": [{"weights": np.asarray(w).T.tolist(), "bias": np.asarray(b).tolist()}
                       for w, b in zip(coefs, intercepts)]}


def double_integrator_policy(seed=0):
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    B = np.array([[0.5], [1.0]])
    Q, R = np.eye(2), np.eye(1)
    P = solve_discrete_are(A, B, Q, R)
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    rng = np.random.default_rng(seed)
    X = rng.uniform([-6, -4], [6, 4], size=(20000, 2))
    u = np.clip(-(X @ K.T), -1.0, 1.0).ravel()
    reg = MLPRegressor(hidden_layer_sizes=(10, 5), activation="relu", max_iter=2000,
                       tol=1e-7, random_state=seed)
    reg.fit(X, u)
    dyn = {"A": A.tolist(), "B": B.tolist(), "domain": {"lo": [-22.0, -3.0], "hi": [6.0, 6.0]}}
    return to_json(reg.coefs_, reg.intercepts_), dyn


def ood_classifier(seed=0):
    rng = np.random.default_rng(seed)
    c0 = rng.normal([-1.5, 0.0], 0.35, size=(300, 2))
    c1 = rng.normal([1.5, 0.0], 0.35, size=(300, 2))
    train = np.vstack([c0, c1])
    cand = rng.uniform(-4, 4, size=(6000, 2))
    dist = np.min(np.linalg.norm(cand[:, None, :] - train[None, :, :], axis=2), axis=1)
    ood = cand[dist > 1.0][:1200]
    X = np.vstack([c0, c1, ood])
    y = np.concatenate([np.zeros(300), np.ones(300), np.full(len(ood), 2)]).astype(int)
    clf = MLPClassifier(hidden_layer_sizes=(16, 16), activation="relu", max_iter=3000,
                        random_state=seed)
    clf.fit(X, y)
    return to_json(clf.coefs_, clf.intercepts_)


if __name__ == "__main__":
    DATA.mkdir(parents=True, exist_ok=True)
    policy, dyn = double_integrator_policy()
    (DATA / "double_integrator_policy.json").write_text(json.dumps(policy))
    (DATA / "double_integrator.json").write_text(json.dumps(dyn))
    (DATA / "double_integrator_obstacle.json").write_text(
        json.dumps({"lo": [4.5, -0.25], "hi": [5.0, 0.25]}))
    (DATA / "ood_classifier.json").write_text(json.dumps(ood_classifier()))
    (DATA / "ood_box.json").write_text(json.dumps({"lo": [-4.0, -4.0], "hi": [4.0, 4.0]}))
    (DATA / "toy_network.json").write_text(json.dumps(
        {"layers": [{"weights": [[1.0], [1.0]], "bias": [0.0, 1.0]},
                    {"weights": [[1.0, 1.0]], "bias": [0.0]}]}))
    (DATA / "toy_outset.json").write_text(json.dumps({"H": [[-1.0], [1.0]], "d": [1.0, -1.02]}))
    (DATA / "toy_box.json").write_text(json.dumps({"lo": [-2.0], "hi": [2.0]}))
