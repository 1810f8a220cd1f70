"""Linear hinge-loss classifier trained by projected subgradient descent.

One-vs-rest with an augmented bias column. The primal objective per class
is lambda/2 ||w||^2 + mean(max(0, 1 - y * (x . w))) with lambda = 1/(C n),
stepped full-batch with the classic 1/(lambda t) rate and norm projection.
Fitting is deterministic: weights start at zero and the data order never
changes.
"""

from __future__ import annotations

import numpy as np


def kfold_indices(n: int, folds: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint (train, test) index splits; a pure function of (seed, n, folds)."""
    if not 2 <= folds <= n:
        raise ValueError(f"need 2 <= folds <= n, got folds={folds}, n={n}")
    order = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(order, folds)
    out = []
    for i, test in enumerate(parts):
        train = np.concatenate([p for j, p in enumerate(parts) if j != i])
        out.append((train, test))
    return out


class LinearSVM:
    def __init__(self, c: float = 1.0, n_iters: int = 800):
        self.c = c
        self.n_iters = n_iters
        self.weights: np.ndarray | None = None  # (n_classes, n_features + 1)
        self.n_classes = 0

    def fit(self, features: np.ndarray, labels: np.ndarray) -> "LinearSVM":
        x = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels, dtype=np.int64)
        n = x.shape[0]
        self.n_classes = int(y.max()) + 1
        xb = np.concatenate([x, np.ones((n, 1))], axis=1)
        lam = 1.0 / (self.c * n)
        radius = 1.0 / np.sqrt(lam)
        self.weights = np.zeros((self.n_classes, xb.shape[1]))
        for cls in range(self.n_classes):
            target = np.where(y == cls, 1.0, -1.0)
            w = np.zeros(xb.shape[1])
            for t in range(1, self.n_iters + 1):
                eta = 1.0 / (lam * t)
                margin = target * (xb @ w)
                violating = margin < 1.0
                grad = lam * w - (target[violating] @ xb[violating]) / n
                w = w - eta * grad
                norm = np.linalg.norm(w)
                if norm > radius:
                    w = w * (radius / norm)
            self.weights[cls] = w
        return self

    def decision(self, features: np.ndarray) -> np.ndarray:
        if self.weights is None:
            raise RuntimeError("fit before predict")
        x = np.asarray(features, dtype=np.float64)
        xb = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
        return xb @ self.weights.T

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.decision(features).argmax(axis=1)  # ties to the lowest class
