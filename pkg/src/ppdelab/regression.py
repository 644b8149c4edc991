"""Non-anticipative feature maps and the ridge regression used for every
conditional expectation in the package."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import RegressionError
from .paths import PathView, running_integral, running_sup_norm

FEATURES = ("value", "value_sq", "integral", "sup")
DEFAULT_FEATURES = ("value", "integral", "sup")
RIDGE_SCALE = 1e-8


def check_features(names: Sequence[str]) -> tuple:
    names = tuple(names)
    unknown = [n for n in names if n not in FEATURES]
    if unknown:
        raise ValueError(f"unknown features {unknown}; choose from {FEATURES}")
    return names


def feature_tensor(values: np.ndarray, dt: float, names: Sequence[str]) -> np.ndarray:
    """Features of every path at every node: (n_paths, n_nodes, n_features).

    Each column at node j depends only on nodes 0..j.
    """
    cols = []
    for name in names:
        if name == "value":
            cols.append(values)
        elif name == "value_sq":
            cols.append(values**2)
        elif name == "integral":
            cols.append(running_integral(values, dt))
        elif name == "sup":
            cols.append(running_sup_norm(values)[..., None])
    if not cols:
        return np.zeros(values.shape[:2] + (0,))
    return np.concatenate(cols, axis=2)


def features_at(view: PathView, names: Sequence[str]) -> np.ndarray:
    """Features at the view's node, computed from its history only."""
    return feature_tensor(view.history, view.dt, names)[:, -1]


@dataclass
class Fit:
    intercept: np.ndarray  # () or (m,)
    coef: np.ndarray  # (p,) or (p, m)
    rank_deficient: bool = False

    def predict(self, phi: np.ndarray) -> np.ndarray:
        return self.intercept + phi @ self.coef

    def shifted(self, delta: float) -> "Fit":
        return Fit(self.intercept + delta, self.coef, self.rank_deficient)

    def scaled(self, factor: float) -> "Fit":
        return Fit(self.intercept * factor, self.coef * factor, self.rank_deficient)


def ridge_fit(phi: np.ndarray, y: np.ndarray, scale: float = RIDGE_SCALE) -> Fit:
    """Least squares with an unpenalized intercept and ridge penalty
    ``scale * trace(G) / p`` on the centered Gram matrix ``G``.

    Constant targets are reproduced exactly (coefficients come out as 0).
    """
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise RegressionError("non-finite regression targets")
    if not np.all(np.isfinite(phi)):
        raise RegressionError("non-finite features")
    n, p = phi.shape
    y_mean = y.mean(axis=0)
    if p == 0:
        return Fit(y_mean, np.zeros((0,) + y.shape[1:]))
    phi_mean = phi.mean(axis=0)
    pc = phi - phi_mean
    gram = pc.T @ pc
    trace = float(np.trace(gram))
    if trace <= 0.0:
        return Fit(y_mean, np.zeros((p,) + y.shape[1:]), rank_deficient=True)
    eig = np.linalg.eigvalsh(gram)
    deficient = bool(eig[0] <= 1e-10 * eig[-1])
    lam = scale * trace / p
    yc = y - y_mean
    if not np.any(yc):
        coef = np.zeros((p,) + y.shape[1:])
    else:
        coef = np.linalg.solve(gram + lam * np.eye(p), pc.T @ yc)
    if not np.all(np.isfinite(coef)):
        raise RegressionError("regression produced non-finite coefficients")
    return Fit(y_mean - phi_mean @ coef, coef, deficient)
