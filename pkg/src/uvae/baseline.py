"""Partial least squares regression (NIPALS, PLS2) as a composition baseline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import ETA

MAX_ITER = 500
TOL = 1e-12


class PlsConvergenceError(RuntimeError):
    def __init__(self, component: int):
        super().__init__(f"NIPALS did not converge for component {component} within {MAX_ITER} iterations")
        self.component = component


@dataclass
class PlsModel:
    k: int
    weights: np.ndarray  # W, (p, k)
    x_loadings: np.ndarray  # P, (p, k)
    y_loadings: np.ndarray  # Q, (m, k)
    scores: np.ndarray  # T, (n, k)
    x_mean: np.ndarray
    y_mean: np.ndarray
    coef: np.ndarray  # B, (p, m): centered X -> centered Y

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d) -> PlsModel:
        return cls(**{k: (v if k == "k" else np.asarray(v, dtype=np.float64)) for k, v in d.items()})


def pls_fit(X, Y, k: int) -> PlsModel:
    """Extract ``k`` latent components by NIPALS, deflating X only.

    Each component starts from the Y column of largest remaining variance and
    iterates until the weight vector moves less than 1e-12.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or len(X) != len(Y):
        raise ValueError("X and Y must be 2-D with equal row counts")
    k = int(k)
    if k < 1 or k > min(X.shape):
        raise ValueError(f"k must lie in 1..{min(X.shape)}")
    x_mean, y_mean = X.mean(0), Y.mean(0)
    E, F = X - x_mean, Y - y_mean
    if not np.any(E):
        raise ValueError("X has zero variance")
    p, m = X.shape[1], Y.shape[1]
    W, P, Q, T = (np.zeros((p, k)), np.zeros((p, k)), np.zeros((m, k)), np.zeros((len(X), k)))
    for a in range(k):
        u = F[:, np.argmax(F.var(0))].copy()
        if not np.any(u):
            u = E[:, np.argmax(E.var(0))].copy()
        w = np.zeros(p)
        for _ in range(MAX_ITER):
            w_new = E.T @ u
            norm = np.linalg.norm(w_new)
            if norm == 0.0:
                raise PlsConvergenceError(a)
            w_new /= norm
            t = E @ w_new
            tt = t @ t
            q = F.T @ t / tt
            qq = q @ q
            u = F @ q / qq if qq > 0 else t
            done = np.linalg.norm(w_new - w) < TOL
            w = w_new
            if done or m == 1 or qq == 0:
                break
        else:
            raise PlsConvergenceError(a)
        t = E @ w
        tt = t @ t
        if tt == 0.0:
            raise PlsConvergenceError(a)
        pa = E.T @ t / tt
        qa = F.T @ t / tt
        E = E - np.outer(t, pa)
        W[:, a], P[:, a], Q[:, a], T[:, a] = w, pa, qa, t
    coef = W @ np.linalg.solve(P.T @ W, Q.T)
    return PlsModel(k, W, P, Q, T, x_mean, y_mean, coef)


def pls_predict(model: PlsModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != len(model.x_mean):
        raise ValueError(f"X must have {len(model.x_mean)} columns")
    return (X - model.x_mean) @ model.coef + model.y_mean


def to_simplex(Y, eta: float = ETA) -> np.ndarray:
    """Clamp at zero and renormalize; an all-zero row becomes uniform."""
    Y = np.clip(np.asarray(Y, dtype=np.float64), 0.0, None)
    s = Y.sum(axis=1, keepdims=True)
    k = Y.shape[1]
    return np.where(s > eta, Y / np.where(s > eta, s, 1.0), 1.0 / k)


def pls_predict_composition(model: PlsModel, X) -> np.ndarray:
    return to_simplex(pls_predict(model, X))
