"""Regularized least-squares linear models fitted with L-BFGS.

Features are standardized implicitly (the sparse matrix is never densified):
with column means m and deviations s, the standardized product is
``Z b = X (b / s) - m . (b / s)``. The intercept is unpenalized and, because
standardized columns have zero mean, equals the target mean exactly; only the
slopes are optimized. LASSO uses the orthant-wise (OWL-QN) variant.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .sparse import SparseMatrix, Standardizer

log = logging.getLogger(__name__)

RIDGE = "ridge"
LASSO = "lasso"


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    n_iter: int
    converged: bool


def _two_loop(g: np.ndarray, mem: deque) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(mem):
        a = rho * s.dot(q)
        q -= a * y
        alphas.append(a)
    if mem:
        s, y, _ = mem[-1]
        q *= s.dot(y) / y.dot(y)
    for (s, y, rho), a in zip(mem, reversed(alphas)):
        b = rho * y.dot(q)
        q += s * (a - b)
    return q


def _pseudo_gradient(x: np.ndarray, g: np.ndarray, l1: float) -> np.ndarray:
    pg = g + l1 * np.sign(x)
    zero = x == 0
    gz = g[zero]
    pg[zero] = np.where(gz + l1 < 0, gz + l1, np.where(gz - l1 > 0, gz - l1, 0.0))
    return pg


def lbfgs(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    l1: float = 0.0,
    memory: int = 10,
    tol: float = 1e-6,
    max_iter: int = 500,
) -> OptimResult:
    """Minimize ``fun(x) + l1 * |x|_1`` where ``fun`` returns (value, gradient).

    Converged when the (pseudo-)gradient norm drops below ``tol``.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = fun(x)
    F = f + l1 * np.abs(x).sum()
    mem: deque = deque(maxlen=memory)
    for it in range(max_iter):
        pg = _pseudo_gradient(x, g, l1) if l1 > 0 else g
        gnorm = float(np.linalg.norm(pg))
        if gnorm < tol:
            return OptimResult(x, F, gnorm, it, True)
        d = -_two_loop(pg, mem)
        if l1 > 0:
            d[d * pg >= 0] = 0.0
        if d.dot(pg) >= 0 or not np.all(np.isfinite(d)):
            mem.clear()
            d = -pg
        if l1 > 0:
            orthant = np.sign(x)
            orthant[x == 0] = np.sign(-pg[x == 0])
        step = 1.0 if mem else min(1.0, 1.0 / gnorm)
        accepted = False
        for _ in range(60):
            x_new = x + step * d
            if l1 > 0:
                x_new[np.sign(x_new) != orthant] = 0.0
            f_new, g_new = fun(x_new)
            F_new = f_new + l1 * np.abs(x_new).sum()
            if F_new <= F + 1e-4 * pg.dot(x_new - x):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            return OptimResult(x, F, gnorm, it, False)
        s = x_new - x
        y = g_new - g
        sy = s.dot(y)
        if sy > 1e-16 * max(1.0, y.dot(y)):
            mem.append((s, y, 1.0 / sy))
        x, f, g, F = x_new, f_new, g_new, F_new
    pg = _pseudo_gradient(x, g, l1) if l1 > 0 else g
    gnorm = float(np.linalg.norm(pg))
    return OptimResult(x, F, gnorm, max_iter, gnorm < tol)


@dataclass
class LinearModel:
    """y = intercept + sum_j coef_j x_j on raw (unstandardized) features.

    ``std_coef`` and ``std_intercept`` are the same model on standardized
    features; dropped (constant) columns have zero coefficients.
    """

    intercept: float
    coef: np.ndarray
    std_intercept: float
    std_coef: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    keep: np.ndarray
    regularization: str
    lam: float
    converged: bool
    n_iter: int

    def predict(self, matrix: SparseMatrix) -> np.ndarray:
        return self.intercept + matrix.csr @ self.coef

    def contributions(self, matrix: SparseMatrix, row: int) -> list[tuple[int, float]]:
        """Non-zero per-feature terms coef_j * x_j for one row."""
        out = []
        for j, v in matrix.row(row):
            c = self.coef[j] * v
            if c != 0.0:
                out.append((j, float(c)))
        return out

    def to_dict(self) -> dict:
        return {
            "intercept": self.intercept,
            "coef": self.coef.tolist(),
            "std_intercept": self.std_intercept,
            "std_coef": self.std_coef.tolist(),
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "keep": self.keep.tolist(),
            "regularization": self.regularization,
            "lam": self.lam,
            "converged": self.converged,
            "n_iter": self.n_iter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        return cls(
            float(d["intercept"]),
            np.asarray(d["coef"], dtype=np.float64),
            float(d["std_intercept"]),
            np.asarray(d["std_coef"], dtype=np.float64),
            np.asarray(d["means"], dtype=np.float64),
            np.asarray(d["stds"], dtype=np.float64),
            np.asarray(d["keep"], dtype=bool),
            d["regularization"],
            float(d["lam"]),
            bool(d["converged"]),
            int(d["n_iter"]),
        )


def fit_linear(
    matrix: SparseMatrix,
    y: np.ndarray,
    regularization: str = RIDGE,
    lam: float = 0.0,
    tol: float = 1e-6,
    max_iter: int = 500,
) -> LinearModel:
    """Fit ridge (lam * sum b^2) or LASSO (lam * sum |b|) on standardized features.

    The data term is the mean squared error halved, so ``lam`` is comparable
    across sample sizes.
    """
    if regularization not in (RIDGE, LASSO):
        raise ValueError(f"unknown regularization {regularization!r}")
    if lam < 0:
        raise ValueError("regularization strength must be >= 0")
    y = np.asarray(y, dtype=np.float64)
    n, p = matrix.shape
    if len(y) != n:
        raise ValueError(f"{len(y)} targets for {n} rows")
    if n == 0:
        raise ValueError("cannot fit a model on zero rows")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(matrix.csr.data)):
        raise ValueError("non-finite values in features or targets")

    st = Standardizer.fit(matrix)
    keep = st.keep
    x = matrix.csr[:, keep]
    mu = st.means[keep]
    sd = st.stds[keep]
    pk = x.shape[1]
    if lam == 0 and pk > n:
        raise ValueError(f"{pk} effective features exceed {n} rows; use lam > 0")

    ybar = float(y.mean())
    yc = y - ybar
    xt = x.T.tocsr()

    def objective(b: np.ndarray) -> tuple[float, np.ndarray]:
        w = b / sd
        r = yc - (x @ w - mu.dot(w))
        f = 0.5 * r.dot(r) / n
        g = -((xt @ r) - mu * r.sum()) / sd / n
        if regularization == RIDGE and lam > 0:
            f += lam * b.dot(b)
            g = g + 2.0 * lam * b
        return f, g

    l1 = lam if regularization == LASSO else 0.0
    if pk:
        res = lbfgs(objective, np.zeros(pk), l1=l1, tol=tol, max_iter=max_iter)
        b = res.x
        converged, n_iter = res.converged, res.n_iter
        if not converged:
            log.warning("L-BFGS stopped after %d iterations (grad %.3g)", n_iter, res.grad_norm)
    else:
        b = np.zeros(0)
        converged, n_iter = True, 0

    std_coef = np.zeros(p)
    std_coef[keep] = b
    coef = np.zeros(p)
    coef[keep] = b / sd
    intercept = ybar - float(mu.dot(b / sd)) if pk else ybar
    return LinearModel(
        intercept=intercept,
        coef=coef,
        std_intercept=ybar,
        std_coef=std_coef,
        means=st.means,
        stds=st.stds,
        keep=keep,
        regularization=regularization,
        lam=float(lam),
        converged=converged,
        n_iter=n_iter,
    )
