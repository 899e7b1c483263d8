"""Comparison estimators: linear and polynomial 2SLS, direct polynomial and
direct neural-network regression."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from agmm.data import Dataset, Rng
from agmm.mlp import AdamState, MlpModel, adam_step, forward, forward_vjp, init_params


@dataclass(frozen=True)
class RidgeSolver:
    """``min ||X b - y||^2 + lam ||b||^2`` over the penalised columns.

    Columns listed in ``unpenalized`` (by default the leading intercept) carry
    no penalty. ``lam > 0`` uses a Cholesky solve of the normal equations;
    ``lam == 0`` falls back to the minimum-norm least-squares solution.
    """

    lam: float = 0.0
    unpenalized: tuple[int, ...] = (0,)

    def solve(self, X, y) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if self.lam < 0:
            raise ValueError("ridge penalty must be nonnegative")
        if self.lam == 0:
            return np.linalg.lstsq(X, y, rcond=None)[0]
        pen = np.full(X.shape[1], self.lam)
        pen[list(self.unpenalized)] = 0.0
        A = X.T @ X + np.diag(pen)
        try:
            return scipy.linalg.cho_solve(scipy.linalg.cho_factor(A), X.T @ y)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(A, X.T @ y, rcond=None)[0]


def ols(X, y) -> np.ndarray:
    return RidgeSolver(0.0).solve(X, y)


def poly_features(w, degree: int = 3) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    return np.column_stack([w**k for k in range(degree + 1)])


def instrument_poly_basis(x, degree: int = 3) -> np.ndarray:
    """All monomials of ``(x_1, x_2)`` up to total degree ``degree``, constant
    first; only powers of ``x_1`` when a single instrument is available."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.shape[1] == 0:
        raise ValueError("polynomial 2SLS needs at least one instrument")
    if x.shape[1] == 1:
        return poly_features(x[:, 0], degree)
    x1, x2 = x[:, 0], x[:, 1]
    cols = [x1**a * x2 ** (k - a) for k in range(degree + 1) for a in range(k, -1, -1)]
    return np.column_stack(cols)


@dataclass
class FittedEstimator:
    kind: str
    coef: np.ndarray | None = None
    degree: int = 1
    model: object = None
    meta: dict = field(default_factory=dict)

    def predict(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64).reshape(-1)
        if self.model is not None:
            if isinstance(self.model, MlpModel):
                return forward(self.model, w)
            return self.model.predict(w)
        return poly_features(w, self.degree) @ self.coef

    def __call__(self, w):
        return self.predict(w)

    def to_json(self) -> dict:
        out = {"kind": self.kind, "degree": self.degree, "meta": self.meta}
        if self.coef is not None:
            out["coef"] = self.coef.tolist()
        if self.model is not None and hasattr(self.model, "to_json"):
            out["model"] = self.model.to_json()
        return out


def _r2(y, fitted) -> float:
    ss = np.sum((y - y.mean()) ** 2)
    return float(1.0 - np.sum((y - fitted) ** 2) / ss) if ss > 0 else 0.0


def fit_2sls(ds: Dataset) -> FittedEstimator:
    """Linear two-stage least squares with all instruments."""
    if ds.n <= ds.d + 1:
        raise ValueError(f"2SLS needs n > d + 1 (n={ds.n}, d={ds.d})")
    Z = np.column_stack([np.ones(ds.n), ds.x])
    pi = ols(Z, ds.w)
    w_hat = Z @ pi
    beta = ols(np.column_stack([np.ones(ds.n), w_hat]), ds.y)
    first_r2 = _r2(ds.w, w_hat)
    return FittedEstimator(
        "2SLS",
        coef=beta,
        degree=1,
        meta={"first_stage_r2": first_r2, "weak_instrument": first_r2 < 0.01},
    )


def default_ridge(n: int) -> float:
    return 1e-3 * n


def fit_2sls_poly(ds: Dataset, lambda_ridge: float | None = None, degree: int = 3) -> FittedEstimator:
    """Cubic 2SLS: ridge first stages of ``w, w^2, w^3`` on the instrument
    polynomial basis, then OLS of ``y`` on the fitted powers."""
    lam = default_ridge(ds.n) if lambda_ridge is None else lambda_ridge
    Z = instrument_poly_basis(ds.x, degree)
    if ds.n < Z.shape[1]:
        raise ValueError(f"n={ds.n} too small for {Z.shape[1]} first-stage terms")
    solver = RidgeSolver(lam)
    first = [solver.solve(Z, ds.w**k) for k in range(1, degree + 1)]
    fitted = np.column_stack([np.ones(ds.n)] + [Z @ c for c in first])
    beta = ols(fitted, ds.y)
    return FittedEstimator(
        "2SLSPoly",
        coef=beta,
        degree=degree,
        meta={"lambda_ridge": lam, "first_stage": [c.tolist() for c in first]},
    )


def fit_direct_poly(ds: Dataset, degree: int = 3, lambda_ridge: float | None = None) -> FittedEstimator:
    """Ridge regression of ``y`` on powers of ``w``; ignores the instruments."""
    lam = default_ridge(ds.n) if lambda_ridge is None else lambda_ridge
    beta = RidgeSolver(lam).solve(poly_features(ds.w, degree), ds.y)
    return FittedEstimator("DirectPoly", coef=beta, degree=degree, meta={"lambda_ridge": lam})


def fit_direct_nn(
    ds: Dataset,
    widths=(1, 100, 100, 100, 1),
    epochs: int = 50,
    lr: float = 0.007,
    batch_size: int = 100,
    seed: int = 0,
) -> FittedEstimator:
    """Least-squares network regression of ``y`` on ``w`` with Adam."""
    rng = Rng(seed)
    model = init_params(widths, rng.spawn("init"))
    state = AdamState.zeros(model.p)
    batch_rng = rng.spawn("batches")
    steps_per_epoch = max(1, math.ceil(ds.n / batch_size))
    for _ in range(epochs):
        order = batch_rng.permutation(ds.n)
        for s in range(steps_per_epoch):
            idx = order[s * batch_size : (s + 1) * batch_size]
            w, y = ds.w[idx], ds.y[idx]
            pred = forward(model, w)
            _, grad = forward_vjp(model, w, 2.0 * (pred - y) / idx.size)
            model, state = adam_step(model, state, grad, lr)
    return FittedEstimator("DirectNN", model=model, meta={"epochs": epochs, "lr": lr})
