"""Gaussian-kernel SVM trained with Sequential Minimal Optimization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TAU = 1e-12


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def default_gamma(x: np.ndarray) -> float:
    """1 / (n_features * Var(x)), falling back to 1 / n_features for constant data."""
    x = np.asarray(x, dtype=np.float64)
    var = x.var()
    return 1.0 / (x.shape[1] * var) if var > 0 else 1.0 / x.shape[1]


@dataclass
class SvmModel:
    support_vectors: np.ndarray
    alphas: np.ndarray  # signed: y_i * alpha_i
    bias: float
    gamma: float
    C: float
    support_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    n_iter: int = 0

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if len(self.alphas) == 0:
            return np.full(len(x), self.bias)
        return rbf_kernel(x, self.support_vectors, self.gamma) @ self.alphas + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        """+1 for strictly positive decision values, -1 otherwise (0 counts as negative)."""
        return np.where(self.decision_function(x) > 0, 1, -1)

    def dual_variables(self, n_train: int) -> np.ndarray:
        """Unsigned alpha over the full training set (zeros off the support)."""
        alpha = np.zeros(n_train)
        alpha[self.support_indices] = np.abs(self.alphas)
        return alpha

    def to_dict(self) -> dict:
        return {
            "support_vectors": self.support_vectors.tolist(),
            "alphas": self.alphas.tolist(),
            "bias": self.bias,
            "gamma": self.gamma,
            "C": self.C,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SvmModel":
        sv = np.asarray(d["support_vectors"], dtype=np.float64)
        return cls(sv.reshape(len(d["alphas"]), -1), np.asarray(d["alphas"], dtype=np.float64),
                   float(d["bias"]), float(d["gamma"]), float(d["C"]))


def smo_train(x: np.ndarray, y: np.ndarray, C: float = 1.0, gamma: float | None = None,
              eps: float = 1e-5, max_iter: int = 200_000) -> SvmModel:
    """Solve the soft-margin dual with pairwise updates.

    Working pairs are picked by maximal violation for ``i`` and second-order gain for
    ``j``; iteration stops when the largest KKT gap falls below ``eps``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(x) != len(y):
        raise ValueError("features and labels differ in length")
    if len(y) < 2 or not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("need >= 2 examples with labels in {-1, +1}")
    if np.all(y == y[0]):
        raise ValueError("degenerate labels: both classes must be present")
    if C <= 0:
        raise ValueError("C must be positive")
    gamma = default_gamma(x) if gamma is None else gamma
    if gamma <= 0:
        raise ValueError("gamma must be positive")

    n = len(y)
    K = rbf_kernel(x, x, gamma)
    diag = np.diag(K).copy()
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 0.5 a'Qa - e'a

    it = 0
    while it < max_iter:
        yg = -y * grad
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        if not up.any() or not low.any():
            break
        i = int(np.flatnonzero(up)[np.argmax(yg[up])])
        m_val = yg[i]
        M_val = yg[low].min()
        if m_val - M_val < eps:
            break
        cand = low & (yg < m_val)
        b = m_val - yg[cand]
        a = diag[i] + diag[cand] - 2.0 * K[i, cand]
        a = np.where(a > 0, a, TAU)
        j = int(np.flatnonzero(cand)[np.argmin(-(b * b) / a)])

        ai_old, aj_old = alpha[i], alpha[j]
        quad = max(diag[i] + diag[j] - 2.0 * K[i, j], TAU)
        if y[i] != y[j]:
            delta = (-grad[i] - grad[j]) / quad
            diff = ai_old - aj_old
            ai, aj = ai_old + delta, aj_old + delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            elif ai < 0:
                ai, aj = 0.0, -diff
            if diff > 0:
                if ai > C:
                    ai, aj = C, C - diff
            elif aj > C:
                aj, ai = C, C + diff
        else:
            delta = (grad[i] - grad[j]) / quad
            total = ai_old + aj_old
            ai, aj = ai_old - delta, aj_old + delta
            if total > C:
                if ai > C:
                    ai, aj = C, total - C
            elif aj < 0:
                aj, ai = 0.0, total
            if total > C:
                if aj > C:
                    aj, ai = C, total - C
            elif ai < 0:
                ai, aj = 0.0, total
        alpha[i], alpha[j] = ai, aj
        d_i, d_j = ai - ai_old, aj - aj_old
        grad += y * (K[i] * (y[i] * d_i) + K[j] * (y[j] * d_j))
        it += 1

    bias = -_rho(alpha, grad, y, C)
    sv = np.flatnonzero(alpha > 0)
    return SvmModel(x[sv].copy(), (y * alpha)[sv], float(bias), float(gamma), float(C), sv, it)


def _rho(alpha, grad, y, C) -> float:
    yg = y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        return float(yg[free].mean())
    at_upper = alpha >= C
    at_lower = alpha <= 0
    # bounds on rho from the bounded variables
    ub_mask = (at_upper & (y < 0)) | (at_lower & (y > 0))
    lb_mask = (at_upper & (y > 0)) | (at_lower & (y < 0))
    ub = yg[ub_mask].min() if ub_mask.any() else np.inf
    lb = yg[lb_mask].max() if lb_mask.any() else -np.inf
    return float((ub + lb) / 2)


def kkt_violations(model: SvmModel, x: np.ndarray, y: np.ndarray, tol: float = 1e-3) -> np.ndarray:
    """Indices of training points whose margin contradicts their dual variable."""
    y = np.asarray(y, dtype=np.float64)
    alpha = model.dual_variables(len(y))
    margin = y * model.decision_function(x)
    zero = alpha <= 0
    upper = alpha >= model.C
    free = ~zero & ~upper
    bad = (zero & (margin < 1 - tol)) | (free & (np.abs(margin - 1) > tol)) | (upper & (margin > 1 + tol))
    return np.flatnonzero(bad)
