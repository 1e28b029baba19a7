"""L2-regularised, squared-hinge linear SVM trained by dual coordinate descent.

Primal:  min_w  0.5 w.w + C sum_i max(0, 1 - y_i w.x_i)^2
Dual:    min_{a >= 0}  0.5 a'(Q + D)a - sum(a),  Q_ij = y_i y_j x_i.x_j,  D = I/(2C)
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import DataError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class SvmConfig:
    C: float = 1.0
    tolerance: float = 1e-3
    gap_tolerance: float = 1e-4
    max_epochs: int = 5000
    seed: int = 0
    bias: bool = False

    def __post_init__(self):
        if not self.C > 0 or not self.tolerance > 0:
            raise ValueError("C and tolerance must be positive")


@dataclass
class LinearModel:
    omega: np.ndarray
    config: SvmConfig = field(default_factory=SvmConfig)
    feature_dim: int = 0
    epochs: int = 0
    primal: float = float("nan")
    dual: float = float("nan")

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64)
        if not self.feature_dim:
            self.feature_dim = len(self.omega) - int(self.config.bias)
        if len(self.omega) != self.feature_dim + int(self.config.bias):
            raise DataError("omega length inconsistent with feature_dim and bias")
        if not np.all(np.isfinite(self.omega)):
            raise DataError("non-finite weights")

    def decision(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.feature_dim:
            raise DataError(f"expected {self.feature_dim} features, got {X.shape[-1]}")
        s = X @ self.omega[: self.feature_dim]
        if self.config.bias:
            s = s + self.omega[-1]
        return s

    def to_json(self) -> str:
        return json.dumps({
            "version": FORMAT_VERSION,
            "feature_dim": self.feature_dim,
            "C": self.config.C,
            "bias": self.config.bias,
            "omega": self.omega.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "LinearModel":
        d = json.loads(text)
        if d.get("version") != FORMAT_VERSION:
            raise DataError(f"unsupported svm model version {d.get('version')!r}")
        return cls(np.asarray(d["omega"]), SvmConfig(C=d["C"], bias=d["bias"]), d["feature_dim"])


def score_view(m: LinearModel, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (m.feature_dim,):
        raise DataError(f"expected a {m.feature_dim}-vector, got shape {x.shape}")
    return float(m.decision(x[None])[0])


def sigmoid(t):
    """1 / (1 + exp(-t)) without overflow for any finite t."""
    t = np.asarray(t, dtype=np.float64)
    e = np.exp(-np.abs(t))
    out = np.where(t >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def primal_objective(w, X, y, C) -> float:
    margin = np.maximum(0.0, 1.0 - y * (X @ w))
    return 0.5 * float(w @ w) + C * float(margin @ margin)


def dual_objective(alpha, w, C) -> float:
    """Dual value (a lower bound on the primal minimum) at ``alpha`` with ``w = sum a_i y_i x_i``."""
    return float(alpha.sum() - 0.5 * (w @ w) - alpha @ alpha / (4.0 * C))


@njit(cache=True)
def _epoch(X, y, alpha, w, qdiag, dii, order, shrink_above):
    """One coordinate pass over ``order``.

    Coordinates at the bound whose gradient exceeds ``shrink_above`` are
    flagged for removal from the active set (pass ``inf`` to disable).
    Returns ``(keep, max projected gradient, min projected gradient)``.
    """
    keep = np.ones(order.shape[0], dtype=np.bool_)
    pg_max, pg_min = -np.inf, np.inf
    d = X.shape[1]
    for k in range(order.shape[0]):
        i = order[k]
        xi = X[i]
        g = 0.0
        for j in range(d):
            g += w[j] * xi[j]
        g = y[i] * g - 1.0 + dii * alpha[i]
        if alpha[i] == 0.0:
            if g > shrink_above:
                keep[k] = False
                continue
            pg = min(g, 0.0)
        else:
            pg = g
        pg_max = max(pg_max, pg)
        pg_min = min(pg_min, pg)
        if pg != 0.0:
            old = alpha[i]
            new = max(old - g / qdiag[i], 0.0)
            alpha[i] = new
            step = (new - old) * y[i]
            if step != 0.0:
                for j in range(d):
                    w[j] += step * xi[j]
    return keep, pg_max, pg_min


def _prepare(X, labels, bias):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise DataError(f"inconsistent training shapes {X.shape} / {y.shape}")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise DataError("labels must be +1 / -1")
    if len(np.unique(y)) < 2:
        raise DataError("svm training needs both classes")
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite features")
    if bias:
        X = np.hstack([X, np.ones((len(X), 1))])
    return np.ascontiguousarray(X), y


def train_svm(X, labels, cfg: SvmConfig = SvmConfig()) -> LinearModel:
    """Dual coordinate descent with shrinking of coordinates stuck at the bound.

    Stops once a pass over all coordinates sees a largest projected-gradient
    violation below ``cfg.tolerance`` and the relative duality gap is below
    ``cfg.gap_tolerance``.
    """
    Xb, y = _prepare(X, labels, cfg.bias)
    n, d = Xb.shape
    dii = 1.0 / (2.0 * cfg.C)
    qdiag = np.einsum("ij,ij->i", Xb, Xb) + dii
    alpha = np.zeros(n)
    w = np.zeros(d)
    rng = np.random.default_rng(cfg.seed)
    primal = dual = float("nan")
    active = np.arange(n)
    shrink_above = np.inf
    converged = False
    for epoch in range(1, cfg.max_epochs + 1):
        order = active[rng.permutation(len(active))]
        keep, pg_max, pg_min = _epoch(Xb, y, alpha, w, qdiag, dii, order, shrink_above)
        full = len(active) == n and keep.all()
        if max(pg_max, -pg_min, 0.0) < cfg.tolerance:
            if full:
                primal = primal_objective(w, Xb, y, cfg.C)
                dual = dual_objective(alpha, w, cfg.C)
                if primal - dual <= cfg.gap_tolerance * max(abs(primal), 1e-12):
                    converged = True
                    break
            # the shrunk problem is solved: re-check every coordinate
            active, shrink_above = np.arange(n), np.inf
            continue
        active = np.sort(order[keep])
        shrink_above = pg_max if pg_max > 0 else np.inf
    if not converged:
        primal = primal_objective(w, Xb, y, cfg.C)
        dual = dual_objective(alpha, w, cfg.C)
        log.warning("svm stopped at max_epochs=%d with duality gap %.3g", cfg.max_epochs, primal - dual)
    return LinearModel(w, cfg, d - int(cfg.bias), epoch, primal, dual)
