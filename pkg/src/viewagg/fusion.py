"""Aggregation of per-view probabilities into one candidate probability.

Max- and mean-pooling, plus a sparse logistic fusion whose weights carry a
zero-mean Gaussian prior with per-coefficient variances.  The variances are
fitted by evidence maximisation (automatic relevance determination): an inner
Newton loop finds the MAP weights for fixed variances, an outer fixed-point
loop re-estimates the variances from the Laplace posterior.

With ``intercept`` on, a constant-1 column is appended after the sorted
scores; its coefficient is the last entry of ``W`` and carries its own prior
variance like any other coefficient.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DataError
from .linsvm import sigmoid

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
GRAD_TOL = 1e-6
MAX_NEWTON = 200
MAX_OUTER = 100
SIGMA_TOL = 1e-3
PRUNE_SIGMA = 1e-6
PRUNE_GAMMA = 1e-12


@dataclass(frozen=True)
class ScoreVector:
    p: np.ndarray
    sorted: bool = False

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 1 or np.any((p < 0) | (p > 1)):
            raise DataError("score vector must be a 1D array of probabilities")
        if self.sorted and np.any(np.diff(p) < 0):
            raise DataError("score vector flagged sorted but is not ascending")
        object.__setattr__(self, "p", p)

    @classmethod
    def ascending(cls, p) -> "ScoreVector":
        return cls(np.sort(np.asarray(p, dtype=np.float64), kind="stable"), True)


def _values(s) -> np.ndarray:
    p = s.p if isinstance(s, ScoreVector) else np.asarray(s, dtype=np.float64)
    if p.shape[-1] == 0:
        raise DataError("empty score vector")
    return p


def max_pool(s):
    return np.max(_values(s), axis=-1)


def mean_pool(s):
    return np.mean(_values(s), axis=-1)


@dataclass
class FusionModel:
    W: np.ndarray
    sigma: np.ndarray
    pruned: np.ndarray
    sort_ascending: bool = True
    outer_iterations: int = 0
    intercept: bool = False

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        self.pruned = np.asarray(self.pruned, dtype=bool)
        if not (self.W.shape == self.sigma.shape == self.pruned.shape):
            raise DataError("W, sigma and pruned must share one length")
        if np.any(self.W[self.pruned] != 0):
            raise DataError("pruned coefficients must be exactly zero")

    @property
    def n_views(self) -> int:
        return len(self.W) - int(self.intercept)

    @property
    def n_active(self) -> int:
        """Surviving view coefficients (the intercept is not counted)."""
        return int((~self.pruned[: self.n_views]).sum())

    def prepare(self, P) -> np.ndarray:
        P = np.asarray(P, dtype=np.float64)
        if P.shape[-1] != self.n_views:
            raise DataError(f"expected {self.n_views} scores, got {P.shape[-1]}")
        return _design(P, self.sort_ascending, self.intercept)

    def predict(self, P) -> np.ndarray:
        return sigmoid(self.prepare(P) @ self.W)

    def to_json(self) -> str:
        return json.dumps({
            "version": FORMAT_VERSION,
            "sort_ascending": self.sort_ascending,
            "intercept": self.intercept,
            "W": self.W.tolist(),
            "sigma": self.sigma.tolist(),
            "pruned": self.pruned.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "FusionModel":
        d = json.loads(text)
        if d.get("version") != FORMAT_VERSION:
            raise DataError(f"unsupported fusion model version {d.get('version')!r}")
        return cls(d["W"], d["sigma"], d["pruned"], d["sort_ascending"], intercept=bool(d.get("intercept", False)))


def _design(P, sort_ascending: bool, intercept: bool) -> np.ndarray:
    if sort_ascending:
        P = np.sort(P, axis=-1, kind="stable")
    if intercept:
        P = np.concatenate([P, np.ones(P.shape[:-1] + (1,))], axis=-1)
    return P


def fuse(m: FusionModel, s) -> float:
    return float(m.predict(_values(s)))


def fusion_objective(W, P, y, sigma) -> float:
    """Log-likelihood of labels ``y`` in {0,1} minus the Gaussian prior penalty."""
    t = P @ W
    return float(np.sum(y * t - np.logaddexp(0.0, t)) - 0.5 * np.sum(W * W / sigma))


def fusion_gradient(W, P, y, sigma) -> np.ndarray:
    return P.T @ (y - sigmoid(P @ W)) - W / sigma


def fusion_hessian(W, P, sigma) -> np.ndarray:
    r = sigmoid(P @ W)
    return -(P.T * (r * (1 - r))) @ P - np.diag(1.0 / sigma)


def map_weights(P, y, sigma, W0=None, history=None) -> np.ndarray:
    """Newton ascent with step halving to the MAP weights for fixed prior variances.

    Converged when the gradient inf-norm drops below ``GRAD_TOL``, or when the
    quadratic model predicts a gain below the float resolution of the objective
    (tiny prior variances make the last digits of the gradient pure round-off).
    """
    W = np.zeros(P.shape[1]) if W0 is None else np.array(W0, dtype=np.float64)
    obj = fusion_objective(W, P, y, sigma)
    for it in range(MAX_NEWTON):
        g = fusion_gradient(W, P, y, sigma)
        if np.max(np.abs(g)) < GRAD_TOL:
            return W
        step = np.linalg.solve(fusion_hessian(W, P, sigma), -g)
        gain = 0.5 * float(g @ step)
        if gain <= 64 * np.finfo(float).eps * max(1.0, abs(obj)):
            return W
        t = 1.0
        while True:
            cand = W + t * step
            new = fusion_objective(cand, P, y, sigma)
            if new >= obj or t < 1e-12:
                break
            t *= 0.5
        if new < obj:
            break
        W, obj = cand, new
        if history is not None:
            history.append(obj)
    raise ConvergenceError(
        f"inner Newton did not converge: |grad|_inf={np.max(np.abs(g)):.3g} after {it + 1} iterations, "
        f"{P.shape[1]} active coefficients, objective {obj:.6g}"
    )


def _labels01(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    y = np.where(y < 0, 0.0, y)
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise DataError("fusion labels must be in {0,1} or {-1,+1}")
    if len(np.unique(y)) < 2:
        raise DataError("fusion training needs both labels")
    return y


def train_fusion(P, y, prior_init: float = 1.0, sort_ascending: bool = True,
                 intercept: bool = False) -> FusionModel:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or len(P) != len(y):
        raise DataError(f"inconsistent fusion training shapes {P.shape} / {np.shape(y)}")
    y = _labels01(y)
    P = _design(P, sort_ascending, intercept)
    d = P.shape[1]
    sigma = np.full(d, float(prior_init))
    W = np.zeros(d)
    active = np.ones(d, dtype=bool)
    outer = 0
    for outer in range(1, MAX_OUTER + 1):
        idx = np.flatnonzero(active)
        Pa = P[:, idx]
        Wa = map_weights(Pa, y, sigma[idx], W[idx])
        cov = np.linalg.inv(-fusion_hessian(Wa, Pa, sigma[idx]))
        gamma = 1.0 - np.diag(cov) / sigma[idx]
        with np.errstate(divide="ignore", invalid="ignore"):
            new_sigma = np.where(gamma > PRUNE_GAMMA, Wa**2 / gamma, 0.0)
        drop = (new_sigma < PRUNE_SIGMA) | (gamma <= PRUNE_GAMMA)
        if drop.all():
            # keep the most relevant coefficient alive
            drop[np.argmax(np.where(gamma > PRUNE_GAMMA, new_sigma, -np.inf))] = False
            new_sigma = np.maximum(new_sigma, PRUNE_SIGMA)
        W[:] = 0.0
        W[idx] = np.where(drop, 0.0, Wa)
        keep = ~drop
        change = np.max(np.abs(new_sigma[keep] - sigma[idx][keep]) / sigma[idx][keep])
        sigma[idx] = np.where(drop, 0.0, new_sigma)
        active[idx[drop]] = False
        if not drop.any() and change < SIGMA_TOL:
            break
    # final MAP fit at the converged variances
    idx = np.flatnonzero(active)
    W[:] = 0.0
    W[idx] = map_weights(P[:, idx], y, sigma[idx], W[idx])
    log.debug("fusion: %d outer iterations, %d active coefficients", outer, len(idx))
    return FusionModel(W, sigma, ~active, sort_ascending, outer, intercept)
