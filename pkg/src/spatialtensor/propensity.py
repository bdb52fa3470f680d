"""Factorial exposure coding, multinomial-logit propensities, IPW weights."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import log_softmax, softmax

from .tensor_core import ContractError

log = logging.getLogger(__name__)

DEFAULT_FLOOR = 0.01
DEFAULT_RIDGE = 1e-4
RIDGE_FLOOR = 1e-2
SEPARATION_NORM = 50.0


@dataclass(frozen=True)
class ExposureDesign:
    """Level coding of K binary exposures.

    Levels are 1-based: pattern ``(a_1, ..., a_K)`` maps to
    ``1 + sum_k a_k 2^(k-1)``, so no exposure is level 1 and all exposures
    is level ``L = 2^K``.
    """

    K: int
    assignments: np.ndarray
    reference_level: int = 1

    def __post_init__(self):
        a = np.asarray(self.assignments, dtype=np.int64).ravel()
        if a.size and (a.min() < 1 or a.max() > self.L):
            raise ContractError(f"assignments must lie in [1, {self.L}]")
        if not 1 <= self.reference_level <= self.L:
            raise ContractError(f"reference level {self.reference_level} outside [1, {self.L}]")
        a.setflags(write=False)
        object.__setattr__(self, "assignments", a)

    @property
    def L(self) -> int:
        return 2 ** self.K

    @property
    def n_units(self) -> int:
        return self.assignments.shape[0]

    def indicator(self) -> np.ndarray:
        """N x L one-hot matrix of received levels."""
        out = np.zeros((self.n_units, self.L))
        out[np.arange(self.n_units), self.assignments - 1] = 1.0
        return out

    def mask(self, n_outcomes: int) -> np.ndarray:
        """Assignment tensor (N x L x O), constant along the outcome mode."""
        return np.repeat(self.indicator()[:, :, None], n_outcomes, axis=2)

    def binary(self) -> np.ndarray:
        return level_patterns(self.K)[self.assignments - 1]

    def with_reference(self, ref: int) -> "ExposureDesign":
        return ExposureDesign(self.K, self.assignments, ref)


def level_patterns(K: int) -> np.ndarray:
    """L x K matrix whose row ``l-1`` is the binary pattern of level ``l``."""
    lv = np.arange(2 ** K)
    return ((lv[:, None] >> np.arange(K)[None, :]) & 1).astype(np.int64)


def encode_levels(binary_matrix, reference_level: int = 1) -> ExposureDesign:
    A = np.asarray(binary_matrix)
    if A.ndim == 1:
        A = A[:, None]
    if A.ndim != 2 or A.shape[1] < 1:
        raise ContractError("binary_matrix must be N x K")
    if not np.all((A == 0) | (A == 1)):
        raise ContractError("exposure entries must be 0 or 1")
    A = A.astype(np.int64)
    levels = 1 + A @ (2 ** np.arange(A.shape[1]))
    return ExposureDesign(A.shape[1], levels, reference_level)


def decode_levels(design: ExposureDesign) -> np.ndarray:
    return design.binary()


@dataclass
class PropensityModel:
    """Multinomial logit with one level's scores pinned at zero.

    ``coefficients`` has one row per non-baseline level (in level order) and
    columns ``[intercept, features...]``.
    """

    coefficients: np.ndarray
    baseline_level: int
    ridge: float
    n_levels: int
    converged: bool = True
    n_iter: int = 0
    loglik_trace: list = field(default_factory=list, repr=False)

    @property
    def n_features(self) -> int:
        return self.coefficients.shape[1] - 1

    def full_coefficients(self) -> np.ndarray:
        """L x (1 + m) matrix including the zero baseline row."""
        B = np.zeros((self.n_levels, self.coefficients.shape[1]))
        B[self._free_levels()] = self.coefficients
        return B

    def _free_levels(self) -> np.ndarray:
        return np.array([l for l in range(self.n_levels) if l != self.baseline_level - 1])


def _design_matrix(features, n) -> np.ndarray:
    if features is None:
        return np.ones((n, 1))
    F = np.asarray(features, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    return np.column_stack([np.ones(F.shape[0]), F])


def _objective(theta, X, Y, free, ridge):
    """Mean penalized log-likelihood and its gradient (intercepts unpenalized)."""
    n, L = Y.shape
    B = np.zeros((L, X.shape[1]))
    B[free] = theta.reshape(len(free), X.shape[1])
    eta = X @ B.T
    logp = log_softmax(eta, axis=1)
    pen = B[free, 1:]
    val = np.sum(Y * logp) / n - 0.5 * ridge * np.sum(pen * pen)
    P = np.exp(logp)
    G = ((Y - P).T @ X) / n
    G[:, 1:] -= ridge * B[:, 1:]
    return val, G[free].ravel()


def multinomial_loglik(theta, features, design: ExposureDesign, ridge: float,
                       baseline_level: int = 1):
    """Penalized objective and analytic gradient at a flat parameter vector."""
    X = _design_matrix(features, design.n_units)
    free = np.array([l for l in range(design.L) if l != baseline_level - 1])
    return _objective(np.asarray(theta, dtype=np.float64), X, design.indicator(), free, ridge)


def fit_multinomial(features, design: ExposureDesign, ridge: float = DEFAULT_RIDGE,
                    baseline_level: int = 1, tol: float = 1e-8,
                    max_iter: int = 1000) -> PropensityModel:
    """Ridge-penalized multinomial logit by gradient ascent.

    Steps use a Barzilai-Borwein length followed by Armijo backtracking, so
    the penalized log-likelihood never decreases between iterations.
    """
    if ridge < 0:
        raise ContractError("ridge must be nonnegative")
    n, L = design.n_units, design.L
    X = _design_matrix(features, n)
    if not np.all(np.isfinite(X)):
        raise ContractError("features must be finite")
    if n <= L:
        raise ContractError(f"need more units ({n}) than levels ({L})")
    Y = design.indicator()
    free = np.array([l for l in range(L) if l != baseline_level - 1])

    theta = np.zeros(len(free) * X.shape[1])
    # warm start intercepts at the empirical log-odds
    freq = np.clip(Y.mean(axis=0), 1.0 / (2 * n), None)
    icpt = np.log(freq[free] / freq[baseline_level - 1])
    theta.reshape(len(free), -1)[:, 0] = icpt

    val, grad = _objective(theta, X, Y, free, ridge)
    trace = [val]
    step = 1.0
    prev_theta = prev_grad = None
    converged = bool(np.max(np.abs(grad)) <= tol)
    it = 0
    while not converged and it < max_iter:
        it += 1
        if prev_grad is not None:
            s = theta - prev_theta
            y = prev_grad - grad
            sy = s @ y
            step = (s @ s) / sy if sy > 1e-300 else 2.0 * step
        step = min(max(step, 1e-10), 1e6)
        gg = grad @ grad
        t = step
        while True:
            cand = theta + t * grad
            cval, cgrad = _objective(cand, X, Y, free, ridge)
            if not np.isfinite(cval):
                t *= 0.5
            elif cval >= val + 1e-4 * t * gg:
                break
            else:
                t *= 0.5
            if t < 1e-20:
                cand, cval, cgrad = theta, val, grad
                break
        if not np.isfinite(cval):
            raise FloatingPointError(
                "non-finite multinomial log-likelihood; increase the ridge penalty"
            )
        if cval < val:
            raise AssertionError("penalized log-likelihood decreased")
        prev_theta, prev_grad = theta, grad
        theta, val, grad = cand, cval, cgrad
        trace.append(val)
        converged = bool(np.max(np.abs(grad)) <= tol)
        if t < 1e-20:
            break
    coefs = theta.reshape(len(free), X.shape[1])
    if np.max(np.abs(coefs[:, 1:]), initial=0.0) > SEPARATION_NORM and ridge < RIDGE_FLOOR:
        warnings.warn(
            f"coefficients exceed {SEPARATION_NORM} in magnitude (quasi-separation); "
            f"refitting with ridge={RIDGE_FLOOR}",
            RuntimeWarning,
            stacklevel=2,
        )
        return fit_multinomial(features, design, RIDGE_FLOOR, baseline_level, tol, max_iter)
    if not converged:
        log.info("multinomial fit stopped after %d iterations (|grad|=%.2e)",
                 it, np.max(np.abs(grad)))
    return PropensityModel(coefs, baseline_level, ridge, L, converged, it, trace)


def predict_probs(model: PropensityModel, features) -> np.ndarray:
    F = None if features is None else np.asarray(features, dtype=np.float64)
    n = 1 if F is None else (F.shape[0] if F.ndim > 1 else F.shape[0])
    if F is not None:
        m = 1 if F.ndim == 1 else F.shape[1]
        if m != model.n_features:
            raise ContractError(f"model expects {model.n_features} features, got {m}")
    elif model.n_features:
        raise ContractError(f"model expects {model.n_features} features, got none")
    X = _design_matrix(F, n)
    return softmax(X @ model.full_coefficients().T, axis=1)


def ipw_weights(probs, design: ExposureDesign, n_outcomes: int,
                floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """N x L x O inverse-probability weights, zero at unobserved cells."""
    if not 0.0 < floor < 0.5:
        raise ContractError(f"propensity floor must lie in (0, 0.5), got {floor}")
    P = np.asarray(probs, dtype=np.float64)
    if P.shape != (design.n_units, design.L):
        raise ContractError(f"probs shape {P.shape} != {(design.n_units, design.L)}")
    W = design.indicator() / np.maximum(P, floor)
    return np.repeat(W[:, :, None], n_outcomes, axis=2)


def overlap_diagnostics(probs, design: ExposureDesign,
                        thresholds=(0.01, 0.05), floor: float = DEFAULT_FLOOR) -> pd.DataFrame:
    """Per-level summary of estimated propensities.

    ``frac_below_t`` is computed among units that received the level;
    ``frac_all_below_t`` over all units.  ``n_truncated`` counts treated
    units whose propensity falls under the weight floor.
    """
    th = list(thresholds)
    if any(not 0 < t < 1 for t in th) or th != sorted(th):
        raise ContractError("thresholds must be ascending values in (0, 1)")
    P = np.asarray(probs, dtype=np.float64)
    pats = level_patterns(design.K)
    rows = []
    for l in range(1, design.L + 1):
        treated = design.assignments == l
        p_own = P[treated, l - 1]
        row = {
            "level": l,
            "pattern": "".join(str(b) for b in pats[l - 1]),
            "n_units": int(treated.sum()),
            "min_propensity": float(p_own.min()) if p_own.size else np.nan,
            "median_propensity": float(np.median(p_own)) if p_own.size else np.nan,
            "n_truncated": int(np.sum(p_own < floor)),
        }
        for t in th:
            row[f"frac_below_{t:g}"] = float(np.mean(p_own < t)) if p_own.size else np.nan
            row[f"frac_all_below_{t:g}"] = float(np.mean(P[:, l - 1] < t))
        rows.append(row)
    return pd.DataFrame(rows)
