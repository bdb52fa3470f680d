"""Three-step spatial tensor pipeline and OI / AIPW effect estimation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from statistics import NormalDist

import numpy as np
import pandas as pd

from .propensity import (
    DEFAULT_FLOOR, DEFAULT_RIDGE, ExposureDesign, PropensityModel, fit_multinomial,
    ipw_weights, level_patterns, overlap_diagnostics, predict_probs,
)
from .spatial_basis import SpatialGraph, SpectralBasis, graph_basis
from .spgd import (
    DEFAULT_GRIDS, FitConfig, SpatialTuckerModel, cross_fit_impute, cross_validate_ranks,
    predict_full, spgd_fit,
)
from .tensor_core import ContractError

log = logging.getLogger(__name__)


class StepError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


@dataclass
class EffectEstimate:
    level: int
    reference: int
    outcome: int
    theta_oi: float
    theta_aipw: float
    variance: float
    ci_low: float
    ci_high: float
    n_units: int
    influence: np.ndarray | None = field(default=None, repr=False)


@dataclass
class PipelineConfig:
    ranks: tuple[int, int, int] | None = (2, 2, 2)
    rank_grids: tuple = tuple(tuple(g) for g in DEFAULT_GRIDS)
    cv_folds: int = 5
    cv_rule: str = "1se"
    spatial: bool = True
    max_eigs: int | None = None
    patience: int = 3
    fixed_eigs: tuple | None = None
    reselect_step3: bool = True
    propensity_floor: float = DEFAULT_FLOOR
    ridge: float = DEFAULT_RIDGE
    cross_fit_folds: int = 5
    alpha: float = 0.05
    reference_level: int = 1
    step: str = "newton"
    tol: float = 1e-8
    max_iter: int = 500
    seed: int = 0

    def fit_config(self, ranks) -> FitConfig:
        return FitConfig(ranks=ranks, max_eigs=self.max_eigs, patience=self.patience,
                         select=self.spatial and self.fixed_eigs is None, step=self.step,
                         tol=self.tol, max_iter=self.max_iter, seed=self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("ranks", "fixed_eigs"):
            if d[key] is not None:
                d[key] = [int(v) for v in d[key]]
        d["rank_grids"] = [[int(v) for v in g] for g in d["rank_grids"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown pipeline config keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("ranks") is not None:
            d["ranks"] = tuple(d["ranks"])
        if d.get("fixed_eigs") is not None:
            d["fixed_eigs"] = tuple(d["fixed_eigs"])
        if "rank_grids" in d:
            d["rank_grids"] = tuple(tuple(g) for g in d["rank_grids"])
        return cls(**d)


@dataclass
class PipelineResult:
    step1: SpatialTuckerModel
    propensity: PropensityModel
    step3: SpatialTuckerModel
    Y_hat: np.ndarray
    weights: np.ndarray
    probs: np.ndarray
    pseudo_outcomes: np.ndarray
    effects: pd.DataFrame
    diagnostics: dict
    ranks: tuple[int, int, int]


# ---------------------------------------------------------------------------
# effect estimators
# ---------------------------------------------------------------------------

def oi_estimate(Y_hat, level: int, ref: int, outcome: int) -> float:
    """Outcome-imputation ATE: mean over units of the imputed contrast."""
    if level == ref:
        raise ContractError("level and reference must differ")
    Y_hat = np.asarray(Y_hat, dtype=np.float64)
    return float(np.mean(Y_hat[:, level - 1, outcome] - Y_hat[:, ref - 1, outcome]))


def pseudo_outcomes(Y_obs, Y_hat, probs, design: ExposureDesign,
                    floor: float | None = DEFAULT_FLOOR) -> np.ndarray:
    """Per-unit augmented potential-outcome means (N x L x O).

    ``Y_hat[i,l,o] + 1{A_i = l} / pi(l | i) * (Y_io - Y_hat[i,l,o])``
    """
    Y_obs = np.asarray(Y_obs, dtype=np.float64)
    Y_hat = np.asarray(Y_hat, dtype=np.float64)
    P = np.asarray(probs, dtype=np.float64)
    if floor is not None:
        P = np.maximum(P, floor)
    ind = design.indicator()
    y_i = Y_obs[np.arange(design.n_units), design.assignments - 1, :]  # N x O
    resid = y_i[:, None, :] - Y_hat
    return Y_hat + (ind / P)[:, :, None] * resid


def influence_variance(contributions) -> float:
    """Empirical influence-function variance ``mean(IF_i^2)``."""
    c = np.asarray(contributions, dtype=np.float64).ravel()
    if c.size < 2:
        raise ContractError("need at least two units for a variance")
    return float(np.mean(c * c))


def normal_quantile(p: float) -> float:
    return NormalDist().inv_cdf(p)


def confidence_interval(theta: float, V: float, N: int, alpha: float = 0.05):
    if V < 0 or N < 1 or not 0 < alpha <= 1:
        raise ContractError("need V >= 0, N >= 1 and alpha in (0, 1]")
    z = 0.0 if alpha == 1 else normal_quantile(1.0 - alpha / 2.0)
    half = z * np.sqrt(V / N)
    return theta - half, theta + half


def aipw_estimate(Y_obs, Y_hat, probs, design: ExposureDesign, level: int, ref: int,
                  outcome: int, floor: float | None = DEFAULT_FLOOR,
                  alpha: float = 0.05, pseudo=None) -> EffectEstimate:
    if level == ref:
        raise ContractError("level and reference must differ")
    if pseudo is None:
        pseudo = pseudo_outcomes(Y_obs, Y_hat, probs, design, floor)
    phi = pseudo[:, level - 1, outcome] - pseudo[:, ref - 1, outcome]
    theta = float(np.mean(phi))
    infl = phi - theta
    V = influence_variance(infl)
    lo, hi = confidence_interval(theta, V, design.n_units, alpha)
    return EffectEstimate(level, ref, outcome, oi_estimate(Y_hat, level, ref, outcome),
                          theta, V, lo, hi, design.n_units, infl)


def effect_table(Y_obs, Y_hat, probs, design: ExposureDesign, alpha: float = 0.05,
                 floor: float | None = DEFAULT_FLOOR, outcome_names=None,
                 transform=None) -> pd.DataFrame:
    """All (level vs reference) x outcome contrasts as a table."""
    pseudo = pseudo_outcomes(Y_obs, Y_hat, probs, design, floor)
    ref = design.reference_level
    O = np.asarray(Y_hat).shape[2]
    rows = []
    for l in range(1, design.L + 1):
        if l == ref:
            continue
        for o in range(O):
            e = aipw_estimate(Y_obs, Y_hat, probs, design, l, ref, o, floor, alpha, pseudo)
            rows.append(dict(level=l, reference=ref, outcome_index=o, theta_oi=e.theta_oi,
                             theta_aipw=e.theta_aipw, variance=e.variance,
                             ci_low=e.ci_low, ci_high=e.ci_high))
    return effect_rows(pd.DataFrame(rows), design.K, outcome_names, transform, design.n_units)


def effect_rows(df: pd.DataFrame, K: int, outcome_names=None, transform=None,
                n_units: int | None = None) -> pd.DataFrame:
    """Add labels, ratio-scale columns and significance to a raw effect frame."""
    pats = level_patterns(K)
    df = df.copy()
    df.insert(0, "exposure_pattern",
              ["".join(str(b) for b in pats[l - 1]) for l in df["level"]])
    names = (list(outcome_names) if outcome_names is not None
             else [f"y{o + 1}" for o in range(int(df["outcome_index"].max()) + 1)])
    df.insert(1, "outcome", [names[o] for o in df["outcome_index"]])
    if n_units is not None:
        df["n_units"] = n_units
    for col, src in (("ratio", "theta_aipw"), ("ratio_ci_low", "ci_low"),
                     ("ratio_ci_high", "ci_high")):
        df[col] = [effect_to_ratio(v, transform) for v in df[src]]
    df["ratio_label"] = ratio_label(transform)
    df["significant_at_05"] = (df["ci_low"] > 0) | (df["ci_high"] < 0)
    return df


# ---------------------------------------------------------------------------
# marginal effects
# ---------------------------------------------------------------------------

def marginal_effect(pseudo, design: ExposureDesign, target: int, alpha: float = 0.05,
                    weighting: str = "observed", outcome_names=None,
                    transform=None) -> pd.DataFrame:
    """Effect of switching exposure ``target`` (1-based) on, averaged over the
    patterns of the other exposures.

    ``pseudo`` holds the per-unit augmented means from :func:`pseudo_outcomes`.
    Pattern weights are the observed frequencies of the other exposures
    (``weighting="observed"``) or uniform.  The variance is that of the
    weighted combination of unit contributions, so covariances between the
    factorial contrasts are included; weights are treated as fixed.
    """
    K = design.K
    if not 1 <= target <= K:
        raise ContractError(f"target exposure must lie in [1, {K}]")
    if weighting not in ("observed", "uniform"):
        raise ContractError(f"unknown weighting {weighting!r}")
    pseudo = np.asarray(pseudo, dtype=np.float64)
    pats = level_patterns(K)
    others = [k for k in range(K) if k != target - 1]
    unit_bits = design.binary()
    N, _, O = pseudo.shape
    contrib = np.zeros((N, O))
    for key in np.unique(pats[:, others], axis=0) if others else [np.array([], int)]:
        on = off = None
        for l in range(design.L):
            if np.array_equal(pats[l, others], key):
                if pats[l, target - 1] == 1:
                    on = l
                else:
                    off = l
        if weighting == "uniform":
            w = 1.0 / 2 ** (K - 1)
        else:
            w = float(np.mean(np.all(unit_bits[:, others] == key, axis=1))) if others else 1.0
        contrib += w * (pseudo[:, on, :] - pseudo[:, off, :])
    theta = contrib.mean(axis=0)
    rows = []
    for o in range(O):
        infl = contrib[:, o] - theta[o]
        V = influence_variance(infl)
        lo, hi = confidence_interval(theta[o], V, N, alpha)
        rows.append(dict(target_exposure=target, outcome_index=o, theta_aipw=theta[o],
                         variance=V, ci_low=lo, ci_high=hi))
    df = pd.DataFrame(rows)
    names = list(outcome_names) if outcome_names is not None else [f"y{o + 1}" for o in range(O)]
    df.insert(1, "outcome", [names[o] for o in range(O)])
    for col, src in (("ratio", "theta_aipw"), ("ratio_ci_low", "ci_low"),
                     ("ratio_ci_high", "ci_high")):
        df[col] = [effect_to_ratio(v, transform) for v in df[src]]
    df["ratio_label"] = ratio_label(transform)
    df["significant_at_05"] = (df["ci_low"] > 0) | (df["ci_high"] < 0)
    return df


# ---------------------------------------------------------------------------
# outcome preprocessing and ratio reporting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransformRecord:
    transform: str
    shift: float
    mean: float
    sd: float

    def to_dict(self) -> dict:
        return asdict(self)


def preprocess_outcomes(raw, transform: str = "log", shift: float = 0.0, names=None,
                        standardize: bool = True):
    """Transform outcomes then standardize the whole array to mean 0, sd 1.

    ``log``: ``log(raw + shift)``.  ``logit``: prevalences in percent,
    ``logit((raw + shift) / 100)``.  ``none`` only standardizes.
    """
    X = np.asarray(raw, dtype=np.float64)
    if shift < 0:
        raise ContractError("shift must be nonnegative")
    names = list(names) if names is not None else [f"y{o + 1}" for o in range(X.shape[1])]
    v = X + shift
    if transform == "log":
        bad = np.any(v <= 0, axis=0)
        if bad.any():
            raise ContractError(f"log transform needs raw + shift > 0; offending outcomes: "
                                f"{[n for n, b in zip(names, bad) if b]}")
        T = np.log(v)
    elif transform == "logit":
        p = v / 100.0
        bad = np.any((p <= 0) | (p >= 1), axis=0)
        if bad.any():
            raise ContractError(f"logit transform needs (raw + shift)/100 in (0, 1); offending "
                                f"outcomes: {[n for n, b in zip(names, bad) if b]}")
        T = np.log(p / (1 - p))
    elif transform == "none":
        T = v
    else:
        raise ContractError(f"unknown transform {transform!r}")
    mu, sd = (float(T.mean()), float(T.std())) if standardize else (0.0, 1.0)
    if sd == 0:
        sd = 1.0
    return (T - mu) / sd, TransformRecord(transform, float(shift), mu, sd)


def invert_outcomes(values, record: TransformRecord) -> np.ndarray:
    T = np.asarray(values, dtype=np.float64) * record.sd + record.mean
    if record.transform == "log":
        v = np.exp(T)
    elif record.transform == "logit":
        v = 100.0 / (1.0 + np.exp(-T))
    else:
        v = T
    return v - record.shift


def ratio_label(record: TransformRecord | None) -> str:
    if record is None or record.transform == "none":
        return "none"
    return "odds_ratio" if record.transform == "logit" else "rate_ratio"


def effect_to_ratio(theta: float, record: TransformRecord | None) -> float:
    """``exp(theta * sd)`` on the transformed scale; NaN without a log/logit transform."""
    if record is None or record.transform == "none":
        return float("nan")
    return float(np.exp(theta * record.sd))


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def _basis_of(graph) -> SpectralBasis | None:
    if graph is None or isinstance(graph, SpectralBasis):
        return graph
    if isinstance(graph, SpatialGraph):
        return graph_basis(graph)
    raise ContractError("graph must be a SpatialGraph or SpectralBasis")


def _with_intercept(Z, N):
    if Z is None:
        return np.ones((N, 1)), np.empty((N, 0))
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[0] != N:
        raise ContractError(f"Z has {Z.shape[0]} rows for {N} units")
    return np.column_stack([np.ones(N), Z]), Z


def propensity_features(Z, basis, eigs) -> np.ndarray:
    parts = [Z]
    if eigs:
        parts.append(basis.columns(list(eigs)))
    return np.hstack(parts)


def run_pipeline(Y, design: ExposureDesign, Z, graph, config: PipelineConfig | None = None,
                 outcome_names=None, transform: TransformRecord | None = None) -> PipelineResult:
    """Step 1 unweighted spatial fit, Step 2 propensities and IPW weights,
    Step 3 weighted (cross-fitted) completion, then OI/AIPW effects.

    ``Z`` holds standardized covariates without an intercept column.
    """
    config = config or PipelineConfig()
    Y = np.asarray(Y, dtype=np.float64)
    N, L, O = Y.shape
    if design.n_units != N or design.L != L:
        raise ContractError(f"design ({design.n_units} units, {design.L} levels) does not "
                            f"match Y {Y.shape}")
    design = design.with_reference(config.reference_level)
    basis = _basis_of(graph) if (config.spatial or config.fixed_eigs) else None
    Zd, Zraw = _with_intercept(Z, N)
    mask = design.mask(O)

    try:
        ranks = config.ranks
        cv_scores = None
        if ranks is None:
            ranks, cv_scores = cross_validate_ranks(
                Y, mask, Zd, basis, config.rank_grids, config.cv_folds, config.seed,
                eigs=config.fixed_eigs or (), config=config.fit_config((1, 1, 1)),
                return_scores=True, rule=config.cv_rule)
        fcfg = config.fit_config(ranks)
        start = [int(j) for j in config.fixed_eigs] if config.fixed_eigs else []
        step1 = spgd_fit(Y, mask, Zd, basis, fcfg, start_eigs=start)
    except Exception as exc:
        raise StepError(f"step 1 (unweighted spatial fit) failed: {exc}") from exc

    try:
        feats = propensity_features(Zraw, basis, step1.selected_eigs)
        pmodel = fit_multinomial(feats, design, config.ridge)
        probs = predict_probs(pmodel, feats)
        W = ipw_weights(probs, design, O, config.propensity_floor)
    except Exception as exc:
        raise StepError(f"step 2 (propensity model) failed: {exc}") from exc

    try:
        cfg3 = replace(fcfg, select=fcfg.select and config.reselect_step3)
        step3 = spgd_fit(Y, mask, Zd, basis, cfg3, weights=W,
                         start_eigs=step1.selected_eigs, init=step1)
        if step3.selected_eigs != step1.selected_eigs:
            feats = propensity_features(Zraw, basis, step3.selected_eigs)
            pmodel = fit_multinomial(feats, design, config.ridge)
            probs = predict_probs(pmodel, feats)
            W = ipw_weights(probs, design, O, config.propensity_floor)
        if config.cross_fit_folds > 1:
            Y_hat = cross_fit_impute(Y, mask, Zd, basis, W, fcfg, config.cross_fit_folds,
                                     config.seed, eigs=step3.selected_eigs)
        else:
            Y_hat = predict_full(step3, Zd, basis)
    except Exception as exc:
        raise StepError(f"step 3 (weighted completion) failed: {exc}") from exc

    pseudo = pseudo_outcomes(Y, Y_hat, probs, design, config.propensity_floor)
    effects = effect_table(Y, Y_hat, probs, design, config.alpha, config.propensity_floor,
                           outcome_names, transform)
    diagnostics = {
        "ranks": list(ranks),
        "cv_scores": None if cv_scores is None else
        [{"ranks": list(k), "cv_error": v} for k, v in cv_scores.items()],
        "step1": step1.report(),
        "step3": step3.report(),
        "propensity_converged": bool(pmodel.converged),
        "overlap": overlap_diagnostics(probs, design, floor=config.propensity_floor),
    }
    return PipelineResult(step1, pmodel, step3, Y_hat, W, probs, pseudo, effects,
                          diagnostics, tuple(ranks))
