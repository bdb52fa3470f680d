"""Synthetic spatial grids with known potential outcomes, plus benchmarking.

Data-generating process (constants pinned here, versioned by ``DGP_VERSION``):

* rook grid graph, normalized-Laplacian eigenbasis ``Phi``;
* covariates ``Z`` (N x p, standard normal) and an intercept;
* latent confounder ``S = sum_{j=2}^{j_max} c_j phi_j`` with
  ``c_j = j^(-decay) * N(0, 1)`` (decay 1.5 by default), standardized to mean 0 and unit variance;
* unit factor ``U1 = [1, Z] eta_Z + gamma * S eta_S``;
* core ``G`` standard normal, ``U2``/``U3`` random orthonormal, with the
  signal tensor ``Y* = G x1 U1 x2 U2 x3 U3`` rescaled to unit RMS;
* multinomial-logit exposure on ``(Z, gamma * S)`` whose slopes are scaled
  so the smallest assignment probability equals ``overlap``;
* optional shrinkage of every level toward the reference level
  (``effect_scale``; 0 gives no exposure effect at all);
* observed ``Y = Y* + noise`` at the assigned level only.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.special import softmax

from .propensity import ExposureDesign
from .spatial_basis import SpectralBasis, SpatialGraph, graph_basis, grid_graph
from .tensor_core import ContractError, TuckerFactors, tucker_reconstruct

log = logging.getLogger(__name__)

DGP_VERSION = 1
DECAY = 1.5
N_COVARIATES = 3


@dataclass
class ScenarioConfig:
    rows: int = 20
    cols: int = 20
    K: int = 2
    O: int = 10
    ranks: tuple[int, int, int] = (2, 2, 2)
    gamma: float = 1.0
    sigma: float = 1.0
    overlap: float = 0.03
    j_max: int = 6
    noise: str = "gaussian"
    seed: int = 0
    reference_level: int = 1
    effect_scale: float = 1.0
    decay: float = DECAY

    def __post_init__(self):
        self.ranks = tuple(int(r) for r in self.ranks)
        if self.rows < 2 or self.cols < 2:
            raise ContractError("grid must be at least 2 x 2")
        if min(self.K, self.O) < 1 or min(self.ranks) < 1:
            raise ContractError("K, O and ranks must be positive")
        if self.gamma < 0 or self.sigma < 0 or self.effect_scale < 0:
            raise ContractError("gamma, sigma and effect_scale must be nonnegative")
        if self.decay <= 0:
            raise ContractError("spectral decay exponent must be positive")
        if not 0.0 < self.overlap < 0.5:
            raise ContractError(f"overlap must lie in (0, 0.5), got {self.overlap}")
        if not 2 <= self.j_max <= self.rows * self.cols:
            raise ContractError("j_max must lie in [2, N]")
        if self.noise not in ("gaussian", "uniform"):
            raise ContractError(f"unknown noise family {self.noise!r}")
        N, L = self.rows * self.cols, 2 ** self.K
        r1, r2, r3 = self.ranks
        if r1 > N or r2 > L or r3 > self.O:
            raise ContractError("ranks exceed tensor dims")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ranks"] = list(self.ranks)
        d["dgp_version"] = DGP_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        d.pop("dgp_version", None)
        return cls(**d)


@dataclass
class SyntheticDataset:
    Y_obs: np.ndarray
    Y_true: np.ndarray
    design: ExposureDesign
    Z: np.ndarray
    centroids: np.ndarray
    theta_true: np.ndarray
    S: np.ndarray
    propensities: np.ndarray
    graph: SpatialGraph | None = field(default=None, repr=False)
    basis: SpectralBasis | None = field(default=None, repr=False)
    config: ScenarioConfig | None = None

    @property
    def mask(self) -> np.ndarray:
        return self.design.mask(self.Y_obs.shape[2])

    @property
    def dims(self):
        return self.Y_obs.shape

    def Z_design(self) -> np.ndarray:
        """Covariates with a leading intercept column."""
        return np.column_stack([np.ones(self.Z.shape[0]), self.Z])


_BASIS_CACHE: dict = {}


def grid_basis(rows: int, cols: int):
    key = (rows, cols)
    if key not in _BASIS_CACHE:
        g = grid_graph(rows, cols)
        _BASIS_CACHE[key] = (g, graph_basis(g))
    return _BASIS_CACHE[key]


def true_effects(Y_true, reference_level: int) -> np.ndarray:
    """L x O matrix of sample ATEs against the reference level (zero row at ref)."""
    Y = np.asarray(Y_true)
    means = Y.mean(axis=0)
    return means - means[reference_level - 1][None, :]


def _orthonormal(rng, n, r):
    q, R = np.linalg.qr(rng.standard_normal((n, r)))
    return q * np.sign(np.diag(R))[None, :]


def _scaled_probs(lin: np.ndarray, overlap: float) -> np.ndarray:
    """Scale linear predictors so the smallest probability equals ``overlap``."""
    L = lin.shape[1]
    if overlap >= 1.0 / L or not np.any(lin):
        return np.full(lin.shape, 1.0 / L)

    def gap(c):
        return softmax(c * lin, axis=1).min() - overlap

    hi = 1.0
    while gap(hi) > 0:
        hi *= 2.0
        if hi > 1e6:
            break
    c = brentq(gap, 0.0, hi, xtol=1e-12)
    return softmax(c * lin, axis=1)


def generate(config: ScenarioConfig) -> SyntheticDataset:
    rng = np.random.default_rng(config.seed)
    g, basis = grid_basis(config.rows, config.cols)
    N, L, O = g.n_nodes, 2 ** config.K, config.O
    r1, r2, r3 = config.ranks

    Z = rng.standard_normal((N, N_COVARIATES))
    Zd = np.column_stack([np.ones(N), Z])
    j = np.arange(2, config.j_max + 1)
    c = j ** (-config.decay) * rng.standard_normal(j.size)
    S = basis.eigenvectors[:, 1:config.j_max] @ c
    S = (S - S.mean()) / S.std()
    S = S[:, None]

    eta_Z = rng.standard_normal((Zd.shape[1], r1)) / np.sqrt(Zd.shape[1])
    eta_S = rng.standard_normal((1, r1))
    U1 = Zd @ eta_Z + config.gamma * S @ eta_S
    G = rng.standard_normal((r1, r2, r3))
    U2 = _orthonormal(rng, L, r2)
    U3 = _orthonormal(rng, O, r3)
    Y_true = tucker_reconstruct(TuckerFactors(G, U1, U2, U3))
    if config.effect_scale != 1.0:
        ref = Y_true[:, config.reference_level - 1: config.reference_level, :]
        Y_true = ref + config.effect_scale * (Y_true - ref)
    Y_true /= np.sqrt(np.mean(Y_true ** 2))

    alpha = rng.standard_normal((N_COVARIATES, L - 1))
    delta = rng.standard_normal((1, L - 1))
    lin = np.zeros((N, L))
    lin[:, 1:] = Z @ alpha + config.gamma * S @ delta
    probs = _scaled_probs(lin, config.overlap)
    u = rng.random(N)
    levels = 1 + np.minimum((u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1), L - 1)
    design = ExposureDesign(config.K, levels, config.reference_level)

    if config.noise == "gaussian":
        E = config.sigma * rng.standard_normal(Y_true.shape)
    else:
        E = config.sigma * np.sqrt(3.0) * rng.uniform(-1, 1, Y_true.shape)
    mask = design.mask(O)
    Y_obs = np.where(mask > 0, Y_true + E, 0.0)
    return SyntheticDataset(
        Y_obs=Y_obs, Y_true=Y_true, design=design, Z=Z, centroids=g.centroids,
        theta_true=true_effects(Y_true, config.reference_level), S=S,
        propensities=probs, graph=g, basis=basis, config=config,
    )


# ---------------------------------------------------------------------------
# benchmarking
# ---------------------------------------------------------------------------

def effect_errors(table: pd.DataFrame, theta_true: np.ndarray, column="theta_aipw"):
    """Join an effect table with the truth; returns (err, covered) arrays."""
    lv = table["level"].to_numpy() - 1
    oc = table["outcome_index"].to_numpy()
    truth = theta_true[lv, oc]
    err = table[column].to_numpy() - truth
    covered = (table["ci_low"].to_numpy() <= truth) & (truth <= table["ci_high"].to_numpy())
    return err, covered, truth


def oracle_method(ds: SyntheticDataset) -> pd.DataFrame:
    """Returns the true effects with zero-width intervals (plumbing check)."""
    from .estimator import effect_rows

    L, O = ds.theta_true.shape
    ref = ds.design.reference_level
    rows = []
    for l in range(1, L + 1):
        if l == ref:
            continue
        for o in range(O):
            t = float(ds.theta_true[l - 1, o])
            rows.append(dict(level=l, reference=ref, outcome_index=o, theta_oi=t,
                             theta_aipw=t, variance=0.0, ci_low=t, ci_high=t))
    return effect_rows(pd.DataFrame(rows), ds.design.K)


def benchmark(methods: dict, scenario: ScenarioConfig, replications: int,
              seed: int = 0) -> pd.DataFrame:
    """Monte-Carlo comparison of estimators against the generator's truth.

    ``methods`` maps a name to a callable ``dataset -> effect table``.
    Replication ``r`` uses seed ``seed + r``.  A failing method contributes
    missing values rather than aborting the run.
    """
    if replications < 1:
        raise ContractError("replications must be >= 1")
    raw = pd.concat([replication_records(methods, scenario, seed + r, r)
                     for r in range(replications)], ignore_index=True)
    return summarize_records(raw)


def replication_records(methods: dict, scenario: ScenarioConfig, seed: int,
                        replication: int = 0) -> pd.DataFrame:
    """Per-contrast errors of every method on one generated dataset."""
    ds = generate(_with_seed(scenario, seed))
    records = []
    for name, fn in methods.items():
        t0 = time.perf_counter()
        try:
            table = fn(ds)
            err, cov, truth = effect_errors(table, ds.theta_true)
            width = (table["ci_high"] - table["ci_low"]).to_numpy()
            lv = table["level"].to_numpy()
            oc = table["outcome_index"].to_numpy()
        except Exception as exc:  # noqa: BLE001
            log.warning("method %s failed on replication %d: %s", name, replication, exc)
            L, O = ds.theta_true.shape
            pairs = [(l, o) for l in range(1, L + 1) if l != ds.design.reference_level
                     for o in range(O)]
            lv = np.array([p[0] for p in pairs])
            oc = np.array([p[1] for p in pairs])
            err = cov = width = np.full(len(pairs), np.nan)
        dt = time.perf_counter() - t0
        for n in range(len(lv)):
            records.append(dict(method=name, replication=replication, level=int(lv[n]),
                                outcome_index=int(oc[n]), error=err[n],
                                covered=cov[n], width=width[n], seconds=dt))
    return pd.DataFrame(records)


def summarize_records(raw: pd.DataFrame) -> pd.DataFrame:
    raw = raw.sort_values(["method", "level", "outcome_index", "replication"], kind="stable")
    grouped = raw.groupby(["method", "level", "outcome_index"], sort=True)
    return grouped.agg(
        bias=("error", "mean"),
        mse=("error", lambda e: float(np.mean(np.square(e)))),
        coverage=("covered", "mean"),
        mean_width=("width", "mean"),
        seconds=("seconds", "mean"),
        n_ok=("error", "count"),
    ).reset_index()


def _with_seed(cfg: ScenarioConfig, seed: int) -> ScenarioConfig:
    d = cfg.to_dict()
    d["seed"] = seed
    return ScenarioConfig.from_dict(d)


# ---------------------------------------------------------------------------
# baseline estimators
# ---------------------------------------------------------------------------

def _ols(X, y, ridge_scale=1e-6):
    """Least squares with a ridge fallback for rank-deficient designs."""
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        warnings.warn(f"rank-deficient regression design (rank {rank} < {X.shape[1]}); "
                      "using ridge fallback", RuntimeWarning, stacklevel=3)
        XtX = X.T @ X
        lam = ridge_scale * np.trace(XtX) / X.shape[1]
        return np.linalg.solve(XtX + lam * np.eye(X.shape[1]), X.T @ y)
    return np.linalg.lstsq(X, y, rcond=None)[0]


def regression_outcomes(Y_obs, design: ExposureDesign, covariates) -> np.ndarray:
    """Per-outcome linear model on level indicators and covariates; returns
    predictions for every (unit, level, outcome)."""
    N, L, O = np.asarray(Y_obs).shape
    C = np.asarray(covariates, dtype=np.float64).reshape(N, -1)
    ind = design.indicator()
    X = np.column_stack([np.ones(N), ind[:, 1:], C])
    y = np.asarray(Y_obs)[np.arange(N), design.assignments - 1, :]
    coef = _ols(X, y)
    out = np.empty((N, L, O))
    for l in range(L):
        Xl = X.copy()
        Xl[:, 1:L] = 0.0
        if l > 0:
            Xl[:, l] = 1.0
        out[:, l, :] = Xl @ coef
    return out


def baseline_regression(ds: SyntheticDataset, spatial: bool = False, n_eigs: int = 10,
                        floor: float = 0.01, ridge: float = 1e-4,
                        alpha: float = 0.05) -> pd.DataFrame:
    """Per-outcome regression + multinomial-logit propensities combined by AIPW.

    With ``spatial`` the first ``n_eigs`` non-constant eigenvectors enter
    both models (the spatial-PS variant).
    """
    from .estimator import effect_table
    from .propensity import fit_multinomial, predict_probs

    C = ds.Z
    if spatial:
        C = np.column_stack([C, ds.basis.columns(range(1, n_eigs + 1))])
    Y_hat = regression_outcomes(ds.Y_obs, ds.design, C)
    pm = fit_multinomial(C, ds.design, ridge)
    probs = predict_probs(pm, C)
    return effect_table(ds.Y_obs, Y_hat, probs, ds.design, alpha, floor)


def tensor_method(spatial: bool = True, **overrides):
    """Effect-table callable running the tensor pipeline at the true ranks."""
    from .estimator import PipelineConfig, run_pipeline

    def run(ds: SyntheticDataset) -> pd.DataFrame:
        cfg = PipelineConfig(ranks=ds.config.ranks, spatial=spatial, seed=ds.config.seed,
                             reference_level=ds.design.reference_level, **overrides)
        return run_pipeline(ds.Y_obs, ds.design, ds.Z, ds.basis, cfg).effects

    return run


def default_methods() -> dict:
    return {
        "spatial_tensor": tensor_method(True),
        "tensor": tensor_method(False),
        "spatial_ps": lambda ds: baseline_regression(ds, spatial=True),
        "regression": lambda ds: baseline_regression(ds, spatial=False),
    }
