"""CSV/JSON ingestion and emission, and the run configuration."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd

from .estimator import TransformRecord, preprocess_outcomes
from .propensity import ExposureDesign, encode_levels, level_patterns
from .tensor_core import ContractError


class DataError(ContractError):
    """Malformed or inconsistent input files."""


@dataclass
class RunConfig:
    """Resolved parameters of one CLI invocation.

    Every output directory receives a ``config.json`` echo of this object;
    passing it back via ``--config`` reproduces the run.
    """

    command: str = ""
    data_dir: str | None = None
    out_dir: str | None = None
    # model
    ranks: list | None = field(default_factory=lambda: [2, 2, 2])
    rank_grids: list = field(default_factory=lambda: [list(range(1, 11)), [1, 2, 3],
                                                      [1, 2, 3, 4, 5]])
    cv_folds: int = 5
    cv_rule: str = "1se"
    spatial: bool = True
    max_eigs: int | None = None
    patience: int = 3
    fixed_eigs: list | None = None
    reselect_step3: bool = True
    step: str = "newton"
    tol: float = 1e-8
    max_iter: int = 500
    # propensity / effects
    propensity_floor: float = 0.01
    ridge: float = 1e-4
    cross_fit_folds: int = 5
    alpha: float = 0.05
    reference_level: int = 1
    overlap_thresholds: list = field(default_factory=lambda: [0.01, 0.05])
    marginal_weighting: str = "observed"
    # preprocessing
    transform: str = "none"
    shift: float = 0.0
    standardize_outcomes: bool = False
    standardize_covariates: bool = True
    # diagnose
    k_grid: list = field(default_factory=lambda: [0, 5, 10, 20])
    # simulate / benchmark
    scenario: dict = field(default_factory=dict)
    replications: int = 200
    methods: list = field(default_factory=lambda: ["spatial_tensor", "tensor", "spatial_ps",
                                                   "regression"])
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ContractError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path) -> None:
        write_json(self.to_dict(), path)

    def pipeline_config(self):
        from .estimator import PipelineConfig

        return PipelineConfig(
            ranks=None if self.ranks is None else tuple(self.ranks),
            rank_grids=tuple(tuple(g) for g in self.rank_grids),
            cv_folds=self.cv_folds, cv_rule=self.cv_rule,
            spatial=self.spatial, max_eigs=self.max_eigs,
            patience=self.patience,
            fixed_eigs=None if self.fixed_eigs is None else tuple(self.fixed_eigs),
            reselect_step3=self.reselect_step3, propensity_floor=self.propensity_floor,
            ridge=self.ridge, cross_fit_folds=self.cross_fit_folds, alpha=self.alpha,
            reference_level=self.reference_level, step=self.step, tol=self.tol,
            max_iter=self.max_iter, seed=self.seed,
        )


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, pd.DataFrame):
        return _to_jsonable(obj.to_dict(orient="records"))
    return obj


def write_json(obj, path) -> None:
    # json emits floats with repr(), i.e. shortest round-trip digits
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_to_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(df: pd.DataFrame, path) -> None:
    # default float repr is the shortest string that round-trips
    df.to_csv(path, index=False, lineterminator="\n")


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

@dataclass
class IngestedData:
    Y_obs: np.ndarray
    design: ExposureDesign
    Z: np.ndarray
    centroids: np.ndarray
    unit_ids: list
    covariate_names: list
    outcome_names: list
    transform: TransformRecord | None
    covariate_scaling: dict
    dropped_units: list


def _read(path: Path, required=("unit_id",)) -> pd.DataFrame:
    if not path.exists():
        raise DataError(f"missing input file {path}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    for col in required:
        if col not in df.columns:
            raise DataError(f"{path.name}: missing required column {col!r}")
    ids = df["unit_id"].str.strip()
    blank = np.flatnonzero(ids.to_numpy() == "")
    if blank.size:
        raise DataError(f"{path.name}: empty unit_id at rows {(blank + 2).tolist()}")
    dup = ids.duplicated(keep=False).to_numpy()
    if dup.any():
        raise DataError(f"{path.name}: duplicate unit_id at rows {(np.flatnonzero(dup) + 2).tolist()}")
    df["unit_id"] = ids
    return df


def _float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        return np.nan


def _numeric(df: pd.DataFrame, cols, fname) -> np.ndarray:
    # float() is correctly rounded; pd.to_numeric can be off by an ulp
    out = np.empty((len(df), len(cols)))
    for j, c in enumerate(cols):
        vals = np.array([_float(t) for t in df[c]], dtype=np.float64)
        bad = ~np.isfinite(vals)
        if bad.any():
            raise DataError(f"{fname}: non-numeric values in column {c!r} at rows "
                            f"{(np.flatnonzero(bad) + 2).tolist()[:20]}")
        out[:, j] = vals
    return out


def _id_key(ids):
    """Sort key: numeric order when every id is an integer, else lexicographic."""
    try:
        return [(int(i), i) for i in ids]
    except ValueError:
        return [(0, i) for i in ids]


def ingest(dataset_dir, transform: str = "none", shift: float = 0.0,
           standardize_outcomes: bool = False, standardize_covariates: bool = True,
           reference_level: int = 1) -> IngestedData:
    """Load ``units.csv``, ``covariates.csv`` and ``outcomes.csv``.

    Files are inner-joined on ``unit_id``; units missing from any file are
    reported in ``dropped_units``.  Rows are ordered by ``unit_id``.
    """
    d = Path(dataset_dir)
    units = _read(d / "units.csv", ("unit_id", "x", "y"))
    cov = _read(d / "covariates.csv")
    out = _read(d / "outcomes.csv")
    exp_cols = sorted((c for c in units.columns if c.startswith("a_")),
                      key=lambda c: int(c[2:]) if c[2:].isdigit() else 10 ** 9)
    if not exp_cols or [c for c in exp_cols if not c[2:].isdigit()]:
        raise DataError("units.csv: exposure columns must be named a_1..a_K")
    if [int(c[2:]) for c in exp_cols] != list(range(1, len(exp_cols) + 1)):
        raise DataError("units.csv: exposure columns must be a_1..a_K without gaps")
    cov_cols = [c for c in cov.columns if c != "unit_id"]
    out_cols = [c for c in out.columns if c != "unit_id"]
    if not out_cols:
        raise DataError("outcomes.csv: no outcome columns")

    sets = [set(units.unit_id), set(cov.unit_id), set(out.unit_id)]
    common = sets[0] & sets[1] & sets[2]
    dropped = sorted((sets[0] | sets[1] | sets[2]) - common, key=lambda i: _id_key([i])[0])
    if not common:
        raise DataError("no unit_id is present in all three files")
    ids = sorted(common, key=lambda i: _id_key([i])[0])

    def take(df):
        return df.set_index("unit_id").loc[ids].reset_index()

    units, cov, out = take(units), take(cov), take(out)
    xy = _numeric(units, ["x", "y"], "units.csv")
    A = _numeric(units, exp_cols, "units.csv")
    if not np.all((A == 0) | (A == 1)):
        bad = np.flatnonzero(~np.all((A == 0) | (A == 1), axis=1))
        raise DataError(f"units.csv: exposures must be 0/1 (units {[ids[i] for i in bad[:20]]})")
    design = encode_levels(A.astype(int), reference_level)
    Z = _numeric(cov, cov_cols, "covariates.csv") if cov_cols else np.empty((len(ids), 0))
    scaling = {"names": cov_cols, "mean": [0.0] * len(cov_cols), "sd": [1.0] * len(cov_cols)}
    if standardize_covariates and cov_cols:
        mu, sd = Z.mean(axis=0), Z.std(axis=0)
        sd[sd == 0] = 1.0
        Z = (Z - mu) / sd
        scaling.update(mean=mu.tolist(), sd=sd.tolist())
    raw = _numeric(out, out_cols, "outcomes.csv")
    record = None
    if transform != "none" or standardize_outcomes:
        vals, record = preprocess_outcomes(raw, transform, shift, out_cols,
                                           standardize=standardize_outcomes)
    else:
        vals = raw
    N, L, O = len(ids), design.L, len(out_cols)
    Y = np.zeros((N, L, O))
    Y[np.arange(N), design.assignments - 1, :] = vals
    return IngestedData(Y, design, Z, xy, ids, cov_cols, out_cols, record, scaling, dropped)


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------

def emit_dataset(ds, out_dir, unit_ids=None) -> None:
    """Write a synthetic dataset in the ingestion schema plus ground-truth files."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    N, L, O = ds.Y_obs.shape
    ids = unit_ids if unit_ids is not None else [str(i + 1) for i in range(N)]
    bits = ds.design.binary()
    units = pd.DataFrame({"unit_id": ids, "x": ds.centroids[:, 0], "y": ds.centroids[:, 1]})
    for k in range(ds.design.K):
        units[f"a_{k + 1}"] = bits[:, k]
    write_csv(units, d / "units.csv")
    cov = pd.DataFrame(ds.Z, columns=[f"z{j + 1}" for j in range(ds.Z.shape[1])])
    cov.insert(0, "unit_id", ids)
    write_csv(cov, d / "covariates.csv")
    y = ds.Y_obs[np.arange(N), ds.design.assignments - 1, :]
    outc = pd.DataFrame(y, columns=[f"y{o + 1}" for o in range(O)])
    outc.insert(0, "unit_id", ids)
    write_csv(outc, d / "outcomes.csv")

    truth_dir = d / "truth"
    truth_dir.mkdir(exist_ok=True)
    pats = level_patterns(ds.design.K)
    rows = []
    for l in range(L):
        for o in range(O):
            rows.append(dict(level=l + 1, exposure_pattern="".join(map(str, pats[l])),
                             outcome=f"y{o + 1}", theta=ds.theta_true[l, o]))
    write_csv(pd.DataFrame(rows), truth_dir / "effects.csv")
    long = pd.DataFrame({
        "unit_id": np.repeat(np.array(ids, dtype=object)[:, None], L * O, axis=1).ravel(),
        "level": np.tile(np.repeat(np.arange(1, L + 1), O), N),
        "outcome": np.tile([f"y{o + 1}" for o in range(O)], N * L),
        "value": ds.Y_true.reshape(N, L * O).ravel(),
    })
    write_csv(long, truth_dir / "potential_outcomes.csv")
    conf = pd.DataFrame(ds.S, columns=[f"s{j + 1}" for j in range(ds.S.shape[1])])
    conf.insert(0, "unit_id", ids)
    write_csv(conf, truth_dir / "confounder.csv")
    pr = pd.DataFrame(ds.propensities, columns=[f"pi_{l + 1}" for l in range(L)])
    pr.insert(0, "unit_id", ids)
    write_csv(pr, truth_dir / "propensities.csv")
    if ds.config is not None:
        write_json(ds.config.to_dict(), d / "scenario.json")


def load_truth(dataset_dir):
    """Ground-truth effects (L x O) written by :func:`emit_dataset`, or None."""
    p = Path(dataset_dir) / "truth" / "effects.csv"
    if not p.exists():
        return None
    df = pd.read_csv(p, float_precision="round_trip")
    L = int(df["level"].max())
    O = df["outcome"].nunique()
    return df["theta"].to_numpy().reshape(L, O)


def workers_from_env() -> int:
    try:
        return max(1, int(os.environ.get("SPATIALTENSOR_WORKERS", "1")))
    except ValueError:
        return 1
