"""Spatial projected gradient descent for masked, weighted Tucker completion.

The unit factor is parameterized as ``U1 = Z @ eta_Z + Phi[:, sel] @ beta``
where ``Phi`` is a Laplacian eigenbasis and ``sel`` the selected eigenvector
indices.  The loss

    f = sum_{i,l,o} M_ilo (Y_ilo - [G x1 U1 x2 U2 x3 U3]_ilo)^2,

with ``M = weights * mask``, is minimized by block-coordinate descent over
(G, [eta_Z; beta], U2, U3).  Each block takes a step along a descent
direction with Armijo backtracking; U2 and U3 are then retracted to
orthonormal columns by QR, the triangular factor being absorbed into G.

Two step rules are available.  ``"newton"`` preconditions the block gradient
with the block Hessian; the loss is quadratic in every block, so the unit
step is the exact block minimizer.  ``"gradient"`` uses the raw negative
gradient.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .spatial_basis import SpectralBasis
from .tensor_core import ContractError, hosvd, tucker_reconstruct

log = logging.getLogger(__name__)

ARMIJO = 1e-4
SHRINK = 0.5
MONOTONE_SLACK = 1e-10
CV_TIE_RTOL = 1e-9
INIT_IMPUTE_ROUNDS = 10


class ConvergenceError(RuntimeError):
    pass


@dataclass
class FitConfig:
    ranks: tuple[int, int, int]
    max_eigs: int | None = None
    patience: int = 3
    select: bool = True
    step: str = "newton"
    tol: float = 1e-8
    max_iter: int = 500
    seed: int = 0

    def __post_init__(self):
        self.ranks = tuple(int(r) for r in self.ranks)
        if len(self.ranks) != 3 or min(self.ranks) < 1:
            raise ContractError(f"invalid ranks {self.ranks}")
        if self.tol <= 0 or self.max_iter < 1 or self.patience < 1:
            raise ContractError("tol, max_iter and patience must be positive")
        if self.step not in ("newton", "gradient"):
            raise ContractError(f"unknown step rule {self.step!r}")

    def resolved_max_eigs(self, n_units: int) -> int:
        if self.max_eigs is None:
            return int(min(n_units // 10, 100))
        if self.max_eigs > n_units:
            raise ContractError("max_eigs cannot exceed the number of units")
        return int(self.max_eigs)


@dataclass
class SpatialTuckerModel:
    core: np.ndarray
    eta_Z: np.ndarray
    beta: np.ndarray
    selected_eigs: list[int]
    U2: np.ndarray
    U3: np.ndarray
    objective_trace: list[float] = field(default_factory=list)
    bic_trace: list[float] = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0
    n_obs: int = 0
    bic: float = np.nan

    @property
    def ranks(self) -> tuple[int, int, int]:
        return self.core.shape

    @property
    def k(self) -> int:
        return len(self.selected_eigs)

    @property
    def objective(self) -> float:
        return self.objective_trace[-1] if self.objective_trace else np.nan

    def design(self, Z, basis: SpectralBasis | None) -> np.ndarray:
        return unit_design(Z, basis, self.selected_eigs)

    def theta(self) -> np.ndarray:
        return np.vstack([self.eta_Z, self.beta])

    def U1(self, Z, basis: SpectralBasis | None) -> np.ndarray:
        return self.design(Z, basis) @ self.theta()

    def spatial_component(self, basis: SpectralBasis | None) -> np.ndarray:
        """Estimated latent spatial factor ``Phi[:, sel] @ beta`` (N x r1)."""
        if not self.selected_eigs:
            n = basis.n if basis is not None else 0
            return np.zeros((n, self.core.shape[0]))
        return basis.columns(self.selected_eigs) @ self.beta

    def report(self) -> dict:
        return {
            "ranks": list(self.ranks),
            "selected_eigs": [int(j) + 1 for j in self.selected_eigs],
            "converged": bool(self.converged),
            "n_iter": int(self.n_iter),
            "n_obs": int(self.n_obs),
            "objective": float(self.objective),
            "bic": float(self.bic),
            "objective_trace": [float(v) for v in self.objective_trace],
            "bic_trace": [float(v) for v in self.bic_trace],
        }


def unit_design(Z, basis: SpectralBasis | None, eigs) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    eigs = list(eigs)
    if not eigs:
        return Z
    if basis is None:
        raise ContractError("eigenvectors requested without a spectral basis")
    if basis.n != Z.shape[0]:
        raise ContractError(f"basis size {basis.n} != number of units {Z.shape[0]}")
    return np.hstack([Z, basis.columns(eigs)])


# ---------------------------------------------------------------------------
# loss, gradients, block Hessians
# ---------------------------------------------------------------------------

def _reconstruct(G, U1, U2, U3):
    return np.einsum("abc,ia,lb,oc->ilo", G, U1, U2, U3, optimize=True)


def _loss(Y, M, G, U1, U2, U3) -> float:
    R = Y - _reconstruct(G, U1, U2, U3)
    return float(np.sum(M * R * R))


def block_gradients(Y, M, X, G, theta, U2, U3) -> dict:
    """Analytic gradients of the masked weighted loss for every block."""
    U1 = X @ theta
    MR = M * (Y - _reconstruct(G, U1, U2, U3))
    gG = -2.0 * np.einsum("ilo,ia,lb,oc->abc", MR, U1, U2, U3, optimize=True)
    B = np.einsum("abc,lb,oc->alo", G, U2, U3, optimize=True)
    gU1 = -2.0 * np.einsum("ilo,alo->ia", MR, B, optimize=True)
    C2 = np.einsum("abc,ia,oc->ibo", G, U1, U3, optimize=True)
    gU2 = -2.0 * np.einsum("ilo,ibo->lb", MR, C2, optimize=True)
    C3 = np.einsum("abc,ia,lb->ilc", G, U1, U2, optimize=True)
    gU3 = -2.0 * np.einsum("ilo,ilc->oc", MR, C3, optimize=True)
    return {"core": gG, "theta": X.T @ gU1, "U2": gU2, "U3": gU3}


def _lstsq_step(H, g):
    """Minimum-norm solution of H d = -g/2 (H is the Gauss-Newton matrix)."""
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    cut = max(w.max(), 0.0) * 1e-12
    inv = np.where(w > cut, 1.0 / np.where(w > cut, w, 1.0), 0.0)
    return -0.5 * (V @ (inv * (V.T @ g)))


def _hess_core(M, U1, U2, U3):
    T = np.einsum("ilo,ia,ix->loax", M, U1, U1, optimize=True)
    T = np.einsum("loax,lb,ly->oaxby", T, U2, U2, optimize=True)
    H = np.einsum("oaxby,oc,oz->abcxyz", T, U3, U3, optimize=True)
    n = G_size = U1.shape[1] * U2.shape[1] * U3.shape[1]
    return H.reshape(G_size, n)


def _hess_theta(M, X, B):
    C = np.einsum("ilo,alo,blo->iab", M, B, B, optimize=True)
    q, r = X.shape[1], B.shape[0]
    H = np.einsum("ij,ik,iab->jakb", X, X, C, optimize=True)
    return H.reshape(q * r, q * r)


# ---------------------------------------------------------------------------
# solver state
# ---------------------------------------------------------------------------

@dataclass
class _State:
    G: np.ndarray
    theta: np.ndarray
    U2: np.ndarray
    U3: np.ndarray


def _line_search(f0, gdotd, evaluate, t0=1.0):
    """Armijo backtracking; returns (t, f) or (0, f0) when no decrease is found."""
    t = t0
    for _ in range(60):
        f = evaluate(t)
        if np.isfinite(f) and f <= f0 + ARMIJO * t * gdotd:
            return t, f
        t *= SHRINK
    return 0.0, f0


def _retract(U, G, mode):
    Q, R = np.linalg.qr(U)
    s = np.sign(np.diag(R))
    s[s == 0] = 1.0
    Q, R = Q * s[None, :], R * s[:, None]
    if mode == 2:
        G = np.einsum("abc,xb->axc", G, R)
    else:
        G = np.einsum("abc,xc->abx", G, R)
    return Q, G


class _Solver:
    def __init__(self, Y, M, X, step, step_sizes=None):
        self.Y, self.M, self.X, self.step = Y, M, X, step
        self.t = dict(step_sizes or {"core": 1.0, "theta": 1.0, "U2": 1.0, "U3": 1.0})

    def loss(self, s: _State) -> float:
        return _loss(self.Y, self.M, s.G, self.X @ s.theta, s.U2, s.U3)

    def _direction(self, name, g, H):
        if self.step == "newton":
            d = _lstsq_step(H(), g)
            return d, 1.0
        return -g, self.t[name] * 2.0

    def _update(self, name, s, f, grad_fn, hess_fn, apply):
        g = grad_fn()
        d, t0 = self._direction(name, g.ravel(), hess_fn)
        gd = float(g.ravel() @ d)
        if gd >= 0:
            return s, f
        t, fnew = _line_search(f, gd, lambda t: self.loss(apply(t * d)), t0)
        if t == 0.0:
            return s, f
        if self.step == "gradient":
            self.t[name] = t
        return apply(t * d), fnew

    def sweep(self, s: _State, f: float):
        Y, M, X = self.Y, self.M, self.X
        # core
        U1 = X @ s.theta

        def g_core():
            MR = M * (Y - _reconstruct(s.G, U1, s.U2, s.U3))
            return -2.0 * np.einsum("ilo,ia,lb,oc->abc", MR, U1, s.U2, s.U3, optimize=True)

        s, f = self._update(
            "core", s, f, g_core, lambda: _hess_core(M, U1, s.U2, s.U3),
            lambda d, s=s: replace(s, G=s.G + d.reshape(s.G.shape)),
        )
        # unit factor coefficients
        B = np.einsum("abc,lb,oc->alo", s.G, s.U2, s.U3, optimize=True)

        def g_theta():
            MR = M * (Y - np.einsum("ia,alo->ilo", X @ s.theta, B, optimize=True))
            return X.T @ (-2.0 * np.einsum("ilo,alo->ia", MR, B, optimize=True))

        s, f = self._update(
            "theta", s, f, g_theta, lambda: _hess_theta(M, X, B),
            lambda d, s=s: replace(s, theta=s.theta + d.reshape(s.theta.shape)),
        )
        U1 = X @ s.theta
        # exposure factor
        C = np.einsum("abc,ia,oc->ibo", s.G, U1, s.U3, optimize=True)

        def g_u2():
            MR = M * (Y - np.einsum("lb,ibo->ilo", s.U2, C, optimize=True))
            return -2.0 * np.einsum("ilo,ibo->lb", MR, C, optimize=True)

        def h_u2():
            Hl = np.einsum("ilo,ibo,ico->lbc", M, C, C, optimize=True)
            return _block_diag(Hl)

        s, f = self._update(
            "U2", s, f, g_u2, h_u2,
            lambda d, s=s: replace(s, U2=s.U2 + d.reshape(s.U2.shape)),
        )
        U2, G = _retract(s.U2, s.G, 2)
        s = replace(s, U2=U2, G=G)
        # outcome factor
        D = np.einsum("abc,ia,lb->ilc", s.G, U1, s.U2, optimize=True)

        def g_u3():
            MR = M * (Y - np.einsum("oc,ilc->ilo", s.U3, D, optimize=True))
            return -2.0 * np.einsum("ilo,ilc->oc", MR, D, optimize=True)

        def h_u3():
            Ho = np.einsum("ilo,ilb,ilc->obc", M, D, D, optimize=True)
            return _block_diag(Ho)

        s, f = self._update(
            "U3", s, f, g_u3, h_u3,
            lambda d, s=s: replace(s, U3=s.U3 + d.reshape(s.U3.shape)),
        )
        U3, G = _retract(s.U3, s.G, 3)
        s = replace(s, U3=U3, G=G)
        return s, self.loss(s)


def _block_diag(blocks):
    n, r, _ = blocks.shape
    H = np.zeros((n * r, n * r))
    for j in range(n):
        H[j * r:(j + 1) * r, j * r:(j + 1) * r] = blocks[j]
    return H


def _run(solver: _Solver, s: _State, tol, max_iter):
    f = solver.loss(s)
    if not np.isfinite(f):
        raise ConvergenceError("non-finite loss at initialization")
    trace = [f]
    converged = False
    it = 0
    scale = float(np.sum(solver.M * solver.Y * solver.Y))
    while it < max_iter:
        it += 1
        s, fnew = solver.sweep(s, f)
        if not np.isfinite(fnew):
            raise ConvergenceError(f"non-finite loss at iteration {it}")
        if fnew > f * (1 + MONOTONE_SLACK) + 1e-300:
            raise AssertionError(f"objective increased at iteration {it}: {f} -> {fnew}")
        trace.append(fnew)
        rel = (f - fnew) / max(f, 1e-300)
        f = fnew
        if rel < tol or f <= 1e-30 * max(scale, 1.0):
            converged = True
            break
    return s, trace, converged, it


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def bic_score(rss: float, n_obs: int, df: int) -> float:
    """``n log(rss / n) + df log(n)``."""
    if not n_obs > df >= 1:
        raise ContractError(f"need n_obs > df >= 1, got n_obs={n_obs}, df={df}")
    if rss <= 0:
        warnings.warn("non-positive RSS in BIC; using machine-epsilon floor", RuntimeWarning,
                      stacklevel=2)
        rss = np.finfo(float).eps
    return float(n_obs * np.log(rss / n_obs) + df * np.log(n_obs))


def degrees_of_freedom(ranks, q: int, k: int, L: int, O: int) -> int:
    r1, r2, r3 = ranks
    return int(r1 * r2 * r3 + q * r1 + k * r1 + (L - r2) * r2 + (O - r3) * r3)


def _prep(Y, mask, weights):
    Y = np.asarray(Y, dtype=np.float64)
    A = np.asarray(mask, dtype=np.float64)
    if Y.ndim != 3 or A.shape != Y.shape:
        raise ContractError(f"Y {Y.shape} and mask {A.shape} must be matching 3-way arrays")
    if not np.all((A == 0) | (A == 1)):
        raise ContractError("mask entries must be 0 or 1")
    if A.sum() == 0:
        raise ContractError("mask has no observed cells")
    if weights is None:
        M = A.copy()
    else:
        W = np.asarray(weights, dtype=np.float64)
        if W.shape != Y.shape:
            raise ContractError("weights must match Y")
        if np.any(W < 0):
            raise ContractError("weights must be nonnegative")
        if np.any((W > 0) & (A == 0)):
            raise ContractError("weight support must lie inside the mask")
        M = W * A
    Yc = np.where(A > 0, Y, 0.0)
    if not np.all(np.isfinite(Yc)):
        raise ContractError("observed outcomes must be finite")
    return Yc, A, M


def mean_fill(Y, mask) -> np.ndarray:
    """Replace unobserved cells by the observed mean of their (level, outcome) fiber."""
    Y = np.asarray(Y, dtype=np.float64)
    A = np.asarray(mask, dtype=np.float64)
    cnt = A.sum(axis=0)
    tot = np.where(A > 0, Y, 0.0).sum(axis=0)
    overall = tot.sum() / max(cnt.sum(), 1)
    mu = np.where(cnt > 0, tot / np.maximum(cnt, 1), overall)
    return np.where(A > 0, Y, mu[None, :, :])


def initialize(Y, mask, X, ranks) -> _State:
    """HOSVD of the mean-filled tensor, refined by a few impute-and-truncate
    rounds; unit coefficients by least squares.

    Starting block descent straight from the mean fill can land it in a
    long plateau far from the optimum when many cells are missing.
    """
    N, L, O = Y.shape
    r1, r2, r3 = ranks
    if r1 > N or r2 > L or r3 > O:
        raise ContractError(f"ranks {ranks} exceed dims {(N, L, O)}")
    A = np.asarray(mask) > 0
    filled = mean_fill(Y, mask)
    f = hosvd(filled, ranks)
    if not A.all():
        for _ in range(INIT_IMPUTE_ROUNDS):
            filled = np.where(A, Y, tucker_reconstruct(f))
            f = hosvd(filled, ranks)
    theta, *_ = np.linalg.lstsq(X, f.U1, rcond=None)
    return _State(f.core.copy(), theta, f.U2.copy(), f.U3.copy())


def _state_from_model(model: SpatialTuckerModel, eigs) -> _State:
    """Warm start with ``eigs`` (superset of the model's set); new rows start at 0."""
    r1 = model.core.shape[0]
    pos = {j: n for n, j in enumerate(model.selected_eigs)}
    beta = np.zeros((len(eigs), r1))
    for n, j in enumerate(eigs):
        if j in pos:
            beta[n] = model.beta[pos[j]]
    theta = np.vstack([model.eta_Z, beta])
    return _State(model.core.copy(), theta, model.U2.copy(), model.U3.copy())


def fit_fixed(Y, mask, Z, basis, eigs, config: FitConfig, weights=None,
              init: _State | SpatialTuckerModel | None = None) -> SpatialTuckerModel:
    """Fit with a fixed set of eigenvector indices (0-based), no selection."""
    Yc, A, M = _prep(Y, mask, weights)
    eigs = [int(j) for j in eigs]
    X = unit_design(Z, basis, eigs)
    if X.shape[0] != Y.shape[0]:
        raise ContractError("Z rows must match the number of units")
    if isinstance(init, SpatialTuckerModel):
        init = _state_from_model(init, eigs)
    if init is None:
        init = initialize(Yc, A, X, config.ranks)
    solver = _Solver(Yc, M, X, config.step)
    s, trace, converged, it = _run(solver, init, config.tol, config.max_iter)
    q = np.asarray(Z).reshape(Y.shape[0], -1).shape[1]
    N, L, O = Y.shape
    n_obs = int(A.sum())
    df = degrees_of_freedom(config.ranks, q, len(eigs), L, O)
    bic = bic_score(trace[-1], n_obs, df) if n_obs > df else np.inf
    return SpatialTuckerModel(
        core=s.G, eta_Z=s.theta[:q], beta=s.theta[q:], selected_eigs=eigs,
        U2=s.U2, U3=s.U3, objective_trace=trace, bic_trace=[bic],
        converged=converged, n_iter=it, n_obs=n_obs, bic=bic,
    )


def select_eigenvectors(model: SpatialTuckerModel, Y, mask, Z, basis: SpectralBasis,
                        config: FitConfig, weights=None) -> SpatialTuckerModel:
    """Forward stepwise expansion of the eigenvector set.

    Candidates are the non-constant eigenvectors in ascending eigenvalue
    order (0-based indices ``1 .. max_eigs``).  Each is appended in turn, the
    model refit from the current solution, and the expansion kept only when
    the BIC strictly decreases.  Stops after ``patience`` consecutive
    rejections or once ``max_eigs`` eigenvectors are in use.
    """
    max_eigs = config.resolved_max_eigs(basis.n)
    current = model
    bic_trace = list(model.bic_trace)
    rejections = 0
    for j in range(1, max_eigs + 1):
        if current.k >= max_eigs:
            break
        if j in current.selected_eigs:
            continue
        eigs = current.selected_eigs + [j]
        trial = fit_fixed(Y, mask, Z, basis, eigs, config, weights, init=current)
        bic_trace.append(trial.bic)
        if trial.bic < current.bic:
            current = trial
            rejections = 0
        else:
            rejections += 1
            if rejections >= config.patience:
                break
    order = np.argsort(current.selected_eigs, kind="stable")
    current = replace(
        current,
        selected_eigs=[current.selected_eigs[n] for n in order],
        beta=current.beta[order],
        bic_trace=bic_trace,
    )
    return current


def spgd_fit(Y, mask, Z, basis: SpectralBasis | None, config: FitConfig, weights=None,
             start_eigs=(), init=None) -> SpatialTuckerModel:
    """Masked (optionally weighted) spatial Tucker fit with eigenvector selection.

    ``start_eigs`` seeds the eigenvector set (0-based indices); with
    ``config.select`` false the set is used as given.
    """
    model = fit_fixed(Y, mask, Z, basis, list(start_eigs), config, weights, init=init)
    if config.select and basis is not None:
        model = select_eigenvectors(model, Y, mask, Z, basis, config, weights)
    log.debug("spgd fit: k=%d objective=%.6g bic=%.6g", model.k, model.objective, model.bic)
    return model


def predict_full(model: SpatialTuckerModel, Z, basis: SpectralBasis | None) -> np.ndarray:
    """Completed tensor over every (unit, level, outcome) cell."""
    return _reconstruct(model.core, model.U1(Z, basis), model.U2, model.U3)


# ---------------------------------------------------------------------------
# rank cross-validation and cross-fitting
# ---------------------------------------------------------------------------

DEFAULT_GRIDS = (range(1, 11), range(1, 4), range(1, 6))


def _cell_folds(A, folds, rng):
    """Random fold labels for observed cells, stratified by unit.

    Each unit's observed cells are shuffled and dealt to consecutive folds
    from a random offset, so no held-out fold removes all of a unit's cells
    when it has at least two.
    """
    obs = np.flatnonzero(A.ravel() > 0)
    unit = obs // (A.shape[1] * A.shape[2])
    order = np.lexsort((rng.permutation(obs.size), unit))
    start = np.searchsorted(unit[order], unit[order], side="left")
    pos = np.arange(obs.size) - start
    offset = rng.integers(0, folds, size=A.shape[0])
    assign = np.empty(obs.size, dtype=np.int64)
    assign[order] = (pos + offset[unit[order]]) % folds
    return obs, assign


def cross_validate_ranks(Y, mask, Z, basis, grids=DEFAULT_GRIDS, folds: int = 5,
                         seed: int = 0, eigs=(), config: FitConfig | None = None,
                         return_scores: bool = False, rule: str = "1se"):
    """Choose Tucker ranks by K-fold cross-validation over observed cells.

    Folds are stratified by unit (see :func:`_cell_folds`); a split leaving
    any mode slice without training cells is redrawn, at most 10 times.

    The unit rank is capped at the rank of the unit design.  With
    ``rule="min"`` triples whose mean held-out squared error is within 1e-9
    of the best, relative to the mean squared observed outcome, count as
    tied.  ``rule="1se"`` widens that band to one standard error of the best
    triple's fold errors.  Among tied triples the smallest rank sum wins,
    then the lexicographically smaller triple.
    """
    if rule not in ("min", "1se"):
        raise ContractError(f"unknown CV rule {rule!r}")
    Yc, A, _ = _prep(Y, mask, None)
    N, L, O = Y.shape
    X = unit_design(Z, basis, list(eigs))
    # U1 = X theta has rank at most rank(X); larger r1 is not identified
    r1_max = min(N, int(np.linalg.matrix_rank(X)))
    triples = [t for t in itertools.product(*[sorted(set(int(r) for r in g)) for g in grids])
               if t[0] <= r1_max and t[1] <= L and t[2] <= O]
    if not triples:
        raise ContractError("rank grid is empty after clipping to tensor dims")
    if len(triples) == 1:
        return (triples[0], {triples[0]: np.nan}) if return_scores else triples[0]
    rng = np.random.default_rng(seed)
    for _ in range(10):
        obs, assign = _cell_folds(A, folds, rng)
        train_masks = []
        ok = True
        for f in range(folds):
            Af = A.ravel().copy()
            Af[obs[assign == f]] = 0.0
            Af = Af.reshape(A.shape)
            if (np.any(Af.sum(axis=(1, 2)) == 0) or np.any(Af.sum(axis=(0, 2)) == 0)
                    or np.any(Af.sum(axis=(0, 1)) == 0)):
                ok = False
                break
            train_masks.append(Af)
        if ok:
            break
    else:
        raise ContractError("could not draw CV folds without an all-missing slice")
    base = config or FitConfig(ranks=(1, 1, 1))
    flat_Y = Yc.ravel()
    scores, fold_errs = {}, {}
    for t in triples:
        cfg = replace(base, ranks=t, select=False)
        errs = []
        for f, Af in enumerate(train_masks):
            m = fit_fixed(Yc, Af, Z, basis, list(eigs), cfg)
            pred = _reconstruct(m.core, X @ m.theta(), m.U2, m.U3).ravel()
            held = obs[assign == f]
            errs.append(np.mean((flat_Y[held] - pred[held]) ** 2))
        scores[t] = float(np.mean(errs))
        fold_errs[t] = errs
    # scores equal up to round-off (relative to the data scale) count as ties
    low = min(scores.values())
    scale = max(abs(low), float(np.mean(flat_Y[obs] ** 2)))
    slack = CV_TIE_RTOL * scale
    if rule == "1se":
        best_t = min((t for t in triples if scores[t] == low), key=lambda t: (sum(t), t))
        slack = max(slack, float(np.std(fold_errs[best_t], ddof=1)) / np.sqrt(folds))
    tied = [t for t in triples if scores[t] <= low + slack]
    best = min(tied, key=lambda t: (sum(t), t))
    return (best, scores) if return_scores else best


def unit_folds(n_units: int, folds: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    assign = np.empty(n_units, dtype=np.int64)
    assign[rng.permutation(n_units)] = np.arange(n_units) % folds
    return assign


def cross_fit_impute(Y, mask, Z, basis, weights, config: FitConfig, folds: int = 5,
                     seed: int = 0, eigs=()) -> np.ndarray:
    """Cross-fitted completion: each fold's units are predicted by a model
    fitted on the remaining units, using the given eigenvector set."""
    Yc, A, _ = _prep(Y, mask, weights)
    N = Y.shape[0]
    cfg = replace(config, select=False)
    if folds <= 1:
        m = fit_fixed(Yc, A, Z, basis, list(eigs), cfg, weights)
        return predict_full(m, Z, basis)
    assign = unit_folds(N, folds, seed)
    X = unit_design(Z, basis, list(eigs))
    out = np.empty(Y.shape)
    for f in range(folds):
        held = assign == f
        if (~held).sum() < config.ranks[0]:
            raise ContractError(f"fold {f} leaves fewer training units than r1")
        Af = A.copy()
        Af[held] = 0.0
        Wf = None
        if weights is not None:
            Wf = np.asarray(weights, dtype=np.float64).copy()
            Wf[held] = 0.0
        m = fit_fixed(Yc, Af, Z, basis, list(eigs), cfg, Wf)
        out[held] = _reconstruct(m.core, X[held] @ m.theta(), m.U2, m.U3)
    return out
