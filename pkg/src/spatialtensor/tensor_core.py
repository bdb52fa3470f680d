"""Dense 3-way tensor algebra: unfolding, mode products, HOSVD.

Layout convention
-----------------
A tensor of dims ``(N, L, O)`` (unit, exposure level, outcome) is stored as a
numpy array of that shape.  Its canonical flat layout (``Tensor3.values``) has
the unit index varying fastest, then level, then outcome, i.e. Fortran order.

The mode-k unfolding places the mode-k fibers as columns, with the remaining
indices ordered so that the earlier mode varies fastest::

    mode 1: N x (L*O), column = l + L*o
    mode 2: L x (N*O), column = i + N*o
    mode 3: O x (N*L), column = i + N*l

``refold`` is the exact inverse of ``unfold``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ContractError(ValueError):
    """Raised when an input violates an operation's preconditions."""


def _check_mode(mode: int) -> int:
    if mode not in (1, 2, 3):
        raise ContractError(f"mode must be 1, 2 or 3, got {mode!r}")
    return mode - 1


def as_tensor3(x) -> np.ndarray:
    """Validate and convert ``x`` to a float64 array with three axes."""
    if isinstance(x, Tensor3):
        return x.data
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise ContractError(f"expected a 3-way array, got ndim={arr.ndim}")
    if min(arr.shape) < 1:
        raise ContractError(f"all dims must be >= 1, got {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class Tensor3:
    """Immutable (unit x level x outcome) tensor."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(as_tensor3(self.data), dtype=np.float64, copy=True)
        if not np.all(np.isfinite(arr)):
            raise ContractError("tensor entries must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_values(cls, values, dims) -> "Tensor3":
        values = np.asarray(values, dtype=np.float64).ravel()
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ContractError(f"invalid dims {dims}")
        if values.size != dims[0] * dims[1] * dims[2]:
            raise ContractError(f"{values.size} values do not fill dims {dims}")
        return cls(values.reshape(dims, order="F"))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel(order="F")

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, Tensor3):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.data, other.data)


@dataclass
class TuckerFactors:
    core: np.ndarray
    U1: np.ndarray
    U2: np.ndarray
    U3: np.ndarray

    @property
    def ranks(self) -> tuple[int, int, int]:
        return self.core.shape

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.U1.shape[0], self.U2.shape[0], self.U3.shape[0])


def unfold(t, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization (1-based mode)."""
    k = _check_mode(mode)
    arr = as_tensor3(t)
    return np.moveaxis(arr, k, 0).reshape(arr.shape[k], -1, order="F")


def refold(m, mode: int, dims) -> np.ndarray:
    """Inverse of :func:`unfold`."""
    k = _check_mode(mode)
    m = np.asarray(m, dtype=np.float64)
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ContractError(f"invalid dims {dims}")
    rest = [d for j, d in enumerate(dims) if j != k]
    if m.ndim != 2 or m.shape != (dims[k], rest[0] * rest[1]):
        raise ContractError(
            f"matrix of shape {m.shape} cannot be refolded along mode {mode} into {dims}"
        )
    return np.moveaxis(m.reshape(dims[k], rest[0], rest[1], order="F"), 0, k)


def mode_product(t, m, mode: int) -> np.ndarray:
    """Mode-k product ``t x_k m``; ``m`` has shape ``(r, dims[k])``."""
    k = _check_mode(mode)
    arr = np.asarray(t, dtype=np.float64)
    if arr.ndim != 3:
        raise ContractError("mode_product expects a 3-way array")
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if m.shape[1] != arr.shape[k]:
        raise ContractError(
            f"matrix has {m.shape[1]} columns but mode {mode} has size {arr.shape[k]}"
        )
    out = np.tensordot(m, arr, axes=(1, k))  # new axis first
    return np.moveaxis(out, 0, k)


def tucker_reconstruct(f: TuckerFactors) -> np.ndarray:
    core = np.asarray(f.core, dtype=np.float64)
    if core.ndim != 3:
        raise ContractError("core must be a 3-way array")
    for j, U in enumerate((f.U1, f.U2, f.U3)):
        if U.ndim != 2 or U.shape[1] != core.shape[j]:
            raise ContractError(
                f"factor U{j + 1} of shape {U.shape} does not match core rank {core.shape[j]}"
            )
    return np.einsum("abc,ia,lb,oc->ilo", core, f.U1, f.U2, f.U3, optimize=True)


def frobenius_norm(t) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(t, dtype=np.float64)))))


def inner_product(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"dims mismatch: {a.shape} vs {b.shape}")
    return float(np.sum(a * b))


def hosvd(t, ranks) -> TuckerFactors:
    """Truncated higher-order SVD.

    Each factor holds the leading left singular vectors of the corresponding
    unfolding; the core is ``t x1 U1^T x2 U2^T x3 U3^T``.
    """
    arr = as_tensor3(t)
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != 3:
        raise ContractError("ranks must be a triple")
    for r, d in zip(ranks, arr.shape):
        if not 1 <= r <= d:
            raise ContractError(f"rank {r} outside [1, {d}]")
    factors = []
    for k in (1, 2, 3):
        u, _, _ = np.linalg.svd(unfold(arr, k), full_matrices=False)
        factors.append(u[:, : ranks[k - 1]])
    core = arr
    for k, U in enumerate(factors, start=1):
        core = mode_product(core, U.T, k)
    return TuckerFactors(core, *factors)
