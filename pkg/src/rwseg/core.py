"""Domain types shared across the package, and segmentation hardening.

Voxels are linearised x-fastest, then y, then z: ``i = x + nx * (y + ny * z)``.
Soft segmentations are stored label-major as arrays of shape ``(K, n)``.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

SIMPLEX_TOL = 1e-8

Dims = Tuple[int, int, int]


class RWSegError(Exception):
    """Base class for errors raised by this package."""


class DimensionMismatch(RWSegError, ValueError):
    pass


class SingularSystem(RWSegError):
    """The random-walk system matrix is not positive definite."""


class NonConvergence(RWSegError):
    """An iterative solver hit its iteration cap."""


class NonConvergenceWarning(UserWarning):
    pass


def _check_dims(dims) -> Dims:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise ValueError(f"dims must be three positive integers, got {dims}")
    return dims


def n_voxels(dims) -> int:
    return int(dims[0]) * int(dims[1]) * int(dims[2])


def to_grid(flat, dims):
    """Reshape an x-fastest flat array to an ``(nx, ny, nz)`` grid."""
    return np.reshape(flat, tuple(dims), order="F")


def from_grid(grid):
    return np.ravel(grid, order="F")


@dataclass(frozen=True)
class Volume:
    dims: Dims
    data: np.ndarray

    def __post_init__(self):
        dims = _check_dims(self.dims)
        data = np.ascontiguousarray(self.data, dtype=np.float64).ravel()
        if data.size != n_voxels(dims):
            raise DimensionMismatch(
                f"volume data has {data.size} values, dims {dims} need {n_voxels(dims)}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", data)

    @property
    def n(self) -> int:
        return self.data.size

    @property
    def grid(self):
        return to_grid(self.data, self.dims)


@dataclass(frozen=True)
class LabelSet:
    count: int
    names: Optional[Sequence[str]] = None

    def __post_init__(self):
        if int(self.count) < 2:
            raise ValueError("a label set needs at least two labels")
        if self.names is not None and len(self.names) != self.count:
            raise ValueError("label names must match the label count")


@dataclass(frozen=True)
class HardSeg:
    dims: Dims
    labels: np.ndarray
    K: int

    def __post_init__(self):
        dims = _check_dims(self.dims)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64).ravel()
        if labels.size != n_voxels(dims):
            raise DimensionMismatch(
                f"label map has {labels.size} values, dims {dims} need {n_voxels(dims)}")
        if int(self.K) < 2:
            raise ValueError("K must be at least 2")
        if labels.size and (labels.min() < 0 or labels.max() >= self.K):
            raise ValueError(f"labels must lie in [0, {self.K})")
        labels.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "K", int(self.K))

    @property
    def n(self) -> int:
        return self.labels.size

    def one_hot(self) -> "SoftSeg":
        probs = np.zeros((self.K, self.n))
        probs[self.labels, np.arange(self.n)] = 1.0
        return SoftSeg(self.dims, probs)


@dataclass(frozen=True)
class SoftSeg:
    """Per-voxel label distribution; ``probs[s, i]`` is Pr(voxel i has label s)."""

    dims: Dims
    probs: np.ndarray

    def __post_init__(self):
        dims = _check_dims(self.dims)
        probs = np.array(self.probs, dtype=np.float64, ndmin=2)
        if probs.ndim != 2 or probs.shape[1] != n_voxels(dims):
            raise DimensionMismatch(
                f"probability array shape {probs.shape} incompatible with dims {dims}")
        if probs.shape[0] < 2:
            raise ValueError("a soft segmentation needs at least two labels")
        probs.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "probs", probs)

    @property
    def K(self) -> int:
        return self.probs.shape[0]

    @property
    def n(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def normalized(cls, dims, probs):
        """Clamp negatives to zero and rescale each voxel to sum to one."""
        p = np.maximum(np.asarray(probs, dtype=np.float64), 0.0)
        tot = p.sum(axis=0)
        bad = tot <= 0
        if np.any(bad):
            p[:, bad] = 1.0
            tot = p.sum(axis=0)
        return cls(dims, p / tot)


@dataclass(frozen=True)
class Params:
    """Non-negative weights: one per Laplacian (``alpha``), one per prior (``beta``)."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        a = np.array(self.alpha, dtype=np.float64, ndmin=1)
        b = np.array(self.beta, dtype=np.float64, ndmin=1)
        if a.ndim != 1 or b.ndim != 1:
            raise ValueError("alpha and beta must be vectors")
        v = np.concatenate([a, b])
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("weights must be finite and non-negative")
        if not np.any(v > 0):
            raise ValueError("at least one weight must be positive")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta])

    def __len__(self):
        return self.alpha.size + self.beta.size

    @classmethod
    def from_vector(cls, v, n_alpha: int) -> "Params":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:n_alpha], v[n_alpha:])

    @classmethod
    def uniform(cls, n_alpha: int, n_beta: int) -> "Params":
        k = n_alpha + n_beta
        return cls(np.full(n_alpha, 1.0 / k), np.full(n_beta, 1.0 / k))

    def scaled(self, c: float) -> "Params":
        return Params(self.alpha * c, self.beta * c)

    def to_dict(self) -> dict:
        return {"alpha": [float(a) for a in self.alpha], "beta": [float(b) for b in self.beta]}

    @classmethod
    def from_dict(cls, d) -> "Params":
        return cls(d["alpha"], d["beta"])


def harden(y: SoftSeg, prefer: Optional[HardSeg] = None, tie_tol: float = 0.0) -> HardSeg:
    """Hard segmentation from a soft one.

    Ties go to the smallest label index. With ``prefer`` given, a voxel whose
    preferred label is within ``tie_tol`` of the maximum takes that label
    instead; this is the ground-truth-favouring rule used during training.
    """
    probs = y.probs
    labels = np.argmax(probs, axis=0)
    if prefer is not None:
        if prefer.n != y.n:
            raise DimensionMismatch("preferred labelling does not match soft segmentation")
        idx = np.arange(y.n)
        own = probs[prefer.labels, idx]
        top = probs[labels, idx]
        labels = np.where(own >= top - tie_tol, prefer.labels, labels)
    return HardSeg(y.dims, labels, y.K)


@dataclass(frozen=True)
class Violation:
    kind: str  # "shape" | "nonfinite" | "negativity" | "normalization"
    voxel: Optional[int] = None
    label: Optional[int] = None
    value: Optional[float] = None
    message: str = field(default="", compare=False)


def validate_soft(y, tol: float = SIMPLEX_TOL) -> Optional[Violation]:
    """Return the first violated soft-segmentation invariant, or ``None``.

    Accepts a :class:`SoftSeg` or a ``(dims, probs)`` pair so malformed data
    can be checked before construction. Never raises.
    """
    try:
        if isinstance(y, SoftSeg):
            dims, probs = y.dims, y.probs
        else:
            dims, probs = y
            probs = np.asarray(probs, dtype=np.float64)
        n = n_voxels(dims)
        if probs.ndim != 2 or probs.shape[1] != n or probs.shape[0] < 2:
            return Violation("shape", message=f"shape {probs.shape} vs {n} voxels")
    except Exception as exc:  # noqa: BLE001 - report, never abort
        return Violation("shape", message=str(exc))
    finite = np.isfinite(probs)
    if not finite.all():
        s, i = np.argwhere(~finite.T)[0][::-1]
        return Violation("nonfinite", int(i), int(s), float(probs[s, i]))
    neg = probs < -tol
    if neg.any():
        i, s = np.argwhere(neg.T)[0]
        return Violation("negativity", int(i), int(s), float(probs[s, i]),
                         f"y({i},{s}) = {probs[s, i]:g}")
    sums = probs.sum(axis=0)
    off = np.abs(sums - 1.0) > tol
    if off.any():
        i = int(np.argmax(off))
        return Violation("normalization", i, None, float(sums[i]),
                         f"voxel {i} sums to {sums[i]:g}")
    return None
