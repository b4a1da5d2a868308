"""Prior terms, joint feature vectors, the total RW energy and the hard loss."""

from dataclasses import dataclass
from typing import List

import numpy as np
import scipy.sparse as sp

from .core import DimensionMismatch, HardSeg, Params, SoftSeg, Volume, harden, validate_soft
from .graph import Laplacian, laplacian_quadform


@dataclass(frozen=True)
class PriorTerm:
    """Reference segmentation ``y_ref`` with one non-negative weight per voxel."""

    y_ref: SoftSeg
    omega: np.ndarray

    def __post_init__(self):
        omega = np.ascontiguousarray(self.omega, dtype=np.float64).ravel()
        if omega.size != self.y_ref.n:
            raise DimensionMismatch("omega length does not match the reference segmentation")
        if not np.all(np.isfinite(omega)) or np.any(omega < 0):
            raise ValueError("omega must be finite and non-negative")
        bad = validate_soft(self.y_ref)
        if bad is not None:
            raise ValueError(f"prior reference is not a valid soft segmentation: {bad.kind}")
        omega.setflags(write=False)
        object.__setattr__(self, "omega", omega)

    @classmethod
    def uniform(cls, y_ref: SoftSeg) -> "PriorTerm":
        return cls(y_ref, np.ones(y_ref.n))


@dataclass(frozen=True)
class SampleModel:
    x: Volume
    laplacians: List[Laplacian]
    priors: List[PriorTerm]
    K: int

    def __post_init__(self):
        n = self.x.n
        if any(L.n != n for L in self.laplacians):
            raise DimensionMismatch("Laplacian size does not match the volume")
        for p in self.priors:
            if p.y_ref.n != n or p.y_ref.K != self.K:
                raise DimensionMismatch("prior reference does not match the volume / label count")
        if not self.priors:
            raise ValueError("a sample model needs at least one prior term")
        object.__setattr__(self, "laplacians", list(self.laplacians))
        object.__setattr__(self, "priors", list(self.priors))
        object.__setattr__(self, "_cache", {})

    def operators(self) -> "_Operators":
        """Stacked, pattern-aligned copies of the terms (built once, reused)."""
        ops = self._cache.get("ops")
        if ops is None:
            ops = _Operators.build(self)
            self._cache["ops"] = ops
        return ops

    @property
    def n(self) -> int:
        return self.x.n

    @property
    def n_alpha(self) -> int:
        return len(self.laplacians)

    @property
    def n_beta(self) -> int:
        return len(self.priors)

    def check_params(self, w: Params):
        if w.alpha.size != self.n_alpha or w.beta.size != self.n_beta:
            raise DimensionMismatch(
                f"params have {w.alpha.size}+{w.beta.size} entries, model needs "
                f"{self.n_alpha}+{self.n_beta}")


class _Operators:
    """All Laplacians on one shared CSR pattern, plus stacked prior arrays."""

    def __init__(self, pattern, lap_data, diag_pos, omega, yref):
        self.pattern = pattern
        self.lap_data = lap_data  # (n_alpha, nnz)
        self.diag_pos = diag_pos  # (n,) index of each diagonal entry in data
        self.omega = omega  # (n_beta, n)
        self.yref = yref  # (n_beta, K, n)

    @classmethod
    def build(cls, m):
        n = m.n
        pat = sp.identity(n, format="csr")
        for L in m.laplacians:
            pat = pat + abs(L.matrix)
        pat = pat.tocsr()
        pat.sort_indices()
        rows = np.repeat(np.arange(n), np.diff(pat.indptr))
        keys = rows * n + pat.indices
        lap_data = np.zeros((len(m.laplacians), keys.size))
        for a, L in enumerate(m.laplacians):
            c = L.matrix.tocoo()
            pos = np.searchsorted(keys, c.row.astype(np.int64) * n + c.col)
            np.add.at(lap_data[a], pos, c.data)
        diag_pos = np.searchsorted(keys, np.arange(n, dtype=np.int64) * (n + 1))
        omega = np.stack([p.omega for p in m.priors])
        yref = np.stack([p.y_ref.probs for p in m.priors])
        return cls(pat, lap_data, diag_pos, omega, yref)

    def matrix(self, w, scale=1.0, shift=0.0):
        """``scale * A(w) + shift * I`` on the shared pattern."""
        data = w.alpha @ self.lap_data if self.lap_data.size else np.zeros(self.pattern.nnz)
        data = data.copy()
        data[self.diag_pos] += w.beta @ self.omega
        if scale != 1.0:
            data *= scale
        if shift:
            data[self.diag_pos] += shift
        A = sp.csr_matrix((data, self.pattern.indices, self.pattern.indptr), shape=self.pattern.shape)
        A.has_sorted_indices = True
        return A

    def rhs(self, w):
        return np.einsum("b,bn,bkn->kn", w.beta, self.omega, self.yref)

    def constant(self, w):
        return float(np.einsum("b,bn,bkn->", w.beta, self.omega, self.yref ** 2))


@dataclass(frozen=True)
class FeatureVector:
    phi_alpha: np.ndarray
    phi_beta: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.phi_alpha, self.phi_beta])

    def __len__(self):
        return self.phi_alpha.size + self.phi_beta.size


def prior_energy(y: SoftSeg, p: PriorTerm) -> float:
    """sum_i omega_i sum_s (y(i,s) - y_ref(i,s))^2"""
    if y.probs.shape != p.y_ref.probs.shape:
        raise DimensionMismatch("segmentation and prior reference differ in shape")
    d = y.probs - p.y_ref.probs
    return float(np.sum(p.omega[None, :] * d * d))


def feature_vector(m: SampleModel, y: SoftSeg) -> FeatureVector:
    if y.n != m.n or y.K != m.K:
        raise DimensionMismatch("segmentation does not match the sample model")
    pa = np.array([laplacian_quadform(L, y) for L in m.laplacians], dtype=np.float64)
    pb = np.array([prior_energy(y, p) for p in m.priors], dtype=np.float64)
    return FeatureVector(pa, pb)


def total_energy(w: Params, psi: FeatureVector) -> float:
    if w.alpha.size != psi.phi_alpha.size or w.beta.size != psi.phi_beta.size:
        raise DimensionMismatch("weight and feature vectors differ in length")
    return float(np.dot(w.vector, psi.vector))


def system_matrix(m: SampleModel, w: Params) -> sp.csr_matrix:
    """A = sum_a w_a L_a + sum_b w_b diag(omega_b); shared by every label."""
    m.check_params(w)
    return m.operators().matrix(w)


def system_rhs(m: SampleModel, w: Params) -> np.ndarray:
    """Label-major right-hand sides b_s = sum_b w_b omega_b * y_ref_b,s."""
    m.check_params(w)
    return m.operators().rhs(w)


def prior_constant(m: SampleModel, w: Params) -> float:
    return m.operators().constant(w)


def rw_energy(m: SampleModel, w: Params, Y) -> float:
    """Energy evaluated through the assembled system: sum_s y_s'A y_s - 2 b_s'y_s + c.

    ``Y`` may be a SoftSeg or a raw label-major array (used by the solvers on
    iterates that are not yet normalised).
    """
    probs = Y.probs if isinstance(Y, SoftSeg) else np.asarray(Y, dtype=np.float64)
    A = system_matrix(m, w)
    B = system_rhs(m, w)
    AY = (A @ probs.T).T
    return float(np.sum(probs * AY) - 2.0 * np.sum(B * probs) + prior_constant(m, w))


def loss(z: HardSeg, y: SoftSeg, prefer_truth: bool = False, tie_tol: float = 0.0) -> float:
    """Fraction of voxels whose hardened label disagrees with ``z``.

    ``prefer_truth`` switches ties (within ``tie_tol``) to the ground-truth
    label; the default keeps the smallest-index rule.
    """
    if z.n != y.n:
        raise DimensionMismatch("hard and soft segmentations differ in voxel count")
    yh = harden(y, prefer=z if prefer_truth else None, tie_tol=tie_tol)
    return 1.0 - float(np.count_nonzero(yh.labels == z.labels)) / z.n
