"""Lattice neighbourhoods and Gaussian-kernel graph Laplacians."""

import itertools
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import scipy.sparse as sp

from . import _accel
from .core import DimensionMismatch, SoftSeg, Volume, _check_dims, n_voxels

FEATURES = ("intensity", "gradient-magnitude")


def _half_offsets(connectivity):
    if connectivity == 6:
        return [(1, 0, 0), (0, 1, 0), (0, 0, 1)]
    if connectivity == 26:
        # one representative of each +/- pair: first nonzero component positive
        offs = []
        for d in itertools.product((-1, 0, 1), repeat=3):
            nz = [c for c in d if c != 0]
            if nz and nz[0] > 0:
                offs.append(d)
        return offs
    raise ValueError(f"unsupported connectivity {connectivity!r}; use 6 or 26")


@dataclass(frozen=True)
class Neighborhood:
    dims: Tuple[int, int, int]
    connectivity: int
    edges: np.ndarray  # (E, 2) int64, i < j


def build_neighborhood(dims, connectivity=6) -> Neighborhood:
    """Enumerate the lattice edges of a voxel grid."""
    dims = _check_dims(dims)
    offsets = _half_offsets(connectivity)
    idx = np.arange(n_voxels(dims)).reshape(dims, order="F")
    chunks = []
    for off in offsets:
        src = idx[tuple(slice(max(0, -d), n - max(0, d)) for d, n in zip(off, dims))]
        dst = idx[tuple(slice(max(0, d), n - max(0, -d)) for d, n in zip(off, dims))]
        if src.size:
            chunks.append(np.stack([src.ravel(order="F"), dst.ravel(order="F")], axis=1))
    if chunks:
        edges = np.concatenate(chunks, axis=0)
    else:
        edges = np.zeros((0, 2), dtype=np.int64)
    edges = np.sort(edges, axis=1).astype(np.int64)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges = np.ascontiguousarray(edges[order])
    edges.setflags(write=False)
    return Neighborhood(dims, connectivity, edges)


@dataclass(frozen=True)
class LaplacianSpec:
    beta_kernel: float = 10.0
    feature: str = "intensity"
    connectivity: int = 6
    epsilon_w: float = 1e-6
    kernel: str = "gaussian"

    def __post_init__(self):
        if self.kernel != "gaussian":
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.feature not in FEATURES:
            raise ValueError(f"unknown feature {self.feature!r}")
        if not self.beta_kernel > 0:
            raise ValueError("beta_kernel must be positive")
        if not self.epsilon_w > 0:
            raise ValueError("epsilon_w must be positive")
        _half_offsets(self.connectivity)

    def to_dict(self):
        return {"kernel": self.kernel, "beta_kernel": float(self.beta_kernel),
                "feature": self.feature, "connectivity": int(self.connectivity),
                "epsilon_w": float(self.epsilon_w)}

    @classmethod
    def from_dict(cls, d):
        return cls(beta_kernel=float(d["beta_kernel"]), feature=d.get("feature", "intensity"),
                   connectivity=int(d.get("connectivity", 6)),
                   epsilon_w=float(d.get("epsilon_w", 1e-6)), kernel=d.get("kernel", "gaussian"))


def default_family():
    """Four Laplacians: {intensity, gradient magnitude} x {beta 10, 100}, 6-connected."""
    return [LaplacianSpec(beta_kernel=b, feature=f)
            for f in FEATURES for b in (10.0, 100.0)]


@dataclass(frozen=True)
class Laplacian:
    """One diagonal block of the label-replicated Laplacian."""

    n: int
    matrix: sp.csr_matrix
    edges: np.ndarray
    weights: np.ndarray
    spec: LaplacianSpec = None


def _normalize01(f):
    lo, hi = float(f.min()), float(f.max())
    if hi - lo <= 0:
        return np.zeros_like(f)
    return (f - lo) / (hi - lo)


def voxel_feature(x: Volume, feature: str) -> np.ndarray:
    """Per-voxel feature used by the kernel, rescaled to [0, 1]."""
    if feature == "intensity":
        f = x.data.copy()
    elif feature == "gradient-magnitude":
        g = x.grid
        sq = np.zeros(g.shape)
        for ax in range(3):
            if g.shape[ax] > 1:
                sq += np.gradient(g, axis=ax) ** 2
        f = np.ravel(np.sqrt(sq), order="F")
    else:
        raise ValueError(f"unknown feature {feature!r}")
    return _normalize01(f)


def laplacian_from_edges(n, edges, weights, spec=None) -> Laplacian:
    i, j = edges[:, 0], edges[:, 1]
    off = sp.coo_matrix((-weights, (i, j)), shape=(n, n))
    deg = np.bincount(i, weights, minlength=n) + np.bincount(j, weights, minlength=n)
    L = (off + off.T + sp.diags(deg)).tocsr()
    L.sort_indices()
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    weights.setflags(write=False)
    return Laplacian(n, L, edges, weights, spec)


def build_laplacian(x: Volume, spec: LaplacianSpec) -> Laplacian:
    """Combinatorial Laplacian with weights ``max(exp(-beta (f_i - f_j)^2), eps)``."""
    nb = build_neighborhood(x.dims, spec.connectivity)
    f = voxel_feature(x, spec.feature)
    d = f[nb.edges[:, 0]] - f[nb.edges[:, 1]]
    w = np.maximum(np.exp(-spec.beta_kernel * d * d), spec.epsilon_w)
    return laplacian_from_edges(x.n, nb.edges, w, spec)


def laplacian_quadform(L: Laplacian, y: SoftSeg) -> float:
    """sum over labels of y_s^T L y_s, evaluated edge-wise (never negative)."""
    if L.n != y.n:
        raise DimensionMismatch(f"Laplacian has {L.n} nodes, segmentation has {y.n} voxels")
    return _accel.edge_quadform(L.edges, L.weights, y.probs)
