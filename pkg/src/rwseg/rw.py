"""Unconstrained random-walk inference: one SPD solve per label."""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sl
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, reverse_cuthill_mckee
from scipy.sparse.linalg import cg, splu

from .core import NonConvergence, Params, SingularSystem, SoftSeg
from .energy import SampleModel, system_matrix, system_rhs

_pbtrf = sl.lapack.dpbtrf
_pbtrs = sl.lapack.dpbtrs

DIRECT_MAX_N = 10_000
# banded Cholesky is used when the reordered half-bandwidth is at most this
BAND_MAX = 256


@dataclass(frozen=True)
class SolverOpts:
    tol: float = 1e-8
    max_iter: Optional[int] = None  # None -> 10 * n
    method: str = "conjugate-gradient"

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.method not in ("conjugate-gradient", "cg", "direct"):
            raise ValueError(f"unknown solver method {self.method!r}")


def check_definite(m: SampleModel, w: Params):
    """Cheap sufficient check that the system matrix is positive definite.

    Every connected component of the weighted graph must touch a voxel with
    positive total prior weight; otherwise the Laplacian's constant vector on
    that component is in the null space.
    """
    m.check_params(w)
    if not np.any(w.beta > 0):
        raise SingularSystem("all prior weights are zero; the Laplacian alone is singular")
    anchor = w.beta @ m.operators().omega
    ncomp, comp = _components(m, tuple(bool(a > 0) for a in w.alpha))
    touched = np.bincount(comp, weights=(anchor > 0).astype(float), minlength=ncomp)
    if np.any(touched == 0):
        bad = int(np.argmin(touched))
        raise SingularSystem(
            f"connected component {bad} ({np.count_nonzero(comp == bad)} voxels) has no prior weight")


def _components(m: SampleModel, active):
    key = ("components", active)
    hit = m._cache.get(key)
    if hit is None:
        pattern = sp.csr_matrix((m.n, m.n))
        for on, L in zip(active, m.laplacians):
            if on:
                pattern = pattern + L.matrix
        hit = connected_components(pattern, directed=False)
        m._cache[key] = hit
    return hit


class BandPlan:
    """Reverse Cuthill-McKee ordering of a sparsity pattern, for banded Cholesky.

    Matrices sharing the planned CSR pattern are scattered straight into
    LAPACK upper band storage; others go through a COO conversion.
    """

    def __init__(self, A):
        A = sp.csr_matrix(A)
        A.sort_indices()
        n = A.shape[0]
        perm = reverse_cuthill_mckee(A, symmetric_mode=True).astype(np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(n)
        self.perm, self.inv = perm, inv
        rows = np.repeat(np.arange(n), np.diff(A.indptr))
        r, k = inv[rows], inv[A.indices]
        self.bw = int(np.max(np.abs(r - k), initial=0))
        self.indptr, self.indices = A.indptr.copy(), A.indices.copy()
        self.upper = np.flatnonzero(r <= k)
        self.flat = (self.bw + r[self.upper] - k[self.upper]) * n + k[self.upper]

    def band(self, A):
        n = A.shape[0]
        ab = np.zeros((self.bw + 1, n))
        if (isinstance(A, sp.csr_matrix) and A.nnz == self.indices.size and A.has_sorted_indices
                and np.array_equal(A.indices, self.indices) and np.array_equal(A.indptr, self.indptr)):
            ab.ravel()[self.flat] = A.data[self.upper]
            return ab
        c = sp.coo_matrix(A)
        r, k = self.inv[c.row], self.inv[c.col]
        up = r <= k
        if np.any(k[up] - r[up] > self.bw):
            raise ValueError("matrix does not fit the planned band")
        np.add.at(ab, (self.bw + r[up] - k[up], k[up]), c.data[up])
        return ab


class _BandedCholesky:
    def __init__(self, A, plan: BandPlan):
        self.perm = plan.perm
        self.cb, info = _pbtrf(plan.band(A), lower=0)
        if info != 0:
            raise SingularSystem(f"banded Cholesky failed (info={info}); matrix is not positive definite")

    def solve(self, B):
        X = np.empty_like(B)
        X[self.perm], _ = _pbtrs(self.cb, np.asfortranarray(B[self.perm]), lower=0)
        return X


def model_order(m: SampleModel) -> BandPlan:
    """Band plan for the model's shared sparsity pattern (cached)."""
    hit = m._cache.get("band_plan")
    if hit is None:
        hit = BandPlan(m.operators().pattern)
        m._cache["band_plan"] = hit
    return hit


def spd_factor(A, order=None):
    """Factor an SPD matrix; returns an object whose ``solve`` maps (n, k) -> (n, k).

    With a :class:`BandPlan` ``order`` of small bandwidth a banded Cholesky
    is used; otherwise a sparse LU with symmetric ordering and no pivoting.
    """
    if order is not None and order.bw <= BAND_MAX:
        return _BandedCholesky(A, order)
    return splu(sp.csc_matrix(A), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                options={"SymmetricMode": True})


def solve_system(A, B, opts: SolverOpts, order=None):
    """Solve A X[s] = B[s] for every label row of ``B``; returns (X, iterations)."""
    n = A.shape[0]
    if opts.method == "direct":
        if n > DIRECT_MAX_N:
            raise ValueError(f"direct factorisation is limited to n <= {DIRECT_MAX_N}")
        lu = spd_factor(A, order)
        return lu.solve(np.ascontiguousarray(B.T)).T.copy(), 0
    max_iter = opts.max_iter if opts.max_iter is not None else 10 * n
    dinv = 1.0 / A.diagonal()
    M = sp.diags(dinv)
    X = np.empty_like(B)
    iters = 0
    for s in range(B.shape[0]):
        count = [0]

        def _cb(_xk):
            count[0] += 1

        x0 = dinv * B[s]
        xs, info = cg(A, B[s], x0=x0, rtol=opts.tol, atol=0.0, maxiter=max_iter, M=M, callback=_cb)
        if info > 0:
            raise NonConvergence(f"CG did not reach tol {opts.tol:g} in {max_iter} iterations (label {s})")
        X[s] = xs
        iters = max(iters, count[0])
    return X, iters


def rw_solve_raw(m: SampleModel, w: Params, opts: Optional[SolverOpts] = None):
    """Unnormalised per-label solutions, before projection to the simplex."""
    opts = opts or SolverOpts()
    check_definite(m, w)
    A = system_matrix(m, w)
    B = system_rhs(m, w)
    order = model_order(m) if opts.method == "direct" else None
    X, _ = solve_system(A, B, opts, order)
    return X


def rw_infer(m: SampleModel, w: Params, opts: Optional[SolverOpts] = None) -> SoftSeg:
    """Minimise the RW energy without compatibility constraints.

    Parameters
    ----------
    m : SampleModel
        Laplacians and priors for one volume.
    w : Params
        Non-negative term weights.
    opts : SolverOpts, optional
        CG tolerance / iteration cap, or ``method="direct"`` for a sparse LU.

    Returns
    -------
    SoftSeg
        The minimiser, clamped and renormalised onto the simplex.

    Raises
    ------
    SingularSystem
        No prior weight anchors some connected component of the graph.
    NonConvergence
        CG hit its iteration cap.
    """
    X = rw_solve_raw(m, w, opts)
    return SoftSeg.normalized(m.x.dims, X)
