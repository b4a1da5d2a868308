"""Annotation-consistent inference.

Minimises the RW energy over soft segmentations that are compatible with a
hard labelling ``z``: every voxel's distribution lies on the simplex and puts
at least as much mass on its annotated label as on any other.

The solver is a two-copy consensus splitting. Copy one carries the smooth
quadratic and is updated by a sparse linear solve; copy two carries the
compatibility constraints and is updated by an exact per-voxel projection.
Scaled multipliers are updated until both copies agree.
"""

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import _accel
from .core import SIMPLEX_TOL, DimensionMismatch, HardSeg, NonConvergenceWarning, Params, SoftSeg
from .energy import SampleModel, prior_constant, system_matrix, system_rhs
from .rw import SolverOpts, check_definite, model_order, rw_solve_raw, spd_factor

ORACLE_MAX_VOXELS = 4096


@dataclass(frozen=True)
class AciOpts:
    max_outer: int = 500
    rho: float = 1.0
    tol_primal: float = 1e-6
    tol_obj: float = 1e-8

    def __post_init__(self):
        if self.max_outer < 1 or not (self.rho > 0 and self.tol_primal > 0 and self.tol_obj > 0):
            raise ValueError("ACI options must all be positive")


@dataclass(frozen=True)
class AciInfo:
    iterations: int
    converged: bool
    primal_residual: float
    dual_residual: float
    objective: float


def project_compatible_simplex(v, s_star: int) -> np.ndarray:
    """Closest point to ``v`` on the simplex with coordinate ``s_star`` maximal.

    >>> project_compatible_simplex([0.2, 0.8], 0)
    array([0.5, 0.5])
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size < 2 or not 0 <= s_star < v.size:
        raise ValueError("need K >= 2 and 0 <= s_star < K")
    return _accel.project_compatible_rows(v[None, :], np.array([s_star]))[0]


def project_compatible(Y, z: HardSeg) -> np.ndarray:
    """Voxel-wise compatible projection of a label-major ``(K, n)`` array."""
    return _accel.project_compatible_rows(np.asarray(Y).T, z.labels).T


def is_compatible(y: SoftSeg, z: HardSeg, tol: float = 1e-6, strict: bool = False) -> bool:
    """Check y >= 0, per-voxel sums of 1 and dominance of the annotated label."""
    P = y.probs
    idx = np.arange(y.n)
    own = P[z.labels, idx]
    if np.any(P < -tol) or np.any(np.abs(P.sum(axis=0) - 1.0) > tol):
        return False
    others = P.copy()
    others[z.labels, idx] = -np.inf
    gap = own - others.max(axis=0)
    return bool(np.all(gap > tol)) if strict else bool(np.all(gap >= -tol))


def _quad_parts(m, w):
    A = system_matrix(m, w)
    B = system_rhs(m, w)
    c = prior_constant(m, w)
    return A, B, c


def _objective(A, B, c, Y):
    return float(np.sum(Y * (A @ Y.T).T) - 2.0 * np.sum(B * Y) + c)


def aci_infer(m: SampleModel, w: Params, z: HardSeg, opts: Optional[AciOpts] = None,
              solver: Optional[SolverOpts] = None, return_info: bool = False):
    """Minimise the RW energy subject to compatibility with ``z``.

    Starts from the unconstrained RW solution and returns it unchanged when
    it is already strictly compatible. Otherwise runs the consensus loop; the
    returned iterate is always the projected (feasible) copy. If the iteration
    cap is hit before agreement a :class:`NonConvergenceWarning` is issued.

    The coupling strength is ``opts.rho`` times the mean diagonal of the
    energy Hessian, which makes the iterates invariant to rescaling ``w``.
    """
    opts = opts or AciOpts()
    if z.n != m.n or z.K != m.K:
        raise DimensionMismatch("hard segmentation does not match the sample model")
    check_definite(m, w)
    dims = m.x.dims

    X0 = rw_solve_raw(m, w, solver)
    y0 = SoftSeg.normalized(dims, X0)
    A, B, c = _quad_parts(m, w)
    if is_compatible(y0, z, tol=SIMPLEX_TOL, strict=True):
        info = AciInfo(0, True, 0.0, 0.0, _objective(A, B, c, y0.probs))
        return (y0, info) if return_info else y0

    rho = opts.rho * 2.0 * float(A.diagonal().mean())
    lu = spd_factor(m.operators().matrix(w, 2.0, rho), model_order(m))
    B2 = 2.0 * B

    U = project_compatible(X0, z)
    Lam = np.zeros_like(U)
    obj_prev = None
    r = s = np.inf
    converged = False
    it = 0
    for it in range(1, opts.max_outer + 1):
        rhs = B2 + rho * (U - Lam)
        Y = lu.solve(np.ascontiguousarray(rhs.T)).T
        U_prev = U
        U = project_compatible(Y + Lam, z)
        Lam = Lam + Y - U
        r = float(np.max(np.abs(Y - U)))
        s = float(np.max(np.abs(U - U_prev)))
        if r > opts.tol_primal or s > opts.tol_primal:
            obj_prev = None
            continue
        obj = _objective(A, B, c, U)
        if obj_prev is not None and abs(obj - obj_prev) <= opts.tol_obj * (1.0 + abs(obj)):
            converged = True
            break
        obj_prev = obj
    if not converged:
        warnings.warn(f"ACI stopped after {it} iterations with consensus residual {r:.3g}",
                      NonConvergenceWarning, stacklevel=2)
    y = SoftSeg.normalized(dims, U)
    info = AciInfo(it, converged, r, s, _objective(A, B, c, y.probs))
    return (y, info) if return_info else y


def aci_oracle(m: SampleModel, w: Params, z: HardSeg, tol: float = 1e-9, max_iter: int = 500_000) -> SoftSeg:
    """Slow reference solver: accelerated projected gradient with exact projection.

    Fixed step ``1 / L`` with ``L`` a Gershgorin bound on the gradient's
    Lipschitz constant; momentum is restarted whenever the objective rises.
    Runs until the gradient-mapping norm falls below ``tol``.
    """
    if m.n > ORACLE_MAX_VOXELS:
        raise ValueError(f"aci_oracle is limited to {ORACLE_MAX_VOXELS} voxels")
    check_definite(m, w)
    A, B, c = _quad_parts(m, w)
    Ad = A.toarray()
    lip = 2.0 * float(np.max(np.sum(np.abs(Ad), axis=1)))
    step = 1.0 / lip

    def grad(Y):
        return 2.0 * (Y @ Ad - B)

    def obj(Y):
        return float(np.sum(Y * (Y @ Ad)) - 2.0 * np.sum(B * Y) + c)

    X = project_compatible(np.linalg.solve(Ad, B.T).T, z)
    V = X.copy()
    t = 1.0
    f_prev = obj(X)
    for _ in range(max_iter):
        X_new = project_compatible(V - step * grad(V), z)
        f_new = obj(X_new)
        if f_new > f_prev:
            # restart momentum from the last iterate
            V = X
            t = 1.0
            X_new = project_compatible(V - step * grad(V), z)
            f_new = obj(X_new)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        V = X_new + ((t - 1.0) / t_new) * (X_new - X)
        X, t, f_prev = X_new, t_new, f_new
        gmap = lip * np.linalg.norm(X - project_compatible(X - step * grad(X), z))
        if gmap <= tol:
            break
    return SoftSeg.normalized(m.x.dims, X)
