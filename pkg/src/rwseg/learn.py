"""Parameter estimation: cutting-plane structured SVM, CCCP for latent SVM,
and the distance-transform softened baseline."""

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .aci import AciOpts, aci_infer
from .core import (HardSeg, NonConvergence, Params, RWSegError, SingularSystem, SoftSeg,
                   to_grid, from_grid)
from .energy import SampleModel, feature_vector, loss
from .rw import DIRECT_MAX_N, SolverOpts, check_definite, rw_infer

log = logging.getLogger(__name__)

METHODS = ("latent", "ssvm-dt", "none")
# ties within this of the maximum are counted for the annotated label
TRUTH_TIE_TOL = 1e-9


class QpFailureWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Sample:
    model: SampleModel
    z: HardSeg
    name: str = ""


@dataclass
class TrainConfig:
    lam: float = 1e-3
    lam_prime: float = 1.0
    w0: Optional[Params] = None
    epsilon: float = 1e-4
    cut_epsilon: float = 1e-4
    max_cccp_iter: int = 20
    max_cuts: int = 200
    tau: float = 2.0
    qp_tol: float = 1e-8

    def __post_init__(self):
        if self.lam < 0 or self.lam_prime < 0 or not self.lam + self.lam_prime > 0:
            raise ValueError("need lambda, lambda' >= 0 with lambda + lambda' > 0")
        if not (self.epsilon > 0 and self.cut_epsilon > 0 and self.tau > 0):
            raise ValueError("tolerances and tau must be positive")
        if self.max_cccp_iter < 1 or self.max_cuts < 1:
            raise ValueError("iteration caps must be at least 1")


def default_w0(n_alpha: int, n_beta: int) -> Params:
    return Params.uniform(n_alpha, n_beta)


# ---------------------------------------------------------------------------
# baseline softening
# ---------------------------------------------------------------------------

def soften_distance_transform(z: HardSeg, tau: float = 2.0) -> SoftSeg:
    """Pseudo-soft segmentation with y(i,s) proportional to exp(-d_s(i)^2 / (2 tau^2)).

    ``d_s(i)`` is the Euclidean distance in voxels from ``i`` to the nearest
    voxel labelled ``s``; labels absent from ``z`` get probability zero.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    grid = to_grid(z.labels, z.dims)
    logits = np.full((z.K, z.n), -np.inf)
    for s in range(z.K):
        here = grid == s
        if not here.any():
            continue
        d = ndimage.distance_transform_edt(~here)
        logits[s] = -from_grid(d) ** 2 / (2.0 * tau * tau)
    logits -= logits.max(axis=0, keepdims=True)
    p = np.exp(logits)
    return SoftSeg(z.dims, p / p.sum(axis=0, keepdims=True))


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------

def inference_params(m: SampleModel, w: Params) -> Params:
    """Weights actually used for prediction.

    The learner may drive every prior weight to zero, where the RW system is
    singular; the prediction is then taken with a vanishing prior floor.
    """
    try:
        check_definite(m, w)
        return w
    except SingularSystem:
        floor = 1e-9 * max(float(np.max(w.vector)), 1e-12)
        return Params(w.alpha, np.maximum(w.beta, floor))


def training_solver(m: SampleModel, solver: Optional[SolverOpts] = None) -> SolverOpts:
    """Solver used inside training loops: sparse LU when the volume is small enough."""
    if solver is not None:
        return solver
    return SolverOpts(method="direct") if m.n <= DIRECT_MAX_N else SolverOpts()


def predict(m: SampleModel, w: Params, solver: Optional[SolverOpts] = None) -> SoftSeg:
    return rw_infer(m, inference_params(m, w), training_solver(m, solver))


def most_violated(m: SampleModel, w: Params, solver: Optional[SolverOpts] = None):
    """Approximate most violated constraint: the plain RW prediction.

    Returns ``(y, psi, None)``; the loss slot is filled by the caller, who
    knows the annotation.
    """
    y = predict(m, w, solver)
    return y, feature_vector(m, y), None


# ---------------------------------------------------------------------------
# inner QP
# ---------------------------------------------------------------------------

@dataclass
class QpResult:
    w: np.ndarray
    xi: np.ndarray
    primal: float
    gap: float
    iterations: int
    ok: bool


_QP_OPTIONS = {"show_progress": False, "abstol": 1e-11, "reltol": 1e-10,
               "feastol": 1e-10, "maxiters": 200}


def qp_objective(w, psi_star, cut_psi, cut_delta, cut_mask, lam, lam_prime, w0):
    marg = cut_delta - np.einsum("ncd,d->nc", cut_psi - psi_star[:, None, :], w)
    marg = np.where(cut_mask, marg, -np.inf)
    xi = np.maximum(marg.max(axis=1, initial=0.0), 0.0)
    obj = lam * float(w @ w) + lam_prime * float((w - w0) @ (w - w0)) + float(xi.mean())
    return obj, xi


def solve_cut_qp(psi_star, cut_psi, cut_delta, cut_mask, lam, lam_prime, w0,
                 tol=1e-8) -> QpResult:
    """Solve the n-slack QP over a fixed working set of cuts.

    min_{w >= 0, xi >= 0}  lam |w|^2 + lam' |w - w0|^2 + (1/N) sum_k xi_k
    s.t. xi_k >= D_kc + w . (psi_star_k - psi_bar_kc)  for every cut c of sample k

    The epigraph form is handed to cvxopt's interior-point QP solver.

    Parameters
    ----------
    psi_star : (N, d) array
    cut_psi : (N, C, d) array, padded
    cut_delta : (N, C) array, padded
    cut_mask : (N, C) bool array, True for real cuts
    """
    from cvxopt import matrix, solvers

    N, C, d = cut_psi.shape
    mu = lam + lam_prime
    if not cut_mask.any():
        w = lam_prime * w0 / mu
        obj, xi = qp_objective(w, psi_star, cut_psi, cut_delta, cut_mask, lam, lam_prime, w0)
        return QpResult(w, xi, obj, 0.0, 0, True)
    nv = d + N
    H = np.zeros((nv, nv))
    H[:d, :d] = 2.0 * mu * np.eye(d)
    q = np.concatenate([-2.0 * lam_prime * w0, np.full(N, 1.0 / N)])
    k_idx, c_idx = np.nonzero(cut_mask)
    rows = np.zeros((k_idx.size, nv))
    rows[:, :d] = psi_star[k_idx] - cut_psi[k_idx, c_idx]
    rows[np.arange(k_idx.size), d + k_idx] = -1.0
    Gm = np.vstack([rows, -np.eye(nv)])
    h = np.concatenate([-cut_delta[k_idx, c_idx], np.zeros(nv)])
    old = dict(solvers.options)
    solvers.options.update(_QP_OPTIONS)
    try:
        sol = solvers.qp(matrix(H), matrix(q), matrix(Gm), matrix(h))
    finally:
        solvers.options.clear()
        solvers.options.update(old)
    z = np.array(sol["x"]).ravel()
    w = np.maximum(z[:d], 0.0)
    obj, xi = qp_objective(w, psi_star, cut_psi, cut_delta, cut_mask, lam, lam_prime, w0)
    gap = float(sol["gap"]) if sol["gap"] is not None else np.inf
    ok = sol["status"] == "optimal" or gap <= tol * (1.0 + abs(obj))
    return QpResult(w, xi, obj, gap, int(sol["iterations"]), ok)


# ---------------------------------------------------------------------------
# cutting plane update
# ---------------------------------------------------------------------------

@dataclass
class CutSet:
    psi: List[List[np.ndarray]]
    delta: List[List[float]]

    @classmethod
    def empty(cls, N):
        return cls([[] for _ in range(N)], [[] for _ in range(N)])

    def add(self, k, psi, delta):
        self.psi[k].append(np.asarray(psi, dtype=np.float64))
        self.delta[k].append(float(delta))

    def copy(self):
        return CutSet([list(c) for c in self.psi], [list(c) for c in self.delta])

    def n_cuts(self):
        return sum(len(c) for c in self.delta)

    def padded(self, d):
        N = len(self.psi)
        C = max((len(c) for c in self.psi), default=0)
        P = np.zeros((N, C, d))
        D = np.zeros((N, C))
        M = np.zeros((N, C), dtype=bool)
        for k in range(N):
            for c, (p, dl) in enumerate(zip(self.psi[k], self.delta[k])):
                P[k, c] = p
                D[k, c] = dl
                M[k, c] = True
        return P, D, M


def slacks(w: np.ndarray, psi_star: np.ndarray, cuts: CutSet) -> np.ndarray:
    xi = np.zeros(len(cuts.psi))
    for k in range(len(cuts.psi)):
        for p, dl in zip(cuts.psi[k], cuts.delta[k]):
            xi[k] = max(xi[k], dl + float(w @ (psi_star[k] - p)))
    return xi


@dataclass
class UpdateResult:
    w: Params
    cuts: CutSet
    objective: float
    rounds: int
    converged: bool
    qp_ok: bool


def ssvm_update(samples: Sequence[Sample], ystar: Sequence[SoftSeg], cfg: TrainConfig,
                solver: Optional[SolverOpts] = None, cuts: Optional[CutSet] = None) -> UpdateResult:
    """Cutting-plane solution of the structured SVM step for fixed ``ystar``.

    Starts from the working set ``cuts`` (empty by default; a copy is taken).
    Each round adds, per sample, the RW prediction at the current weights as
    a cut if it violates the current slack by more than ``cfg.cut_epsilon``,
    then re-solves the QP. A cut is the feature vector and loss of a
    competing segmentation, so it stays valid when ``ystar`` changes.
    """
    N = len(samples)
    if N == 0 or len(ystar) != N:
        raise ValueError("need one imputed segmentation per sample")
    w0 = _w0_for(samples[0].model, cfg)
    n_alpha = w0.alpha.size
    d = len(w0)
    psi_star = np.stack([feature_vector(s.model, y).vector for s, y in zip(samples, ystar)])
    cuts = CutSet.empty(N) if cuts is None else cuts.copy()
    res = solve_cut_qp(psi_star, *cuts.padded(d), cfg.lam, cfg.lam_prime, w0.vector, tol=cfg.qp_tol)
    w = res.w
    qp_ok = True
    converged = False
    rounds = 0
    for rounds in range(1, cfg.max_cuts + 1):
        wp = _as_params(w, n_alpha, w0)
        xi = slacks(w, psi_star, cuts)
        added = 0
        for k, s in enumerate(samples):
            ybar, psi_bar, _ = most_violated(s.model, wp, solver)
            delta = loss(s.z, ybar)
            viol = delta + float(w @ (psi_star[k] - psi_bar.vector)) - xi[k]
            if viol > cfg.cut_epsilon:
                cuts.add(k, psi_bar.vector, delta)
                added += 1
        if added == 0:
            converged = True
            break
        res = solve_cut_qp(psi_star, *cuts.padded(d), cfg.lam, cfg.lam_prime, w0.vector,
                           tol=cfg.qp_tol)
        if not res.ok:
            qp_ok = False
            warnings.warn(f"inner QP stalled with duality gap {res.gap:.3g}", QpFailureWarning,
                          stacklevel=2)
        w = res.w
    return UpdateResult(_as_params(w, n_alpha, w0), cuts, res.primal, rounds, converged, qp_ok)


def _as_params(w, n_alpha, fallback):
    w = np.maximum(np.asarray(w, dtype=np.float64), 0.0)
    if not np.any(w > 0):
        # the all-zero weight vector carries no direction; keep w0's
        return fallback.scaled(1e-12)
    return Params.from_vector(w, n_alpha)


def _w0_for(m: SampleModel, cfg: TrainConfig) -> Params:
    w0 = cfg.w0 if cfg.w0 is not None else default_w0(m.n_alpha, m.n_beta)
    m.check_params(w0)
    return w0


# ---------------------------------------------------------------------------
# evaluation and CCCP
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    per_sample: List[float]
    mean: float
    excluded: int
    names: List[str] = field(default_factory=list)


def evaluate(samples: Sequence[Sample], w: Params, solver: Optional[SolverOpts] = None) -> EvalResult:
    """Mean hard loss of the RW prediction at ``w`` (failed samples excluded)."""
    vals, names, excluded = [], [], 0
    for s in samples:
        try:
            vals.append(loss(s.z, predict(s.model, w, solver)))
            names.append(s.name)
        except (SingularSystem, NonConvergence) as exc:
            log.warning("sample %s excluded from evaluation: %s", s.name, exc)
            excluded += 1
    mean = float(np.mean(vals)) if vals else float("nan")
    return EvalResult(vals, mean, excluded, names)


def latent_objective(samples, ystar, w: Params, cfg: TrainConfig, solver=None,
                     pool: Optional[CutSet] = None):
    """Regularised risk bound at ``w`` for imputed ``ystar``.

    The max over competing segmentations is approximated by the RW
    prediction at ``w`` together with every segmentation in ``pool`` (the
    cuts collected so far). Returns (objective, slacks).
    """
    w0 = _w0_for(samples[0].model, cfg).vector
    wv = w.vector
    xi = []
    for k, (s, y) in enumerate(zip(samples, ystar)):
        ybar, psi_bar, _ = most_violated(s.model, w, solver)
        psi_s = feature_vector(s.model, y).vector
        v = loss(s.z, ybar) + float(wv @ (psi_s - psi_bar.vector))
        if pool is not None:
            for p, dl in zip(pool.psi[k], pool.delta[k]):
                v = max(v, dl + float(wv @ (psi_s - p)))
        xi.append(max(0.0, v))
    xi = np.array(xi)
    reg = cfg.lam * float(wv @ wv) + cfg.lam_prime * float((wv - w0) @ (wv - w0))
    return reg + float(xi.mean()), xi


@dataclass
class IterRecord:
    iteration: int
    objective: float
    slacks: List[float]
    train_loss: float
    test_loss: float
    weights: dict
    # objective of this iterate re-evaluated with the candidate pool of the
    # next one; consecutive iterates are compared on this common footing
    rescored: Optional[float]
    cut_rounds: int
    n_cuts: int
    aci_failures: int


@dataclass
class TrainReport:
    method: str
    iterations: List[IterRecord]
    final_w: Params
    converged: bool
    wall_seconds: float
    config: dict

    def objectives(self):
        return [r.objective for r in self.iterations]

    def decreases(self):
        """``rescored[t] - objective[t + 1]`` for each completed update."""
        its = self.iterations
        return [a.rescored - b.objective for a, b in zip(its, its[1:])]

    def to_csv(self) -> str:
        """One row per CCCP iteration."""
        head = "iteration,objective,rescored,train_loss,test_loss,cut_rounds,n_cuts,aci_failures\n"
        rows = []
        for r in self.iterations:
            resc = "" if r.rescored is None else f"{r.rescored:.10g}"
            rows.append(f"{r.iteration},{r.objective:.10g},{resc},{r.train_loss:.10g},"
                        f"{r.test_loss:.10g},{r.cut_rounds},{r.n_cuts},{r.aci_failures}\n")
        return head + "".join(rows)

    def to_dict(self, timing=True):
        return {
            "method": self.method,
            "converged": self.converged,
            "wall_seconds": self.wall_seconds if timing else None,
            "config": self.config,
            "final_w": self.final_w.to_dict(),
            "iterations": [r.__dict__ for r in self.iterations],
        }


def _impute(samples, w, cfg, method, aci_opts, solver):
    if method == "ssvm-dt":
        return [soften_distance_transform(s.z, cfg.tau) for s in samples], 0
    ystar, failures = [], 0
    for k, s in enumerate(samples):
        try:
            ystar.append(aci_infer(s.model, inference_params(s.model, w), s.z, aci_opts,
                                   training_solver(s.model, solver)))
        except (SingularSystem, NonConvergence) as exc:
            log.warning("ACI failed on sample %d (%s): %s; using the annotation", k, s.name, exc)
            failures += 1
            ystar.append(s.z.one_hot())
    if failures * 2 > len(samples):
        raise RWSegError(f"ACI failed on {failures} of {len(samples)} training samples")
    return ystar, failures


def cccp_train(samples: Sequence[Sample], cfg: TrainConfig, method: str = "latent",
               test: Sequence[Sample] = (), aci_opts: Optional[AciOpts] = None,
               solver: Optional[SolverOpts] = None):
    """Estimate RW weights from hard segmentations.

    ``method="latent"`` alternates annotation-consistent imputation with
    structured SVM updates until the regularised objective stops decreasing
    by at least ``cfg.epsilon``. ``method="ssvm-dt"`` imputes once with
    distance-transform softening and performs a single update (the imputation
    never changes, so further iterations would repeat it). ``method="none"``
    only evaluates ``w0``.

    The regularised objective approximates the max over competing
    segmentations with a growing pool of cuts, so before two iterates are
    compared the earlier one is re-scored with the later pool.

    Returns ``(w, TrainReport)``; ``w`` is the last iterate, or the one before
    it when the final update failed to decrease the objective.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if not samples:
        raise ValueError("empty training set")
    t0 = time.perf_counter()
    w = _w0_for(samples[0].model, cfg)
    records: List[IterRecord] = []
    converged = False
    max_iter = 1 if method == "none" else (2 if method == "ssvm-dt" else cfg.max_cccp_iter + 1)
    upd = None
    pool = CutSet.empty(len(samples))
    prev = None  # (w, ystar) of the previous iterate
    for t in range(max_iter):
        ystar, failures = _impute(samples, w, cfg, method, aci_opts, solver)
        obj, xi = latent_objective(samples, ystar, w, cfg, solver, pool)
        if prev is not None:
            records[-1].rescored = latent_objective(samples, prev[1], prev[0], cfg, solver, pool)[0]
        rec = IterRecord(
            iteration=t, objective=obj, slacks=[float(v) for v in xi],
            train_loss=evaluate(samples, w, solver).mean,
            test_loss=evaluate(test, w, solver).mean if test else float("nan"),
            weights=w.to_dict(), rescored=None,
            cut_rounds=upd.rounds if upd else 0,
            n_cuts=upd.cuts.n_cuts() if upd else 0,
            aci_failures=failures)
        records.append(rec)
        log.info("%s iter %d: objective %.6g train loss %.4f", method, t, obj, rec.train_loss)
        if prev is not None and records[-2].rescored - obj < cfg.epsilon:
            converged = True
            if obj > records[-2].rescored:
                w = prev[0]
            break
        if t == max_iter - 1:
            converged = method != "latent"
            break
        upd = ssvm_update(samples, ystar, cfg, solver, cuts=pool)
        pool = upd.cuts
        prev = (w, ystar)
        w = upd.w
    report = TrainReport(method, records, w, converged, time.perf_counter() - t0,
                         _config_dict(cfg))
    return w, report


def _config_dict(cfg: TrainConfig):
    d = {k: v for k, v in cfg.__dict__.items() if k != "w0"}
    d["w0"] = cfg.w0.to_dict() if cfg.w0 is not None else None
    return d
