"""Canonical convex programs (LP / QP / SOCP) and a certified solver front end.

A :class:`ConicProgram` collects linear, convex-quadratic and rotated-cone
constraints on one vector of variables. :func:`solve` canonicalises it to
``A x + s = b, s in K`` with K a product of zero, nonnegative and
second-order cones and runs the Clarabel interior-point method on it. Every
returned point is re-checked by :func:`kkt_residuals`, which works on our own
canonical form, before it is reported as optimal.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.sparse as sp

import clarabel

SQRT2 = np.sqrt(2.0)


class Status(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITER = "MaxIter"
    NUM_ERROR = "NumError"


class SolverError(RuntimeError):
    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


def _as_rows(E, n: int) -> sp.csr_matrix:
    E = sp.csr_matrix(E, dtype=float)
    if E.shape[1] != n:
        raise ValueError(f"expression has {E.shape[1]} columns, program has {n} variables")
    return E


@dataclass
class QuadConstraint:
    """``||F x||^2 + c^T x + d <= 0``; the quadratic form is F^T F, PSD by construction."""

    F: sp.csr_matrix
    c: np.ndarray
    d: float


@dataclass
class RotatedCones:
    """A batch of K rotated cones ``2 x_i y_i >= ||z_i||^2, x_i, y_i >= 0``.

    ``x_i = X[i] @ v + x0[i]``, ``y_i`` likewise, and ``z_i`` is rows
    ``i*dim .. (i+1)*dim`` of ``Z @ v + z0``.
    """

    X: sp.csr_matrix
    x0: np.ndarray
    Y: sp.csr_matrix
    y0: np.ndarray
    Z: sp.csr_matrix
    z0: np.ndarray
    dim: int

    @property
    def count(self) -> int:
        return self.X.shape[0]


@dataclass
class ConicProgram:
    """minimise ``c^T x + 0.5 x^T P x + c0`` over the stored constraints."""

    n_vars: int
    c: np.ndarray = None
    P: Optional[sp.csc_matrix] = None
    c0: float = 0.0
    lb: np.ndarray = None
    ub: np.ndarray = None
    eq: List[tuple] = field(default_factory=list)
    le: List[tuple] = field(default_factory=list)
    quad_cons: List[QuadConstraint] = field(default_factory=list)
    rsoc_cons: List[RotatedCones] = field(default_factory=list)

    def __post_init__(self):
        n = self.n_vars
        self.c = np.zeros(n) if self.c is None else np.asarray(self.c, float)
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, float)
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, float)

    # -- builders -----------------------------------------------------------------
    def add_linear(self, A, b, sense: str = "<="):
        A = _as_rows(A, self.n_vars)
        b = np.broadcast_to(np.asarray(b, float), (A.shape[0],)).copy()
        if sense == "<=":
            self.le.append((A, b))
        elif sense == ">=":
            self.le.append((-A, -b))
        elif sense == "==":
            self.eq.append((A, b))
        else:
            raise ValueError(f"unknown sense {sense!r}")

    def add_quadratic(self, F, c, d: float):
        c = np.asarray(c, float)
        if c.shape != (self.n_vars,):
            raise ValueError("linear part has wrong length")
        self.quad_cons.append(QuadConstraint(_as_rows(F, self.n_vars), c, float(d)))

    def add_rotated_cones(self, X, x0, Y, y0, Z, z0, dim: int):
        X, Y, Z = (_as_rows(E, self.n_vars) for E in (X, Y, Z))
        K = X.shape[0]
        if Y.shape[0] != K or Z.shape[0] != K * dim:
            raise ValueError("inconsistent rotated-cone block sizes")
        vec = lambda v, k: np.broadcast_to(np.asarray(v, float), (k,)).copy()
        self.rsoc_cons.append(RotatedCones(X, vec(x0, K), Y, vec(y0, K), Z, vec(z0, K * dim), dim))

    # -- queries ----------------------------------------------------------------------
    def objective(self, x) -> float:
        x = np.asarray(x, float)
        val = self.c @ x + self.c0
        if self.P is not None:
            val += 0.5 * x @ (self.P @ x)
        return float(val)

    def counts(self) -> dict:
        return {
            "variables": self.n_vars,
            "linear": sum(A.shape[0] for A, _ in self.le + self.eq),
            "bounds": int(np.isfinite(self.lb).sum() + np.isfinite(self.ub).sum()),
            "quadratic": len(self.quad_cons),
            "rotated_cones": sum(r.count for r in self.rsoc_cons),
        }

    def max_violation(self, x) -> float:
        """Largest raw constraint violation, evaluated directly on the model."""
        x = np.asarray(x, float)
        worst = 0.0
        worst = max(worst, float(np.max(self.lb - x, initial=0.0)), float(np.max(x - self.ub, initial=0.0)))
        for A, b in self.le:
            worst = max(worst, float(np.max(A @ x - b, initial=0.0)))
        for A, b in self.eq:
            worst = max(worst, float(np.max(np.abs(A @ x - b), initial=0.0)))
        for q in self.quad_cons:
            Fx = q.F @ x
            worst = max(worst, float(Fx @ Fx + q.c @ x + q.d))
        for r in self.rsoc_cons:
            xs, ys = r.X @ x + r.x0, r.Y @ x + r.y0
            zs = (r.Z @ x + r.z0).reshape(r.count, r.dim)
            worst = max(worst, float(np.max(np.sum(zs ** 2, axis=1) - 2 * xs * ys, initial=0.0)),
                        float(np.max(-xs, initial=0.0)), float(np.max(-ys, initial=0.0)))
        return worst

    def dump(self) -> str:
        lines = [f"variables {self.n_vars}", "minimize " + " ".join(
            f"{v:+.6g}*x{i}" for i, v in enumerate(self.c) if v != 0)]
        if self.P is not None:
            lines.append(f"  + 0.5 x'Px  (nnz(P)={self.P.nnz})")
        for A, b in self.eq:
            for i in range(A.shape[0]):
                lines.append(_row_text(A.getrow(i)) + f" == {b[i]:.6g}")
        for A, b in self.le:
            for i in range(A.shape[0]):
                lines.append(_row_text(A.getrow(i)) + f" <= {b[i]:.6g}")
        for q in self.quad_cons:
            lines.append(f"||F x||^2 ({q.F.shape[0]} rows) + c'x + {q.d:.6g} <= 0")
        for r in self.rsoc_cons:
            lines.append(f"{r.count} rotated cones of dim {r.dim + 2}")
        for i, (lo, hi) in enumerate(zip(self.lb, self.ub)):
            if np.isfinite(lo) or np.isfinite(hi):
                lines.append(f"{lo:.6g} <= x{i} <= {hi:.6g}")
        return "\n".join(lines)


def _row_text(row) -> str:
    row = row.tocoo()
    return " ".join(f"{v:+.6g}*x{j}" for j, v in zip(row.col, row.data)) or "0"


# ---------------------------------------------------------------------------------------
# canonical form  A x + s = b,  s in K = {0}^z x R_+^l x SOC(d_1) x ...
@dataclass
class Canonical:
    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    n_zero: int
    n_nonneg: int
    soc_dims: List[int]


def canonicalize(prog: ConicProgram) -> Canonical:
    n = prog.n_vars
    blocks_A, blocks_b = [], []

    for A, b in prog.eq:
        blocks_A.append(A)
        blocks_b.append(b)
    n_zero = sum(A.shape[0] for A, _ in prog.eq)

    for A, b in prog.le:
        blocks_A.append(A)
        blocks_b.append(b)
    lo = np.flatnonzero(np.isfinite(prog.lb))
    hi = np.flatnonzero(np.isfinite(prog.ub))
    blocks_A.append(sp.csr_matrix((-np.ones(len(lo)), (np.arange(len(lo)), lo)), shape=(len(lo), n)))
    blocks_b.append(-prog.lb[lo])
    blocks_A.append(sp.csr_matrix((np.ones(len(hi)), (np.arange(len(hi)), hi)), shape=(len(hi), n)))
    blocks_b.append(prog.ub[hi])
    n_nonneg = sum(A.shape[0] for A, _ in prog.le) + len(lo) + len(hi)

    soc_dims: List[int] = []
    # s = E x + e0 must lie in the cone, i.e. A = -E, b = e0
    for qc in prog.quad_cons:
        k = qc.F.shape[0]
        X = sp.csr_matrix(-qc.c[None, :])
        E = sp.vstack([X, X, SQRT2 * qc.F], format="csr")
        e0 = np.concatenate([[-qc.d + 0.5, -qc.d - 0.5], np.zeros(k)])
        blocks_A.append(-E)
        blocks_b.append(e0)
        soc_dims.append(k + 2)
    for r in prog.rsoc_cons:
        K, d = r.count, r.dim
        # interleave per cone: [x+y, x-y, sqrt2 z_1..z_d]
        top = sp.vstack([r.X + r.Y, r.X - r.Y], format="csr")
        top0 = np.concatenate([r.x0 + r.y0, r.x0 - r.y0])
        stacked = sp.vstack([top, SQRT2 * r.Z], format="csr")
        stacked0 = np.concatenate([top0, SQRT2 * r.z0])
        order = np.empty(K * (d + 2), dtype=int)
        base = np.arange(K) * (d + 2)
        order[base] = np.arange(K)
        order[base + 1] = K + np.arange(K)
        for j in range(d):
            order[base + 2 + j] = 2 * K + np.arange(K) * d + j
        blocks_A.append(-stacked[order])
        blocks_b.append(stacked0[order])
        soc_dims.extend([d + 2] * K)

    A = sp.vstack(blocks_A, format="csc") if blocks_A else sp.csc_matrix((0, n))
    b = np.concatenate(blocks_b) if blocks_b else np.zeros(0)
    P = sp.csc_matrix((n, n)) if prog.P is None else sp.csc_matrix(sp.triu(prog.P))
    return Canonical(P, prog.c.copy(), A, b, n_zero, n_nonneg, soc_dims)


@dataclass
class KKTResiduals:
    stationarity: float
    primal: float
    dual: float
    complementarity: float
    gap: float

    def max(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity, self.gap)

    def within(self, tol: float) -> bool:
        return self.max() <= tol


def _cone_distance(s: np.ndarray, can: Canonical) -> float:
    z, l = can.n_zero, can.n_nonneg
    worst = float(np.max(np.abs(s[:z]), initial=0.0))
    worst = max(worst, float(np.max(-s[z:z + l], initial=0.0)))
    pos = z + l
    for d in can.soc_dims:
        t, w = s[pos], s[pos + 1:pos + d]
        nw = np.linalg.norm(w)
        if nw > t:
            # Euclidean distance to the second-order cone
            if nw <= -t:
                dist = np.hypot(t, nw)
            else:
                dist = (nw - t) / SQRT2
            worst = max(worst, float(dist))
        pos += d
    return worst


def _dual_cone_distance(y: np.ndarray, can: Canonical) -> float:
    z, l = can.n_zero, can.n_nonneg
    worst = float(np.max(-y[z:z + l], initial=0.0))
    pos = z + l
    for d in can.soc_dims:
        t, w = y[pos], y[pos + 1:pos + d]
        nw = np.linalg.norm(w)
        if nw > t:
            worst = max(worst, float(np.hypot(t, nw) if nw <= -t else (nw - t) / SQRT2))
        pos += d
    return worst


def kkt_residuals(prog, x, multipliers, canonical: Optional[Canonical] = None) -> KKTResiduals:
    """Relative KKT residuals of ``x`` with cone multipliers ``multipliers``.

    Residuals are scaled like the solver's own stopping tests: stationarity
    by ``1 + max(|q|, |Px|, |A^T y|)``, feasibility by ``1 + max(|b|, |Ax|)``,
    complementarity and gap by ``1 + min(|p*|, |d*|)``.
    """
    can = canonical if canonical is not None else canonicalize(prog)
    x = np.asarray(x, float)
    y = np.asarray(multipliers, float)
    Px = can.P @ x + can.P.T @ x - sp.diags(can.P.diagonal()) @ x
    Aty = can.A.T @ y
    Ax = can.A @ x
    s = can.b - Ax
    inf = lambda v: float(np.max(np.abs(v), initial=0.0))
    stat = inf(Px + can.q + Aty) / (1.0 + max(inf(can.q), inf(Px), inf(Aty)))
    feas_scale = 1.0 + max(inf(can.b), inf(Ax))
    primal = _cone_distance(s, can) / feas_scale
    dual = _dual_cone_distance(y, can) / (1.0 + inf(y))
    pobj = 0.5 * x @ Px + can.q @ x
    dobj = -0.5 * x @ Px - can.b @ y
    scale = 1.0 + min(abs(pobj), abs(dobj))
    comp = abs(float(s @ y)) / scale
    gap = abs(pobj - dobj) / scale
    return KKTResiduals(stat, primal, dual, comp, gap)


@dataclass
class ConicSolution:
    x: np.ndarray
    obj: float
    status: Status
    kkt: Optional[KKTResiduals]
    multipliers: Optional[np.ndarray] = None
    iterations: int = 0
    solve_time: float = 0.0
    raw_status: str = ""


_INFEASIBLE = {"PrimalInfeasible", "AlmostPrimalInfeasible"}
_MAXITER = {"MaxIterations", "MaxTime"}


def _run_clarabel(can: Canonical, cones, inner: float, max_iter: int, verbose: bool, **extra):
    settings = clarabel.DefaultSettings()
    settings.verbose = verbose
    settings.max_iter = max_iter
    settings.tol_gap_abs = inner
    settings.tol_gap_rel = inner
    settings.tol_feas = inner
    settings.presolve_enable = False
    for key, value in extra.items():
        setattr(settings, key, value)
    return clarabel.DefaultSolver(can.P, can.q, can.A, can.b, cones, settings).solve()


# retried in order until the independent KKT check passes; regularisation and
# refinement settings matter on badly scaled SCA subproblems
_REFINE = dict(iterative_refinement_reltol=1e-15, iterative_refinement_abstol=1e-15,
               iterative_refinement_max_iter=50)
_ATTEMPTS = (
    (1e-2, dict(static_regularization_enable=False, **_REFINE)),
    (1e-2, {}),
    (1e-3, dict(equilibrate_enable=False, static_regularization_enable=False, **_REFINE)),
    (1e-3, dict(max_step_fraction=0.9, **_REFINE)),
)


def solve(prog: ConicProgram, tol: float = 1e-7, max_iter: int = 200,
          verbose: bool = False) -> ConicSolution:
    """Solve ``prog``; ``Optimal`` is only reported when the KKT check passes at ``tol``.

    The interior-point tolerances are set below ``tol`` because the solver
    measures residuals on an equilibrated copy of the data; if the returned
    point still fails our check it is re-solved with the settings in ``_ATTEMPTS``.
    """
    can = canonicalize(prog)
    cones = []
    if can.n_zero:
        cones.append(clarabel.ZeroConeT(can.n_zero))
    if can.n_nonneg:
        cones.append(clarabel.NonnegativeConeT(can.n_nonneg))
    cones.extend(clarabel.SecondOrderConeT(d) for d in can.soc_dims)

    for factor, extra in _ATTEMPTS:
        res = _run_clarabel(can, cones, min(1e-8, tol * factor), max_iter, verbose, **extra)
        raw = str(res.status).split(".")[-1]
        x = np.asarray(res.x, float)
        y = np.asarray(res.z, float)
        if raw in _INFEASIBLE:
            return ConicSolution(x, np.inf, Status.INFEASIBLE, None, y, res.iterations,
                                 res.solve_time, raw)
        finite = bool(np.all(np.isfinite(x)) and np.all(np.isfinite(y)))
        kkt = kkt_residuals(prog, x, y, can) if finite else None
        if kkt is not None and kkt.within(tol) and raw in {"Solved", "AlmostSolved"} | _MAXITER:
            return ConicSolution(x, prog.objective(x), Status.OPTIMAL, kkt, y, res.iterations,
                                 res.solve_time, raw)
    status = Status.MAX_ITER if raw in _MAXITER else Status.NUM_ERROR
    obj = prog.objective(x) if finite else np.nan
    return ConicSolution(x, obj, status, kkt, y, res.iterations, res.solve_time, raw)
