"""Online UE selection on the slow timescale.

The binary selection is relaxed to ``[0, 1]`` and pushed back towards the
vertices by the penalty ``V(a) = sum(a - a^2)``. Each iteration draws a new
large-scale state, solves the per-round allocation at the current ``a``,
folds the sampled total time into a running surrogate and takes a proximal
step, which reduces to a Euclidean projection onto
``H = {0 <= a <= 1, sum(a) >= N_qol}``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import conic
from .network import NetworkRealization, Placement, realization_stream
from .params import SystemParams
from .rates import InfeasibleTimingError, selected_mask
from .short_term import ShortTermSolution, sca_solve

log = logging.getLogger(__name__)


class LongTermError(RuntimeError):
    pass


def phi_schedule(n: int) -> float:
    """Surrogate averaging weight, n^(-9/10)."""
    return float(n) ** -0.9


def pi_schedule(n: int) -> float:
    """Iterate averaging weight, 1000 / (1000 + n)."""
    return 1000.0 / (1000.0 + n)


@dataclass
class SurrogateState:
    a: np.ndarray
    n: int = 0
    g_val: float = 0.0
    g_grad: Optional[np.ndarray] = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.a = np.asarray(self.a, float)
        if self.g_grad is None:
            self.g_grad = np.zeros_like(self.a)


def T_value_and_grad(a, onehot_sum, q: float):
    """q * a.s / sum(a) and its gradient for a fixed one-hot sum ``s``."""
    a = np.asarray(a, float)
    s = np.asarray(onehot_sum, float)
    total = a.sum()
    if total <= 0:
        raise ValueError("sum(a) must be positive")
    num = a @ s
    return q * num / total, q * (s * total - num) / total ** 2


def sample_T_and_grad(a, st_sol: ShortTermSolution, p: SystemParams):
    return T_value_and_grad(a, st_sol.timing.onehot_sum, p.q)


def update_surrogate(state: SurrogateState, T_val: float, T_grad, phi: float) -> SurrogateState:
    if not 0 < phi <= 1:
        raise ValueError("phi must lie in (0, 1]")
    g = (1 - phi) * state.g_val + phi * T_val
    grad = (1 - phi) * state.g_grad + phi * np.asarray(T_grad, float)
    return SurrogateState(state.a.copy(), state.n + 1, g, grad, state.history)


def penalty_value_and_grad(a, lam: float = 1.0):
    """``V(a)`` and the penalty part ``lam * (1 - 2a)`` of the Lagrangian gradient."""
    a = np.asarray(a, float)
    return float(np.sum(a - a * a)), lam * (1.0 - 2.0 * a)


# ---------------------------------------------------------------------------------------
# master problem
@dataclass
class Projection:
    a: np.ndarray
    mu: float  # multiplier of sum(a) >= N_qol
    kkt: float


def _clip_sum(y, mu):
    return np.clip(y + mu, 0.0, 1.0)


def project_H(y, N_qol: int, tol: float = 1e-8) -> Projection:
    """Euclidean projection onto ``{0 <= a <= 1, sum(a) >= N_qol}``."""
    y = np.asarray(y, float)
    N = y.size
    if N_qol > N:
        raise ValueError(f"N_qol={N_qol} exceeds N={N}: the feasible set is empty")
    a = _clip_sum(y, 0.0)
    mu = 0.0
    if a.sum() < N_qol:
        lo, hi = 0.0, max(1.0 - y.min(), 0.0)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if _clip_sum(y, mid).sum() < N_qol:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-15 * max(1.0, hi):
                break
        mu = hi
        # exact multiplier on the identified active set
        z = y + mu
        free = (z > 0.0) & (z < 1.0)
        if free.any():
            ones = np.count_nonzero(z >= 1.0)
            mu_exact = (N_qol - ones - y[free].sum()) / free.sum()
            z2 = y + mu_exact
            if np.array_equal(free, (z2 > 0.0) & (z2 < 1.0)):
                mu = mu_exact
        a = _clip_sum(y, mu)
    res = master_kkt(y, a, mu, N_qol)
    if res > tol:
        log.debug("projection KKT residual %.3g", res)
    return Projection(a, mu, res)


def master_kkt(y, a, mu: float, N_qol: int) -> float:
    """Worst KKT residual of the projection with closed-form box multipliers."""
    y, a = np.asarray(y, float), np.asarray(a, float)
    # stationarity a - y - mu = lower - upper fixes the box multipliers
    r = a - y - mu
    lower = np.clip(r, 0.0, None)
    upper = np.clip(-r, 0.0, None)
    primal = max(float(np.max(-a, initial=0.0)), float(np.max(a - 1.0, initial=0.0)),
                 max(N_qol - a.sum(), 0.0))
    comp = max(float(np.max(lower * a, initial=0.0)), float(np.max(upper * (1.0 - a), initial=0.0)),
               abs(mu * (a.sum() - N_qol)))
    dual = max(-mu, 0.0)
    return max(primal, comp, dual)


def solve_master(a_n, L_grad, tau_prox: float, N_qol: int) -> np.ndarray:
    """Minimiser of the linearised Lagrangian plus ``tau * ||a - a_n||^2`` over H."""
    if tau_prox <= 0:
        raise ValueError("tau_prox must be positive")
    y = np.asarray(a_n, float) - np.asarray(L_grad, float) / (2.0 * tau_prox)
    return project_H(y, N_qol).a


def master_qp(a_n, L_grad, tau_prox: float, N_qol: int) -> conic.ConicProgram:
    """The same master problem as a generic conic QP (reference path)."""
    a_n = np.asarray(a_n, float)
    N = a_n.size
    prog = conic.ConicProgram(N)
    prog.P = sp.csc_matrix(2.0 * tau_prox * sp.eye(N))
    prog.c[:] = np.asarray(L_grad, float) - 2.0 * tau_prox * a_n
    prog.c0 = tau_prox * float(a_n @ a_n)
    prog.lb[:] = 0.0
    prog.ub[:] = 1.0
    prog.add_linear(np.ones((1, N)), N_qol, sense=">=")
    return prog


def step_update(a_n, a_star, pi: float) -> np.ndarray:
    if not 0 <= pi <= 1:
        raise ValueError("pi must lie in [0, 1]")
    return (1 - pi) * np.asarray(a_n, float) + pi * np.asarray(a_star, float)


def round_selection(a, N_qol: int, threshold: float = 0.5) -> np.ndarray:
    """Binary selection: strict threshold, then promote the largest entries up to ``N_qol``."""
    a = np.asarray(a, float)
    out = (a > threshold).astype(float)
    missing = N_qol - int(out.sum())
    if missing > 0:
        rest = np.flatnonzero(out == 0)
        order = rest[np.argsort(-a[rest], kind="stable")]
        out[order[:missing]] = 1.0
    return out


def in_H(a, N_qol: int, atol: float = 1e-9) -> bool:
    a = np.asarray(a, float)
    return bool(np.all(a >= -atol) and np.all(a <= 1 + atol) and a.sum() >= N_qol - atol)


# ---------------------------------------------------------------------------------------
@dataclass
class LongTermOptions:
    max_iter: int = 200
    stop_tol: float = 1e-4
    patience: int = 5
    max_failures: int = 3
    sca_eps: float = 1e-3
    sca_max_outer: int = 15
    sca_tol: float = 1e-6
    warm_start: bool = True
    init: str = "ones"  # or "random"
    radius: float = 5.0


TRACE_FIELDS = ("n", "sum_a", "V", "L_est", "T_sample", "st_objective", "sup_change",
                "master_gap", "n_selected", "phi", "pi")


@dataclass
class Algorithm2Result:
    a_relaxed: np.ndarray
    a_binary: np.ndarray
    trace: List[dict]
    iterations: int
    converged: bool
    failures: int
    wallclock: float

    @property
    def n_selected(self) -> int:
        return int(self.a_binary.sum())

    def trace_csv(self) -> str:
        lines = [",".join(TRACE_FIELDS)]
        for row in self.trace:
            lines.append(",".join(f"{row[k]:.10g}" for k in TRACE_FIELDS))
        return "\n".join(lines) + "\n"


def initial_selection(N: int, N_qol: int, how: str = "random", rng=None) -> np.ndarray:
    if how == "ones":
        return np.ones(N)
    if how != "random":
        raise ValueError(f"unknown initialisation {how!r}")
    rng = np.random.default_rng(rng)
    return project_H(rng.uniform(size=N), N_qol).a


def run_algorithm2(placement: Placement, p: SystemParams, seed=None,
                   options: Optional[LongTermOptions] = None,
                   stream=None, callback: Optional[Callable[[dict], None]] = None) -> Algorithm2Result:
    """Run the online selection loop on one placement.

    The initial selection and the realization stream draw from independent
    children of ``seed``, so runs that differ only in ``p.lam`` see the same
    large-scale states.
    """
    opt = options or LongTermOptions()
    N = placement.N
    p.check_users(N)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    init_ss, stream_ss = root.spawn(2)
    if stream is None:
        stream = realization_stream(placement, p, np.random.default_rng(stream_ss), opt.radius)
    state = SurrogateState(initial_selection(N, p.N_qol, opt.init, np.random.default_rng(init_ss)))
    start = time.perf_counter()
    trace: List[dict] = []
    calm = failures = consecutive = 0
    warm = None
    converged = False
    n = 0
    for n in range(1, opt.max_iter + 1):
        a = state.a
        net: NetworkRealization = next(stream)
        try:
            st = sca_solve(a, net, p, eps=opt.sca_eps, max_outer=opt.sca_max_outer,
                           tol=opt.sca_tol, warm=warm if opt.warm_start else None)
        except (conic.SolverError, InfeasibleTimingError) as exc:
            failures += 1
            consecutive += 1
            log.warning("iteration %d: short-term solve failed: %s", n, exc)
            if consecutive > opt.max_failures:
                raise LongTermError(
                    f"{consecutive} consecutive short-term failures at iteration {n}: {exc}") from exc
            continue
        consecutive = 0
        warm = st
        T_val, T_grad = sample_T_and_grad(a, st, p)
        phi, pi = phi_schedule(n), pi_schedule(n)
        state = update_surrogate(state, T_val, T_grad, phi)
        V, V_grad = penalty_value_and_grad(a, p.lam)
        a_star = solve_master(a, state.g_grad + V_grad, p.tau_prox, p.N_qol)
        a_next = step_update(a, a_star, pi)
        change = float(np.max(np.abs(a_next - a)))
        row = {"n": n, "sum_a": float(a.sum()), "V": V, "L_est": state.g_val + p.lam * V,
               "T_sample": T_val, "st_objective": st.objective, "sup_change": change,
               "master_gap": float(np.linalg.norm(a_next - a_star)),
               "n_selected": int(selected_mask(a, p.select_threshold).sum()), "phi": phi, "pi": pi}
        trace.append(row)
        if callback is not None:
            callback(row)
        state = SurrogateState(a_next, state.n, state.g_val, state.g_grad, state.history)
        calm = calm + 1 if change < opt.stop_tol else 0
        if calm >= opt.patience:
            converged = True
            break
    a_rel = state.a
    return Algorithm2Result(a_rel, round_selection(a_rel, p.N_qol), trace, n, converged, failures,
                            time.perf_counter() - start)


def lambda_sweep(placement: Placement, p: SystemParams, lams: Sequence[float], seed=None,
                 options: Optional[LongTermOptions] = None) -> Dict[float, Algorithm2Result]:
    """One run per penalty weight on a shared seed (same initial point and states)."""
    return {lam: run_algorithm2(placement, p.with_(lam=lam), seed, options) for lam in lams}
