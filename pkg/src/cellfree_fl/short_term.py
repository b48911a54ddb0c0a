"""Per-round power and CPU-frequency allocation by successive convex approximation.

For a fixed selection ``a`` the round time ``t_d + t_c + t_u`` is minimised
over downlink amplitudes, uplink amplitudes and CPU frequencies. The
nonconvex rate constraints ``r <= R(v)`` are replaced at every iteration by a
concave quadratic minorant that is tight (value and gradient) at the current
point, so every iterate stays feasible for the exact problem and the
objective never increases.

Inside the convex programs the downlink amplitude is carried as
``w = sigma_hat * v`` (so that ``w^2 <= vtilde <= 1``), rates in Mbit/s and
frequencies in GHz. Everything returned to callers is in natural units.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.sparse as sp

from . import conic
from .network import NetworkRealization, restrict_users
from .params import SystemParams
from .rates import (PowerAllocation, RoundTiming, downlink_rate, selected_mask, step_times,
                    uplink_rate)

log = logging.getLogger(__name__)

RATE_UNIT = 1e6
FREQ_UNIT = 1e9
RATE_FLOOR = 1e-3  # bit/s


class DegenerateProblemError(ValueError):
    pass


# ---------------------------------------------------------------------------------------
# concave minorants of the rates
def _dl_terms(net: NetworkRealization, p: SystemParams):
    """Coefficients such that Upsilon_k = sum_m g[m,k] w[m,k] and
    Pi_k = sum_{l != k, shared pilot} (sum_m H[k,m,l] w[m,l])^2 + sum_{m,l} rho_d beta[m,k] w[m,l]^2 + 1."""
    sig = np.sqrt(net.sigma2_dl)
    g = np.sqrt(p.rho_d) * sig
    # H[k, m, l] = sqrt(rho_d) sigma_ml beta_mk / beta_ml
    H = np.sqrt(p.rho_d) * (sig / net.beta)[None, :, :] * net.beta.T[:, :, None]
    return g, H


def _ul_terms(net: NetworkRealization, p: SystemParams):
    """Uplink SINR written as Psi_k^2 / Xi_k after dividing by the noise term
    s_k = sum_m sigma_bar^2_mk: Psi_k = e_k u_k, Xi_k = sum_l d[k,l] u_l^2 + 1."""
    s2, beta = net.sigma2_ul, net.beta
    s = s2.sum(axis=0)
    e = np.sqrt(p.rho_u * s)
    Y = (s2 / beta).T @ beta
    Z = s2.T @ beta
    off = net.pilot_gram * (1.0 - np.eye(net.N))
    d = p.rho_u * (Z + off * Y ** 2) / s[:, None]
    return e, d


def _minorant_coeffs(x_bar, y_bar):
    """log(1 + x^2/y) >= c0 + c1 x - c2 (x^2 + y), tight at (x_bar, y_bar)."""
    gamma = x_bar ** 2 / y_bar
    c0 = np.log1p(gamma) - gamma
    c1 = 2.0 * x_bar / y_bar
    c2 = x_bar ** 2 / (y_bar * (x_bar ** 2 + y_bar))
    return c0, c1, c2


@dataclass
class BoundCoefficients:
    """Linearisation data for both rate minorants at one iterate.

    ``Upsilon_bar``/``Pi_bar`` are the downlink signal amplitude and
    interference-plus-noise at the iterate, ``Psi_bar``/``Xi_bar`` the
    (noise-normalised) uplink counterparts.
    """

    Upsilon_bar: np.ndarray
    Pi_bar: np.ndarray
    Psi_bar: np.ndarray
    Xi_bar: np.ndarray
    dl: tuple
    ul: tuple
    g: np.ndarray
    H: np.ndarray
    e: np.ndarray
    d: np.ndarray
    scale: float  # (tau_c - tau_t)/tau_c * B / ln 2, bit/s per nat


def _dl_upsilon_pi(w, g, H, net, p):
    gram_off = net.pilot_gram * (1.0 - np.eye(net.N))
    ups = (g * w).sum(axis=0)
    proj = np.einsum("kml,ml->kl", H, w)  # proj[k, l] = sum_m H[k,m,l] w[m,l]
    pc = (gram_off.T * proj ** 2).sum(axis=1)
    iui = p.rho_d * net.beta.T @ (w ** 2).sum(axis=1)
    return ups, pc + iui + 1.0


def _ul_psi_xi(u, e, d):
    return e * u, d @ (u ** 2) + 1.0


def build_bounds(alloc: PowerAllocation, net: NetworkRealization, p: SystemParams) -> BoundCoefficients:
    g, H = _dl_terms(net, p)
    e, d = _ul_terms(net, p)
    w = np.sqrt(net.sigma2_dl) * alloc.v
    ups, pi = _dl_upsilon_pi(w, g, H, net, p)
    psi, xi = _ul_psi_xi(np.asarray(alloc.u, float), e, d)
    return BoundCoefficients(ups, pi, psi, xi, _minorant_coeffs(ups, pi), _minorant_coeffs(psi, xi),
                             g, H, e, d, p.prelog(net.N) / np.log(2.0))


def bound_rates(bounds: BoundCoefficients, v, u, net: NetworkRealization, p: SystemParams):
    """Evaluate the downlink and uplink minorants (bit/s) at arbitrary ``v``, ``u``."""
    w = np.sqrt(net.sigma2_dl) * np.asarray(v, float)
    ups, pi = _dl_upsilon_pi(w, bounds.g, bounds.H, net, p)
    psi, xi = _ul_psi_xi(np.asarray(u, float), bounds.e, bounds.d)
    c0, c1, c2 = bounds.dl
    rd = bounds.scale * (c0 + c1 * ups - c2 * (ups ** 2 + pi))
    c0, c1, c2 = bounds.ul
    ru = bounds.scale * (c0 + c1 * psi - c2 * (psi ** 2 + xi))
    return rd, ru


# ---------------------------------------------------------------------------------------
# convex subproblem
class Layout:
    def __init__(self, M: int, N: int):
        self.M, self.N = M, N
        MN = M * N
        self.w = np.arange(MN).reshape(M, N)
        self.vt = MN + np.arange(MN).reshape(M, N)
        o = 2 * MN
        self.u = o + np.arange(N)
        self.f = o + N + np.arange(N)
        self.rd = o + 2 * N + np.arange(N)
        self.ru = o + 3 * N + np.arange(N)
        self.td, self.tc, self.tu = o + 4 * N, o + 4 * N + 1, o + 4 * N + 2
        self.n = o + 4 * N + 3


def _sel(n, rows, cols, vals=1.0):
    rows = np.asarray(rows)
    vals = np.broadcast_to(np.asarray(vals, float), rows.shape)
    return sp.csr_matrix((vals, (rows, np.asarray(cols))), shape=(rows.size if rows.ndim else 1, n))


@dataclass
class Subproblem:
    prog: conic.ConicProgram
    layout: Layout
    families: dict


def assemble_subproblem(a, bounds: BoundCoefficients, net: NetworkRealization,
                        p: SystemParams) -> Subproblem:
    """Convex inner approximation of the round-time problem at the bound's iterate."""
    a = np.asarray(a, float)
    M, N = net.M, net.N
    mask = selected_mask(a, p.select_threshold)
    if not mask.any():
        raise DegenerateProblemError("no UE is selected")
    lay = Layout(M, N)
    n = lay.n
    prog = conic.ConicProgram(n)
    prog.c[[lay.td, lay.tc, lay.tu]] = 1.0

    lb, ub = prog.lb, prog.ub
    lb[lay.w.ravel()] = 0.0
    ub[lay.vt] = np.broadcast_to(a, (M, N))
    lb[lay.u] = 0.0
    ub[lay.u] = np.minimum(1.0, np.sqrt(np.clip(a, 0.0, None)))
    lb[lay.f] = 0.0
    ub[lay.f] = p.f_max / FREQ_UNIT
    lb[lay.rd] = np.where(mask, RATE_FLOOR / RATE_UNIT, 0.0)
    lb[lay.ru] = np.where(mask, RATE_FLOOR / RATE_UNIT, 0.0)
    lb[[lay.td, lay.tc, lay.tu]] = 0.0

    # per-AP budget  sum_k vtilde_mk <= 1
    rows = np.repeat(np.arange(M), N)
    prog.add_linear(sp.csr_matrix((np.ones(M * N), (rows, lay.vt.ravel())), shape=(M, n)), 1.0)

    # w_mk^2 <= vtilde_mk  as  2 * vtilde * 1/2 >= w^2
    MN = M * N
    prog.add_rotated_cones(_sel(n, np.arange(MN), lay.vt.ravel()), 0.0,
                           sp.csr_matrix((MN, n)), 0.5,
                           _sel(n, np.arange(MN), lay.w.ravel()), 0.0, 1)

    scale = bounds.scale / RATE_UNIT
    gram_off = net.pilot_gram * (1.0 - np.eye(N))
    c0, c1, c2 = bounds.dl
    for k in range(N):
        # r_dk + scale*c2*(Ups^2 + Pi_q) - scale*c1*Ups - scale*(c0 - c2) <= 0
        s = np.sqrt(scale * c2[k])
        r_idx, c_idx, vals = [], [], []
        r_idx.append(np.zeros(M, int)); c_idx.append(lay.w[:, k]); vals.append(s * bounds.g[:, k])
        row = 1
        for l in np.flatnonzero(gram_off[:, k]):
            r_idx.append(np.full(M, row)); c_idx.append(lay.w[:, l]); vals.append(s * bounds.H[k, :, l])
            row += 1
        F = sp.csr_matrix((np.concatenate(vals), (np.concatenate(r_idx), np.concatenate(c_idx))),
                          shape=(row, n))
        lin = np.zeros(n)
        lin[lay.rd[k]] = 1.0
        lin[lay.w[:, k]] = -scale * c1[k] * bounds.g[:, k]
        # inter-user interference through vtilde >= w^2 (equal at the optimum)
        lin[lay.vt] = scale * c2[k] * p.rho_d * net.beta[:, k][:, None]
        prog.add_quadratic(F, lin, -scale * (c0[k] - c2[k]))

    c0, c1, c2 = bounds.ul
    for k in range(N):
        s = np.sqrt(scale * c2[k])
        F = sp.csr_matrix((np.concatenate([[s * bounds.e[k]], s * np.sqrt(bounds.d[k])]),
                           (np.arange(N + 1), np.concatenate([[lay.u[k]], lay.u]))), shape=(N + 1, n))
        lin = np.zeros(n)
        lin[lay.ru[k]] = 1.0
        lin[lay.u[k]] = -scale * c1[k] * bounds.e[k]
        prog.add_quadratic(F, lin, -scale * (c0[k] - c2[k]))

    # hyperbolic time constraints  a_k * size <= t * rate  (selected UEs only)
    sel = np.flatnonzero(mask)
    K = sel.size
    for t_idx, var, size in ((lay.td, lay.rd, p.S_d / RATE_UNIT),
                             (lay.tc, lay.f, p.cycles / FREQ_UNIT),
                             (lay.tu, lay.ru, p.S_u / RATE_UNIT)):
        prog.add_rotated_cones(_sel(n, np.arange(K), np.full(K, t_idx)), 0.0,
                               _sel(n, np.arange(K), var[sel]), 0.0,
                               sp.csr_matrix((K, n)), np.sqrt(2.0 * a[sel] * size), 1)

    families = {
        "linear": {"w>=0": MN, "vtilde<=a": MN, "ap_budget": M, "u<=min(1,sqrt(a))": N,
                   "f<=f_max": N, "r_d>=floor": N, "r_u>=floor": N, "t>=0": 3},
        "domain": {"u>=0": N, "f>=0": N},
        "conic": {"w^2<=vtilde": MN, "r_d<=Rtilde_d": N, "r_u<=Rtilde_u": N, "hyperbolic": 3 * K},
    }
    return Subproblem(prog, lay, families)


# ---------------------------------------------------------------------------------------
@dataclass
class ShortTermSolution:
    alloc: PowerAllocation
    vtilde: np.ndarray
    r_d: np.ndarray
    r_u: np.ndarray
    t_d: float
    t_c: float
    t_u: float
    obj_trace: List[float]
    timing: RoundTiming
    kkt: Optional[conic.KKTResiduals] = None
    iterations: int = 0
    certified: bool = True  # last subproblem passed the KKT check

    @property
    def objective(self) -> float:
        return self.t_d + self.t_c + self.t_u

    @property
    def T_o(self) -> float:
        """Round time recomputed from the exact rates at the final allocation."""
        return self.timing.T_o

    @property
    def onehots(self):
        return self.timing.onehot_dl, self.timing.onehot_cp, self.timing.onehot_ul

    def records(self) -> str:
        """Per-UE comma-separated dump: k, rate_dl, rate_ul, f, t_dl, t_cp, t_ul, ul_amp, dl_power_share."""
        lines = ["k,rate_dl,rate_ul,f,t_dl,t_cp,t_ul,u,vtilde_sum"]
        tm = self.timing
        for k in range(len(self.r_d)):
            lines.append(",".join(f"{x:.10g}" for x in (
                k, self.r_d[k], self.r_u[k], self.alloc.f[k], tm.t_dl[k], tm.t_cp[k], tm.t_ul[k],
                self.alloc.u[k], self.vtilde[:, k].sum())))
        return "\n".join(lines)


@dataclass
class _Point:
    w: np.ndarray
    vt: np.ndarray
    u: np.ndarray
    f: np.ndarray  # cycles/s
    r_d: np.ndarray  # bit/s
    r_u: np.ndarray
    t: np.ndarray  # (t_d, t_c, t_u) seconds

    def alloc(self, net) -> PowerAllocation:
        sig = np.sqrt(net.sigma2_dl)
        return PowerAllocation(self.w / sig, self.u.copy(), self.f.copy())

    @property
    def objective(self) -> float:
        return float(self.t.sum())


def _complete_point(a, w, vt, u, f, net, p, r_scale=0.99, t_scale=1.01) -> _Point:
    a = np.asarray(a, float)
    mask = selected_mask(a, p.select_threshold)
    sig = np.sqrt(net.sigma2_dl)
    R_d = downlink_rate(w / sig, net, p)
    R_u = uplink_rate(u, net, p)
    r_d = np.where(mask, np.maximum(r_scale * R_d, RATE_FLOOR), 0.0)
    r_u = np.where(mask, np.maximum(r_scale * R_u, RATE_FLOOR), 0.0)
    t = t_scale * np.array([
        np.max(a[mask] * p.S_d / r_d[mask]),
        np.max(a[mask] * p.cycles / f[mask]),
        np.max(a[mask] * p.S_u / r_u[mask]),
    ])
    return _Point(w, vt, u, f, r_d, r_u, t)


def initial_point(a, net: NetworkRealization, p: SystemParams, rng=None) -> _Point:
    """Feasible starting point; equal per-AP power split unless ``rng`` is given."""
    a = np.asarray(a, float)
    M, N = net.M, net.N
    mask = selected_mask(a, p.select_threshold)
    n_sel = int(mask.sum())
    if n_sel == 0:
        raise DegenerateProblemError("no UE is selected")
    if rng is None:
        share = np.where(mask, np.minimum(a, 1.0 / n_sel), 0.0)
        vt = np.broadcast_to(share, (M, N)).copy()
        u = np.where(mask, 0.9 * np.sqrt(np.minimum(a, 1.0)), 0.0)
        f = np.full(N, p.f_max)
    else:
        rng = np.random.default_rng(rng)
        split = rng.dirichlet(np.ones(n_sel), size=M) * rng.uniform(0.5, 1.0, size=(M, 1))
        vt = np.zeros((M, N))
        vt[:, mask] = np.minimum(split, a[mask])
        u = np.where(mask, rng.uniform(0.5, 1.0, N) * np.sqrt(np.minimum(a, 1.0)), 0.0)
        f = p.f_max * rng.uniform(0.5, 1.0, N)
    w = np.sqrt(vt)
    return _complete_point(a, w, vt, u, f, net, p)


def _unpack(x, lay: Layout) -> _Point:
    w = np.maximum(x[lay.w], 0.0)
    vt = np.maximum(x[lay.vt], w ** 2)
    return _Point(w, vt, np.clip(x[lay.u], 0.0, None), x[lay.f] * FREQ_UNIT,
                  x[lay.rd] * RATE_UNIT, x[lay.ru] * RATE_UNIT,
                  np.array([x[lay.td], x[lay.tc], x[lay.tu]]))


def _warm_point(a, warm: "ShortTermSolution", net, p, blend: float = 0.9) -> _Point:
    # constraints on (vtilde, u, f) do not depend on the channel, so any convex
    # mix with the default start is feasible and keeps every selected UE active
    a = np.asarray(a, float)
    base = initial_point(a, net, p)
    vt = blend * np.minimum(warm.vtilde, a[None, :]) + (1 - blend) * base.vt
    u = blend * np.minimum(warm.alloc.u, np.sqrt(np.clip(a, 0.0, 1.0))) + (1 - blend) * base.u
    f = blend * np.clip(warm.alloc.f, 0.0, p.f_max) + (1 - blend) * base.f
    return _complete_point(a, np.sqrt(vt), vt, u, f, net, p)


def _embed(sol: ShortTermSolution, idx, a, net, p) -> ShortTermSolution:
    M, N = net.M, net.N

    def cols(x):
        out = np.zeros((M, N))
        out[:, idx] = x
        return out

    def vec(x):
        out = np.zeros(N)
        out[idx] = x
        return out

    alloc = PowerAllocation(cols(sol.alloc.v), vec(sol.alloc.u), vec(sol.alloc.f))
    timing = step_times(a, alloc, net, p)
    return ShortTermSolution(alloc, cols(sol.vtilde), vec(sol.r_d), vec(sol.r_u), sol.t_d,
                             sol.t_c, sol.t_u, sol.obj_trace, timing, sol.kkt, sol.iterations,
                             sol.certified)


def _restrict_solution(sol: ShortTermSolution, idx) -> ShortTermSolution:
    alloc = PowerAllocation(sol.alloc.v[:, idx], sol.alloc.u[idx], sol.alloc.f[idx])
    return ShortTermSolution(alloc, sol.vtilde[:, idx], sol.r_d[idx], sol.r_u[idx], sol.t_d,
                             sol.t_c, sol.t_u, sol.obj_trace, sol.timing, sol.kkt, sol.iterations,
                             sol.certified)


def sca_solve(a, net: NetworkRealization, p: SystemParams, eps: float = 1e-4,
              max_outer: int = 30, tol: float = 1e-7, rng=None,
              warm: Optional[ShortTermSolution] = None, reduce: bool = True) -> ShortTermSolution:
    """Minimise the round time for a fixed selection ``a``.

    ``warm`` reuses the power shares and frequencies of an earlier solution
    (possibly on another realization). With ``reduce`` the convex programs
    only carry the selected UEs; the others transmit nothing, so the result
    is the same.

    A subproblem whose point is primal feasible but not certified optimal is
    still accepted (``certified=False`` on the result); one with no usable
    point ends the loop at the last iterate. Raises :class:`conic.SolverError`
    only when the first subproblem yields nothing usable.
    """
    a = np.asarray(a, float)
    mask = selected_mask(a, p.select_threshold)
    if not mask.any():
        raise DegenerateProblemError("no UE is selected")
    if reduce and not mask.all():
        idx = np.flatnonzero(mask)
        p_sub = p.with_(tau_t=p.pilot_length(net.N))
        sub_warm = _restrict_solution(warm, idx) if warm is not None else None
        sol = sca_solve(a[idx], restrict_users(net, idx), p_sub, eps, max_outer, tol, rng,
                        sub_warm, reduce=False)
        return _embed(sol, idx, a, net, p)

    pt = _warm_point(a, warm, net, p) if warm is not None else initial_point(a, net, p, rng)
    trace = [pt.objective]
    kkt = None
    certified = False
    it = 0
    for it in range(1, max_outer + 1):
        bounds = build_bounds(pt.alloc(net), net, p)
        sub = assemble_subproblem(a, bounds, net, p)
        sol = conic.solve(sub.prog, tol=tol)
        if sol.status is not conic.Status.OPTIMAL:
            # a primal-feasible point still lies inside the exact feasible set
            usable = sol.kkt is not None and sol.kkt.primal <= tol
            if not usable and it == 1:
                raise conic.SolverError(
                    f"SCA subproblem {it} ended with {sol.status.value} ({sol.raw_status})", sol)
            log.debug("SCA subproblem %d not certified (%s)", it, sol.raw_status)
            certified = False
            if not usable:
                break
        else:
            certified = True
        new = _unpack(sol.x, sub.layout)
        kkt = sol.kkt
        prev = trace[-1]
        if not new.objective < prev:
            # solver noise at the fixed point; keep the last feasible iterate
            break
        trace.append(new.objective)
        pt = new
        if prev - new.objective <= eps * prev:
            break
    alloc = pt.alloc(net)
    timing = step_times(a, alloc, net, p)
    return ShortTermSolution(alloc, pt.vt, pt.r_d, pt.r_u, float(pt.t[0]), float(pt.t[1]),
                             float(pt.t[2]), trace, timing, kkt, it, certified)


def check_feasible(a, sol: ShortTermSolution, net: NetworkRealization, p: SystemParams,
                   rtol: float = 1e-6) -> dict:
    """Re-evaluate every constraint of the exact round-time problem.

    Returns the worst relative violation per constraint family.
    """
    a = np.asarray(a, float)
    mask = selected_mask(a, p.select_threshold)
    v, u, f = sol.alloc.v, sol.alloc.u, sol.alloc.f
    s2 = net.sigma2_dl
    R_d = downlink_rate(v, net, p)
    R_u = uplink_rate(u, net, p)
    viol = {
        "power_share": float(np.max(s2 * v ** 2 - sol.vtilde, initial=0.0)),
        "vtilde<=a": float(np.max(sol.vtilde - a[None, :], initial=0.0)),
        "ap_budget": float(np.max(sol.vtilde.sum(axis=1) - 1.0, initial=0.0)),
        "u^2<=a": float(np.max(u ** 2 - a, initial=0.0)),
        "u_range": float(max(np.max(u - 1.0, initial=0.0), np.max(-u, initial=0.0))),
        "v>=0": float(np.max(-v, initial=0.0)),
        "f_range": float(max(np.max(f / p.f_max - 1.0, initial=0.0), np.max(-f, initial=0.0))),
        "r_d<=R_d": float(np.max((sol.r_d - R_d) / np.maximum(R_d, 1.0), initial=0.0)),
        "r_u<=R_u": float(np.max((sol.r_u - R_u) / np.maximum(R_u, 1.0), initial=0.0)),
    }
    if mask.any():
        viol["t_d"] = float(np.max(a[mask] * p.S_d / sol.r_d[mask] / sol.t_d - 1.0, initial=0.0))
        viol["t_c"] = float(np.max(a[mask] * p.cycles / f[mask] / sol.t_c - 1.0, initial=0.0))
        viol["t_u"] = float(np.max(a[mask] * p.S_u / sol.r_u[mask] / sol.t_u - 1.0, initial=0.0))
    return viol


def is_feasible(a, sol, net, p, rtol: float = 1e-6) -> bool:
    return max(check_feasible(a, sol, net, p).values()) <= rtol
