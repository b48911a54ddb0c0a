"""Fast self-checks run by ``cellfree-fl validate`` (seconds, not minutes)."""

from __future__ import annotations

import itertools

import numpy as np

from . import conic
from .long_term import master_qp, project_H, solve_master
from .network import PlacementConfig, generate_placement, realize, wrap_distance
from .params import SystemParams
from .rates import PowerAllocation, bl2_round_count, downlink_rate, round_count, uplink_rate
from .short_term import bound_rates, build_bounds, initial_point, is_feasible, sca_solve


def _wrap(rng):
    side = 1000.0
    worst = 0.0
    for _ in range(200):
        p, q = rng.uniform(0, side, 2), rng.uniform(0, side, 2)
        brute = min(np.linalg.norm(p - q - side * np.array(s)) for s in itertools.product((-1, 0, 1), repeat=2))
        worst = max(worst, abs(wrap_distance(p, q, side) - brute))
    return worst < 1e-9, f"max error {worst:.2e} m"


def _bounds(rng):
    p = SystemParams()
    net = realize(generate_placement(PlacementConfig(6, 4, 0.5), rng), p, rng)
    worst_gap, worst_over = 0.0, -np.inf
    for _ in range(5):
        a = np.ones(4)
        pt = initial_point(a, net, p, rng)
        alloc = pt.alloc(net)
        b = build_bounds(alloc, net, p)
        rd, ru = bound_rates(b, alloc.v, alloc.u, net, p)
        Rd, Ru = downlink_rate(alloc.v, net, p), uplink_rate(alloc.u, net, p)
        worst_gap = max(worst_gap, np.max(np.abs(rd - Rd) / Rd), np.max(np.abs(ru - Ru) / Ru))
        other = initial_point(a, net, p, rng).alloc(net)
        rd2, ru2 = bound_rates(b, other.v, other.u, net, p)
        worst_over = max(worst_over, np.max(rd2 - downlink_rate(other.v, net, p)),
                         np.max(ru2 - uplink_rate(other.u, net, p)))
    ok = worst_gap < 1e-9 and worst_over <= 1e-6
    return ok, f"tightness {worst_gap:.1e}, max(bound - rate) {worst_over:.1e} bit/s"


def _sca(rng):
    p = SystemParams()
    net = realize(generate_placement(PlacementConfig(5, 3, 0.5), rng), p, rng)
    a = np.ones(3)
    sol = sca_solve(a, net, p)
    tr = np.array(sol.obj_trace)
    mono = bool(np.all(np.diff(tr) <= 1e-8))
    return mono and is_feasible(a, sol, net, p), f"{len(tr) - 1} iterations, objective {tr[-1]:.4g} s"


def _projection(rng):
    worst = 0.0
    for _ in range(20):
        N = int(rng.integers(2, 12))
        Nq = int(rng.integers(1, N + 1))
        a = project_H(rng.uniform(size=N), Nq).a
        g = rng.normal(scale=3.0, size=N)
        ref = conic.solve(master_qp(a, g, 1.0, Nq), tol=1e-9)
        worst = max(worst, np.max(np.abs(solve_master(a, g, 1.0, Nq) - ref.x)))
    return worst < 1e-6, f"max deviation from conic QP {worst:.1e}"


def _round_counts(rng):
    p = SystemParams()
    ok = round_count(np.ones(15), p) == 6 and bl2_round_count(5, 15, p) == 78
    return ok, "q/15 = 6, q/5 + q(1 - 5/15) = 78"


def _conic(rng):
    prog = conic.ConicProgram(1, c=np.array([1.0]), lb=np.array([3.0]))
    s1 = conic.solve(prog)
    prog = conic.ConicProgram(1, c=np.array([1.0]))
    prog.add_rotated_cones(np.array([[1.0]]), 0.0, np.zeros((1, 1)), 1.0, np.zeros((1, 1)), 4.0, 1)
    s2 = conic.solve(prog)
    ok = abs(s1.x[0] - 3) < 1e-6 and abs(s2.x[0] - 8) < 1e-6
    return ok, f"x = {s1.x[0]:.6f} (expect 3), t = {s2.x[0]:.6f} (expect 8)"


CHECKS = (("wrap distance vs image enumeration", _wrap),
          ("rate minorants tight and below the rates", _bounds),
          ("SCA monotone and feasible", _sca),
          ("master projection vs conic QP", _projection),
          ("round-count identities", _round_counts),
          ("conic solver sanity", _conic))


def run_checks(seed: int = 0):
    rng = np.random.default_rng(seed)
    out = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # report, do not abort the suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
