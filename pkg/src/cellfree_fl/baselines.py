"""Random-selection reference schemes and the shared total-time evaluation.

Every scheme, including the optimised selection, is scored by the same
routine: the per-round allocation is optimised on each realization of a
common list and the round times are averaged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .network import NetworkRealization
from .params import SystemParams
from .rates import bl2_round_count, round_count
from .short_term import sca_solve


@dataclass
class EvalOptions:
    n_samples: int = 20
    sca_eps: float = 1e-3
    sca_max_outer: int = 15
    sca_tol: float = 1e-6
    warm_start: bool = True


@dataclass
class Evaluation:
    T_e: float
    rounds: float
    T_o: List[float]


def _round_times(selections, nets: Sequence[NetworkRealization], p: SystemParams,
                 opt: EvalOptions) -> List[float]:
    out, warm = [], None
    for a, net in zip(selections, nets):
        sol = sca_solve(a, net, p, eps=opt.sca_eps, max_outer=opt.sca_max_outer, tol=opt.sca_tol,
                        warm=warm if opt.warm_start else None)
        warm = sol
        out.append(sol.T_o)
    return out


def evaluate_selection(a, nets: Sequence[NetworkRealization], p: SystemParams,
                       options: Optional[EvalOptions] = None) -> Evaluation:
    """``G(a)`` times the mean optimised round time over ``nets``."""
    opt = options or EvalOptions()
    a = np.asarray(a, float)
    T_o = _round_times([a] * len(nets), nets, p, opt)
    G = round_count(a, p)
    return Evaluation(G * float(np.mean(T_o)), G, T_o)


def draw_count(N: int, N_qol: int, rng) -> int:
    """Uniform integer on ``[N_qol, N]``, both ends included."""
    if not 1 <= N_qol <= N:
        raise ValueError(f"need 1 <= N_qol <= N, got N_qol={N_qol}, N={N}")
    return int(rng.integers(N_qol, N + 1))


def random_subset(N: int, K: int, rng) -> np.ndarray:
    a = np.zeros(N)
    a[rng.choice(N, size=K, replace=False)] = 1.0
    return a


@dataclass
class BaselineResult:
    scheme: str
    selection_trace: List[np.ndarray]
    rounds: float
    T_e: float
    count: int
    T_o: List[float] = field(default_factory=list)

    @property
    def n_selected(self) -> int:
        return self.count


def run_bl1(nets: Sequence[NetworkRealization], p: SystemParams, seed=None,
            options: Optional[EvalOptions] = None) -> BaselineResult:
    """One random subset of random size, kept for the whole process."""
    N = nets[0].N
    rng = np.random.default_rng(seed)
    K = draw_count(N, p.N_qol, rng)
    a = random_subset(N, K, rng)
    ev = evaluate_selection(a, nets, p, options)
    return BaselineResult("BL1", [a], ev.rounds, ev.T_e, K, ev.T_o)


def run_bl2(nets: Sequence[NetworkRealization], p: SystemParams, seed=None,
            options: Optional[EvalOptions] = None) -> BaselineResult:
    """Fixed random size, fresh random subset in every round."""
    opt = options or EvalOptions()
    N = nets[0].N
    rng = np.random.default_rng(seed)
    K = draw_count(N, p.N_qol, rng)
    picks = [random_subset(N, K, rng) for _ in nets]
    T_o = _round_times(picks, nets, p, opt)
    G = bl2_round_count(K, N, p)
    return BaselineResult("BL2", picks, G, G * float(np.mean(T_o)), K, T_o)
