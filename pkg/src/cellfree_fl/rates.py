"""Closed-form achievable rates and the FL timing model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import NetworkRealization
from .params import SystemParams


class InfeasibleTimingError(ValueError):
    pass


@dataclass
class PowerAllocation:
    """``v`` is the M x N downlink amplitude sqrt(eta), ``u`` the uplink sqrt(zeta)."""

    v: np.ndarray
    u: np.ndarray
    f: np.ndarray


@dataclass
class RoundTiming:
    t_dl: np.ndarray
    t_cp: np.ndarray
    t_ul: np.ndarray
    onehot_dl: np.ndarray
    onehot_cp: np.ndarray
    onehot_ul: np.ndarray
    argmax: tuple

    @property
    def T_o(self) -> float:
        return float(self.t_dl.max() + self.t_cp.max() + self.t_ul.max())

    @property
    def onehot_sum(self) -> np.ndarray:
        return self.onehot_dl + self.onehot_cp + self.onehot_ul


def selected_mask(a, threshold: float = 1e-3) -> np.ndarray:
    return np.asarray(a, float) > threshold


def downlink_sinr(v: np.ndarray, net: NetworkRealization, p: SystemParams) -> np.ndarray:
    beta, s2, gram = net.beta, net.sigma2_dl, net.pilot_gram
    v = np.asarray(v, float)
    signal = p.rho_d * (v * s2).sum(axis=0) ** 2
    # X[l, k] = sum_m v_ml s2_ml beta_mk / beta_ml
    X = (v * s2 / beta).T @ beta
    off = gram * (1.0 - np.eye(net.N))
    contamination = p.rho_d * (off * X ** 2).sum(axis=0)
    interference = p.rho_d * beta.T @ (v ** 2 * s2).sum(axis=1)
    return signal / (contamination + interference + 1.0)


def uplink_sinr(u: np.ndarray, net: NetworkRealization, p: SystemParams) -> np.ndarray:
    beta, s2, gram = net.beta, net.sigma2_ul, net.pilot_gram
    zeta = np.asarray(u, float) ** 2
    noise = s2.sum(axis=0)
    signal = p.rho_u * zeta * noise ** 2
    # Y[k, l] = sum_m s2_mk beta_ml / beta_mk ; Z[k, l] = sum_m s2_mk beta_ml
    Y = (s2 / beta).T @ beta
    Z = s2.T @ beta
    off = gram * (1.0 - np.eye(net.N))
    contamination = p.rho_u * (off * Y ** 2) @ zeta
    interference = p.rho_u * Z @ zeta
    return signal / (contamination + interference + noise)


def downlink_rate(v, net: NetworkRealization, p: SystemParams) -> np.ndarray:
    """Per-UE downlink rate in bit/s under conjugate beamforming."""
    return p.prelog(net.N) * np.log2(1.0 + downlink_sinr(v, net, p))


def uplink_rate(u, net: NetworkRealization, p: SystemParams) -> np.ndarray:
    """Per-UE uplink rate in bit/s under matched filtering at the APs."""
    return p.prelog(net.N) * np.log2(1.0 + uplink_sinr(u, net, p))


def _onehot(times: np.ndarray, values: np.ndarray, mask: np.ndarray):
    out = np.zeros_like(times)
    if not mask.any():
        return out, -1
    idx = int(np.flatnonzero(mask)[np.argmax(times[mask])])
    out[idx] = values[idx]
    return out, idx


def step_times(a, alloc: PowerAllocation, net: NetworkRealization, p: SystemParams,
               rates=None) -> RoundTiming:
    """Per-UE download, compute and upload times of one round.

    Non-selected UEs get zero time in all three steps. ``rates`` may carry
    precomputed ``(R_d, R_u)``.
    """
    a = np.asarray(a, float)
    mask = selected_mask(a, p.select_threshold)
    R_d, R_u = rates if rates is not None else (downlink_rate(alloc.v, net, p),
                                                uplink_rate(alloc.u, net, p))
    f = np.asarray(alloc.f, float)
    if np.any(R_d[mask] <= 0) or np.any(R_u[mask] <= 0) or np.any(f[mask] <= 0):
        raise InfeasibleTimingError("a selected UE has zero rate or zero CPU frequency")
    zeros = np.zeros(len(a))
    unit_dl = np.where(mask, p.S_d / np.where(mask, R_d, 1.0), 0.0)
    unit_cp = np.where(mask, p.cycles / np.where(mask, f, 1.0), 0.0)
    unit_ul = np.where(mask, p.S_u / np.where(mask, R_u, 1.0), 0.0)
    t_dl, t_cp, t_ul = a * unit_dl, a * unit_cp, a * unit_ul
    if not mask.any():
        t_dl = t_cp = t_ul = zeros
    oh_dl, i_dl = _onehot(t_dl, unit_dl, mask)
    oh_cp, i_cp = _onehot(t_cp, unit_cp, mask)
    oh_ul, i_ul = _onehot(t_ul, unit_ul, mask)
    return RoundTiming(t_dl, t_cp, t_ul, oh_dl, oh_cp, oh_ul, (i_dl, i_cp, i_ul))


def round_count(a, p: SystemParams) -> float:
    """Number of FL rounds q / sum(a); accepts relaxed selections."""
    total = float(np.sum(a))
    if total <= 0:
        raise ValueError("round count undefined for an empty selection")
    return p.q / total


def bl2_round_count(K: int, N: int, p: SystemParams) -> float:
    """Rounds needed when K of N UEs are sampled afresh every round."""
    if not p.N_qol <= K <= N:
        raise ValueError(f"K={K} outside [{p.N_qol}, {N}]")
    return p.q / K + p.qt * (1.0 - K / N)


def total_time(a, timing_samples, p: SystemParams) -> float:
    """G(a) times the sample mean of the round time."""
    if len(timing_samples) == 0:
        raise ValueError("need at least one round-time sample")
    T_o = [t.T_o if isinstance(t, RoundTiming) else float(t) for t in timing_samples]
    return round_count(a, p) * float(np.mean(T_o))
