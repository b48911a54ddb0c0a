"""Scalar system constants shared by every module."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Optional


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class SystemParams:
    """Link budget, FL workload and algorithm constants.

    Powers are given in watts and normalised by the noise power on access
    (``rho_d``, ``rho_u``, ``rho_t``). Data sizes are in bits, ``B`` in Hz.
    ``tau_t`` defaults to the number of UEs when left as ``None``.
    """

    tau_c: int = 200
    tau_t: Optional[int] = None
    p_d_watt: float = 1.0
    p_u_watt: float = 0.2
    p_t_watt: float = 0.2
    noise_dbm: float = -92.0
    B: float = 20e6
    S_d: float = 5 * 8e6
    S_u: float = 5 * 8e6
    L: int = 5
    D_k: float = 5e6
    c_k: float = 20.0
    f_max: float = 3e9
    q: float = 90.0
    q_tilde: Optional[float] = None
    N_qol: int = 5
    lam: float = 1.0
    tau_prox: float = 1.0
    select_threshold: float = 1e-3
    n_eval_samples: int = 20

    def __post_init__(self):
        positive = ("p_d_watt", "p_u_watt", "p_t_watt", "B", "S_d", "S_u",
                    "D_k", "c_k", "f_max", "q", "tau_prox")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.tau_t is not None and not 1 <= self.tau_t < self.tau_c:
            raise ValueError("need 1 <= tau_t < tau_c")

    @property
    def noise_watt(self) -> float:
        return dbm_to_watt(self.noise_dbm)

    @property
    def rho_d(self) -> float:
        return self.p_d_watt / self.noise_watt

    @property
    def rho_u(self) -> float:
        return self.p_u_watt / self.noise_watt

    @property
    def rho_t(self) -> float:
        return self.p_t_watt / self.noise_watt

    @property
    def qt(self) -> float:
        return self.q if self.q_tilde is None else self.q_tilde

    @property
    def cycles(self) -> float:
        """CPU cycles of one local update, L * D_k * c_k."""
        return self.L * self.D_k * self.c_k

    def pilot_length(self, N: int) -> int:
        tau_t = N if self.tau_t is None else self.tau_t
        if tau_t >= self.tau_c:
            raise ValueError("pilot length must be shorter than the coherence block")
        return tau_t

    def prelog(self, N: int) -> float:
        """(tau_c - tau_t) / tau_c * B, the bandwidth left for data."""
        return (self.tau_c - self.pilot_length(N)) / self.tau_c * self.B

    def check_users(self, N: int) -> None:
        if self.N_qol > N:
            raise ValueError(f"N_qol={self.N_qol} exceeds the number of UEs N={N}")
        if self.N_qol < 1:
            raise ValueError("N_qol must be >= 1")

    def with_(self, **kw) -> "SystemParams":
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}
