"""Network geometry, large-scale fading and channel-estimation statistics.

Positions are in metres on a ``D x D`` km square whose edges wrap around.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .params import SystemParams

SHADOW_STD_DB = 4.0
SHADOW_DECORR_M = 9.0


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class PlacementConfig:
    M: int
    N: int
    D: float
    case: str = "C1"
    x_l: int = 15
    x_p: int = 20
    x_ap: int = 3

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise ConfigurationError("need at least one AP and one UE")
        if not self.D > 0:
            raise ConfigurationError("side length D must be positive")
        if self.case not in ("C1", "C2"):
            raise ConfigurationError(f"unknown placement case {self.case!r}")
        if self.x_l < 1 or self.x_p < 1:
            raise ConfigurationError("grid and hotspot counts must be positive")
        if self.x_ap > self.x_p:
            raise ConfigurationError("x_ap cannot exceed x_p")

    @property
    def side(self) -> float:
        return 1000.0 * self.D


@dataclass
class Placement:
    ap_positions: np.ndarray
    ue_positions: np.ndarray
    side: float
    hotspots: Optional[np.ndarray] = None

    @property
    def M(self) -> int:
        return len(self.ap_positions)

    @property
    def N(self) -> int:
        return len(self.ue_positions)


@dataclass
class NetworkRealization:
    """One large-scale state: ``beta`` and the MMSE variances are M x N."""

    beta: np.ndarray
    pilot: np.ndarray
    pilot_gram: np.ndarray
    sigma2_dl: np.ndarray
    sigma2_ul: np.ndarray
    placement: Optional[Placement] = None

    @property
    def M(self) -> int:
        return self.beta.shape[0]

    @property
    def N(self) -> int:
        return self.beta.shape[1]

    def to_dict(self) -> dict:
        out = {
            "beta": self.beta.tolist(),
            "pilot": self.pilot.tolist(),
            "sigma2_dl": self.sigma2_dl.tolist(),
            "sigma2_ul": self.sigma2_ul.tolist(),
        }
        if self.placement is not None:
            out["ap_positions"] = self.placement.ap_positions.tolist()
            out["ue_positions"] = self.placement.ue_positions.tolist()
            out["side"] = self.placement.side
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkRealization":
        pilot = np.asarray(d["pilot"], dtype=int)
        placement = None
        if "ap_positions" in d:
            placement = Placement(np.asarray(d["ap_positions"], float),
                                  np.asarray(d["ue_positions"], float), float(d["side"]))
        return cls(beta=np.asarray(d["beta"], float), pilot=pilot,
                   pilot_gram=pilot_gram(pilot),
                   sigma2_dl=np.asarray(d["sigma2_dl"], float),
                   sigma2_ul=np.asarray(d["sigma2_ul"], float), placement=placement)


def wrap_distance(p, q, side: float):
    """Toroidal Euclidean distance; broadcasts over leading axes."""
    delta = np.abs(np.asarray(p, float) - np.asarray(q, float))
    delta = np.minimum(delta, side - delta)
    return np.sqrt(np.sum(delta ** 2, axis=-1))


def pairwise_wrap_distance(a: np.ndarray, b: np.ndarray, side: float) -> np.ndarray:
    return wrap_distance(a[:, None, :], b[None, :, :], side)


def _grid(x_l: int, side: float, offset: float) -> np.ndarray:
    ticks = (np.arange(x_l) + offset) * side / x_l
    xx, yy = np.meshgrid(ticks, ticks, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def _closest_points(grid: np.ndarray, targets: np.ndarray, count: int, side: float) -> np.ndarray:
    # rank grid points by distance to their nearest target; stable sort keeps lowest index on ties
    d = pairwise_wrap_distance(grid, targets, side).min(axis=1)
    order = np.argsort(d, kind="stable")
    return grid[order[:count]]


def generate_placement(cfg: PlacementConfig, seed=None) -> Placement:
    """Hotspot-driven UE placement with uniform (C1) or clustered (C2) APs.

    UEs occupy the ``N`` points of the UE grid closest to ``x_p`` uniformly
    drawn fixed locations. The AP grid is the UE grid shifted by half a cell.
    """
    rng = np.random.default_rng(seed)
    side = cfg.side
    n_points = cfg.x_l ** 2
    if cfg.M > n_points or cfg.N > n_points:
        raise ConfigurationError(
            f"a {cfg.x_l}x{cfg.x_l} grid cannot host M={cfg.M} APs / N={cfg.N} UEs at distinct points")
    hotspots = rng.uniform(0.0, side, size=(cfg.x_p, 2))
    ue_grid = _grid(cfg.x_l, side, 0.5)
    ap_grid = _grid(cfg.x_l, side, 0.0)
    ues = _closest_points(ue_grid, hotspots, cfg.N, side)
    if cfg.case == "C1":
        aps = ap_grid[np.sort(rng.choice(n_points, size=cfg.M, replace=False))]
    else:
        centres = hotspots[rng.choice(cfg.x_p, size=cfg.x_ap, replace=False)]
        aps = _closest_points(ap_grid, centres, cfg.M, side)
    return Placement(aps, ues, side, hotspots)


def perturb_ues(placement: Placement, radius: float = 5.0, seed=None) -> Placement:
    """Move every UE uniformly inside a disk of ``radius`` metres (wrapped)."""
    rng = np.random.default_rng(seed)
    N = placement.N
    r = radius * np.sqrt(rng.uniform(size=N))
    theta = rng.uniform(0.0, 2 * np.pi, size=N)
    shift = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    ues = np.mod(placement.ue_positions + shift, placement.side)
    return Placement(placement.ap_positions.copy(), ues, placement.side, placement.hotspots)


def path_loss_db(d):
    d = np.maximum(np.asarray(d, float), 1.0)
    return -30.5 - 36.7 * np.log10(d)


def shadowing_covariance(ue_positions: np.ndarray, side: float) -> np.ndarray:
    delta = pairwise_wrap_distance(ue_positions, ue_positions, side)
    return SHADOW_STD_DB ** 2 * 2.0 ** (-delta / SHADOW_DECORR_M)


def _symmetric_factor(C: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(C)
    return V * np.sqrt(np.clip(w, 0.0, None))


def sample_shadowing(placement: Placement, seed=None) -> np.ndarray:
    """M x N shadowing in dB; rows independent, UE-correlated within a row."""
    rng = np.random.default_rng(seed)
    Lf = _symmetric_factor(shadowing_covariance(placement.ue_positions, placement.side))
    z = rng.standard_normal((placement.M, placement.N))
    return z @ Lf.T


def large_scale_fading(pl_db, f_db):
    return 10.0 ** (np.asarray(pl_db, float) / 10.0) * 10.0 ** (np.asarray(f_db, float) / 10.0)


def pilot_gram(pilot: np.ndarray) -> np.ndarray:
    pilot = np.asarray(pilot)
    return (pilot[:, None] == pilot[None, :]).astype(float)


def assign_pilots(N: int, tau_t: int, seed=None):
    """Random pilot indices (0-based, with replacement) and |phi_k^H phi_l|^2."""
    if tau_t < 1:
        raise ValueError("tau_t must be >= 1")
    rng = np.random.default_rng(seed)
    pilot = rng.integers(0, tau_t, size=N)
    return pilot, pilot_gram(pilot)


def mmse_variance(beta: np.ndarray, gram: np.ndarray, tau_t: int, rho_t: float) -> np.ndarray:
    """Variance of the MMSE channel estimate for every AP-UE pair."""
    beta = np.asarray(beta, float)
    snr = tau_t * rho_t
    denom = snr * beta @ np.asarray(gram, float).T + 1.0
    return snr * beta ** 2 / denom


def realize(placement: Placement, p: SystemParams, seed=None) -> NetworkRealization:
    """Draw shadowing and pilots for a fixed geometry."""
    rng = np.random.default_rng(seed)
    N = placement.N
    tau_t = p.pilot_length(N)
    d = pairwise_wrap_distance(placement.ap_positions, placement.ue_positions, placement.side)
    beta = large_scale_fading(path_loss_db(d), sample_shadowing(placement, rng))
    pilot, gram = assign_pilots(N, tau_t, rng)
    s2 = mmse_variance(beta, gram, tau_t, p.rho_t)
    return NetworkRealization(beta, pilot, gram, s2, s2.copy(), placement)


def realization_stream(placement: Placement, p: SystemParams, seed=None,
                       radius: float = 5.0) -> Iterator[NetworkRealization]:
    """Endless stream of large-scale states around a base placement.

    Each state moves the UEs inside a ``radius`` disk around their base
    positions and redraws shadowing and pilots.
    """
    rng = np.random.default_rng(seed)
    while True:
        moved = perturb_ues(placement, radius, rng)
        yield realize(moved, p, rng)


def sample_realizations(placement: Placement, p: SystemParams, count: int, seed=None,
                        radius: float = 5.0) -> list:
    stream = realization_stream(placement, p, seed, radius)
    return [next(stream) for _ in range(count)]


def restrict_users(net: NetworkRealization, idx) -> NetworkRealization:
    """Sub-realization keeping only the UEs in ``idx``.

    Channel-estimate statistics are kept as computed for the full network, so
    pilot contamination from the dropped UEs' training is preserved.
    """
    idx = np.asarray(idx, dtype=int)
    placement = None
    if net.placement is not None:
        pl = net.placement
        placement = Placement(pl.ap_positions, pl.ue_positions[idx], pl.side, pl.hotspots)
    return NetworkRealization(net.beta[:, idx], net.pilot[idx], net.pilot_gram[np.ix_(idx, idx)],
                              net.sigma2_dl[:, idx], net.sigma2_ul[:, idx], placement)
