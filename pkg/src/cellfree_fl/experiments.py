"""Monte Carlo sweeps over network size, area, placement case and QoL threshold.

Each trial generates one placement and one list of evaluation realizations
shared by all schemes, so scheme differences come from the selection only.
Rows are streamed to a CSV file through a single writer.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy import stats

from .baselines import EvalOptions, evaluate_selection, run_bl1, run_bl2
from .long_term import LongTermOptions, run_algorithm2
from .network import PlacementConfig, generate_placement, sample_realizations
from .params import SystemParams

log = logging.getLogger(__name__)

SCHEMES = ("OPT", "BL1", "BL2")
OUTPUT_ENV = "CELLFREE_FL_OUTPUT"

ROW_FIELDS = ("scheme", "case", "M", "N", "D", "N_qol", "trial", "seed", "T_e", "n_selected",
              "iters_to_converge", "wallclock", "status", "error", "config_hash")


@dataclass
class ExperimentConfig:
    M: List[int] = field(default_factory=lambda: [20])
    D: List[float] = field(default_factory=lambda: [1.5])
    case: List[str] = field(default_factory=lambda: ["C1", "C2"])
    N_qol: List[int] = field(default_factory=lambda: [5])
    N: int = 15
    trials: int = 20
    seed: int = 0
    schemes: List[str] = field(default_factory=lambda: list(SCHEMES))
    output_dir: str = "results"
    workers: int = 1
    # evaluation and solver budgets
    n_eval_samples: int = 20
    sca_eps: float = 1e-3
    sca_max_outer: int = 15
    sca_tol: float = 1e-6
    # slow timescale
    max_iter: int = 200
    stop_tol: float = 1e-4
    patience: int = 5
    init: str = "ones"
    lam: float = 1.0
    tau_prox: float = 1.0
    B: float = 20e6

    def __post_init__(self):
        for axis in ("M", "D", "case", "N_qol", "schemes"):
            if not getattr(self, axis):
                raise ValueError(f"sweep axis {axis!r} is empty")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        unknown = set(self.schemes) - set(SCHEMES)
        if unknown:
            raise ValueError(f"unknown schemes {sorted(unknown)}")

    # -- flat key=value text -----------------------------------------------------------
    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        kinds = {f.name: f for f in fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            kw[key] = _parse_value(key, value)
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name} = {','.join(map(str, v)) if isinstance(v, list) else v}")
        return "\n".join(out) + "\n"

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def params(self, N_qol: int) -> SystemParams:
        return SystemParams(B=self.B, N_qol=N_qol, lam=self.lam, tau_prox=self.tau_prox,
                            n_eval_samples=self.n_eval_samples)

    def long_term_options(self) -> LongTermOptions:
        return LongTermOptions(max_iter=self.max_iter, stop_tol=self.stop_tol, patience=self.patience,
                               sca_eps=self.sca_eps, sca_max_outer=self.sca_max_outer,
                               sca_tol=self.sca_tol, init=self.init)

    def eval_options(self) -> EvalOptions:
        return EvalOptions(self.n_eval_samples, self.sca_eps, self.sca_max_outer, self.sca_tol)

    def points(self):
        return list(itertools.product(self.case, self.M, self.D, self.N_qol, range(self.trials)))


_LIST_TYPES = {"M": int, "D": float, "case": str, "N_qol": int, "schemes": str}
_SCALAR_TYPES = {"N": int, "trials": int, "seed": int, "workers": int, "n_eval_samples": int,
                 "sca_max_outer": int, "max_iter": int, "patience": int, "output_dir": str,
                 "init": str}


def _parse_value(key: str, value: str):
    if key in _LIST_TYPES:
        return [_LIST_TYPES[key](v.strip()) for v in value.split(",") if v.strip()]
    return _SCALAR_TYPES.get(key, float)(value)


def trial_seed(base: int, case: str, M: int, D: float, N_qol: int, trial: int) -> int:
    """Stable 63-bit seed from the base seed, the axis values and the trial index."""
    key = f"{base}|{case}|{M}|{D!r}|{N_qol}|{trial}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


@dataclass
class TrialSetup:
    placement: object
    nets: list
    streams: Dict[str, np.random.SeedSequence]


def setup_trial(cfg: ExperimentConfig, case: str, M: int, D: float, N_qol: int, seed: int):
    p = cfg.params(N_qol)
    ss = dict(zip(("placement", "eval", "OPT", "BL1", "BL2"), np.random.SeedSequence(seed).spawn(5)))
    placement = generate_placement(PlacementConfig(M, cfg.N, D, case), np.random.default_rng(ss["placement"]))
    nets = sample_realizations(placement, p, cfg.n_eval_samples, np.random.default_rng(ss["eval"]))
    return p, TrialSetup(placement, nets, ss)


def run_trial(cfg: ExperimentConfig, case: str, M: int, D: float, N_qol: int, trial: int) -> List[dict]:
    """All requested schemes on one trial; a failing scheme yields a failed row."""
    seed = trial_seed(cfg.seed, case, M, D, N_qol, trial)
    base = {"case": case, "M": M, "N": cfg.N, "D": D, "N_qol": N_qol, "trial": trial, "seed": seed,
            "config_hash": cfg.config_hash()}
    rows = []
    try:
        p, setup = setup_trial(cfg, case, M, D, N_qol, seed)
    except Exception as exc:  # configuration errors fail every scheme of the trial
        return [dict(base, scheme=s, T_e=math.nan, n_selected=0, iters_to_converge=0, wallclock=0.0,
                     status="failed", error=f"{type(exc).__name__}: {exc}") for s in cfg.schemes]
    for scheme in cfg.schemes:
        start = time.perf_counter()
        row = dict(base, scheme=scheme, status="ok", error="", iters_to_converge=0)
        try:
            if scheme == "OPT":
                res = run_algorithm2(setup.placement, p, setup.streams["OPT"], cfg.long_term_options())
                ev = evaluate_selection(res.a_binary, setup.nets, p, cfg.eval_options())
                row.update(T_e=ev.T_e, n_selected=res.n_selected, iters_to_converge=res.iterations)
            else:
                runner = run_bl1 if scheme == "BL1" else run_bl2
                res = runner(setup.nets, p, np.random.default_rng(setup.streams[scheme]), cfg.eval_options())
                row.update(T_e=res.T_e, n_selected=res.count)
        except Exception as exc:
            log.warning("trial %s failed for %s: %s", base, scheme, exc)
            row.update(T_e=math.nan, n_selected=0, status="failed", error=f"{type(exc).__name__}: {exc}")
        row["wallclock"] = time.perf_counter() - start
        rows.append(row)
    return rows


class RowWriter:
    """Append-only CSV writer; one instance owns the file and serialises writes."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        with self.path.open("w", newline="") as fh:
            csv.DictWriter(fh, ROW_FIELDS).writeheader()

    def write(self, rows: Iterable[dict]) -> None:
        with self._lock, self.path.open("a", newline="") as fh:
            w = csv.DictWriter(fh, ROW_FIELDS, extrasaction="ignore")
            for row in rows:
                w.writerow(_fmt_row(row))
            fh.flush()
            os.fsync(fh.fileno())


def _fmt_row(row: dict) -> dict:
    return {k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()}


def output_dir(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or cfg.output_dir)


def _trial_task(args):
    cfg, point = args
    return run_trial(cfg, *point)


def run_sweep(cfg: ExperimentConfig, write: bool = True) -> List[dict]:
    """Every axis combination times every trial; returns rows in a fixed order."""
    points = cfg.points()
    writer = None
    if write:
        out = output_dir(cfg)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(f"# config_hash = {cfg.config_hash()}\n" + cfg.to_text())
        writer = RowWriter(out / "results.csv")
    results: List[List[dict]] = [None] * len(points)
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            for i, rows in enumerate(pool.map(_trial_task, [(cfg, pt) for pt in points])):
                results[i] = rows
                if writer:
                    writer.write(rows)
    else:
        for i, pt in enumerate(points):
            results[i] = run_trial(cfg, *pt)
            if writer:
                writer.write(results[i])
    return [row for rows in results for row in rows]


def read_rows(path) -> List[dict]:
    ints = {"M", "N", "N_qol", "trial", "seed", "n_selected", "iters_to_converge"}
    floats = {"D", "T_e", "wallclock"}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            for k in ints:
                row[k] = int(row[k])
            for k in floats:
                row[k] = float(row[k])
            out.append(row)
    return out


# ---------------------------------------------------------------------------------------
GROUP_KEYS = ("scheme", "case", "M", "D", "N_qol")
SUMMARY_FIELDS = GROUP_KEYS + ("n", "failed", "T_e_mean", "T_e_std", "T_e_ci95",
                               "n_selected_mean", "n_selected_std", "n_selected_ci95")


def _ci95(x: np.ndarray) -> float:
    n = x.size
    if n < 2:
        return 0.0
    sd = x.std(ddof=1)
    return float(stats.t.ppf(0.975, n - 1) * sd / math.sqrt(n)) if sd > 0 else 0.0


def summarize(rows: Sequence[dict]) -> List[dict]:
    """Mean, sample std and 95% t-interval half-width per (scheme, case, M, D, N_qol)."""
    if not rows:
        raise ValueError("nothing to summarize")
    groups: Dict[tuple, List[dict]] = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in GROUP_KEYS), []).append(row)
    out = []
    for key in sorted(groups, key=lambda k: tuple(str(v) if isinstance(v, str) else v for v in k)):
        members = groups[key]
        ok = [r for r in members if r["status"] == "ok" and math.isfinite(r["T_e"])]
        agg = dict(zip(GROUP_KEYS, key), n=len(ok), failed=len(members) - len(ok))
        for name in ("T_e", "n_selected"):
            x = np.array([r[name] for r in ok], float)
            agg[f"{name}_mean"] = float(x.mean()) if x.size else math.nan
            agg[f"{name}_std"] = float(x.std(ddof=1)) if x.size > 1 else (0.0 if x.size else math.nan)
            agg[f"{name}_ci95"] = _ci95(x) if x.size else math.nan
        out.append(agg)
    return out


def write_summary(aggregates: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_FIELDS)
        w.writeheader()
        for row in aggregates:
            w.writerow(_fmt_row(row))


# ---------------------------------------------------------------------------------------
# figure data: x axis, y statistic, one curve per remaining key combination
FIGURES = {
    "te_vs_M": ("M", "T_e", "mean total FL execution time (s)"),
    "nsel_vs_M": ("M", "n_selected", "mean number of selected UEs"),
    "te_vs_nqol": ("N_qol", "T_e", "mean total FL execution time (s)"),
    "nsel_vs_nqol": ("N_qol", "n_selected", "mean number of selected UEs"),
    "te_vs_D": ("D", "T_e", "mean total FL execution time (s)"),
}
GAP = "gap"


def emit_plotdata(aggregates: Sequence[dict], figure: str, out_dir) -> List[Path]:
    """One CSV per curve plus a plotting-script stub; missing cells become gap rows."""
    if figure not in FIGURES:
        raise ValueError(f"unknown figure {figure!r}; choose from {sorted(FIGURES)}")
    x_key, stat, y_label = FIGURES[figure]
    curve_keys = [k for k in GROUP_KEYS if k != x_key]
    xs = sorted({row[x_key] for row in aggregates})
    curves: Dict[tuple, Dict] = {}
    for row in aggregates:
        curves.setdefault(tuple(row[k] for k in curve_keys), {})[row[x_key]] = row
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for key in sorted(curves, key=str):
        label = "_".join(f"{k}{v}" for k, v in zip(curve_keys, key))
        path = out_dir / f"{figure}__{label}.csv"
        cells = curves[key]
        with path.open("w", newline="") as fh:
            fh.write(f"# figure: {figure}\n# curve: {', '.join(f'{k}={v}' for k, v in zip(curve_keys, key))}\n")
            fh.write(f"# x: {x_key}\n# y: {y_label}; ci95 = 95% t-interval half-width; n = successful trials\n")
            fh.write(f"# rows with marker={GAP} have no successful trial\n")
            w = csv.writer(fh)
            w.writerow(["x", "y", "ci95", "n", "marker"])
            for x in xs:
                cell = cells.get(x)
                if cell is None or not cell["n"]:
                    w.writerow([x, "nan", "nan", 0, GAP])
                else:
                    w.writerow([x, repr(float(cell[f"{stat}_mean"])), repr(float(cell[f"{stat}_ci95"])),
                                cell["n"], ""])
        paths.append(path)
    stub = out_dir / f"{figure}__plot.txt"
    stub.write_text(
        "# plotting stub: one line per CSV file, error bars from the ci95 column\n"
        "import csv, glob\nimport matplotlib.pyplot as plt\n"
        f"for path in sorted(glob.glob('{figure}__*.csv')):\n"
        "    rows = [r for r in csv.DictReader(l for l in open(path) if not l.startswith('#'))]\n"
        "    rows = [r for r in rows if r['marker'] != 'gap']\n"
        "    plt.errorbar([float(r['x']) for r in rows], [float(r['y']) for r in rows],\n"
        "                 yerr=[float(r['ci95']) for r in rows], label=path, marker='o')\n"
        f"plt.xlabel('{x_key}')\nplt.ylabel('{y_label}')\nplt.legend()\nplt.savefig('{figure}.png')\n")
    paths.append(stub)
    return paths


def read_plotdata(path) -> List[dict]:
    """Parse a curve file written by :func:`emit_plotdata` (comment lines skipped)."""
    with open(path) as fh:
        body = io.StringIO("".join(line for line in fh if not line.startswith("#")))
    out = []
    for row in csv.DictReader(body):
        out.append({"x": float(row["x"]), "y": float(row["y"]), "ci95": float(row["ci95"]),
                    "n": int(row["n"]), "marker": row["marker"]})
    return out
