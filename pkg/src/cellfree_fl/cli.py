"""Command-line entry point: ``cellfree-fl <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .baselines import EvalOptions, evaluate_selection, run_bl1, run_bl2
from .long_term import LongTermOptions, run_algorithm2
from .network import PlacementConfig, generate_placement, realize, sample_realizations
from .params import SystemParams


def _add_network_args(ap):
    ap.add_argument("--M", type=int, default=20, help="number of APs")
    ap.add_argument("--N", type=int, default=15, help="number of UEs")
    ap.add_argument("--D", type=float, default=1.5, help="side of the square area (km)")
    ap.add_argument("--case", choices=("C1", "C2"), default="C1")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--N-qol", dest="N_qol", type=int, default=5)
    ap.add_argument("--B", type=float, default=20e6, help="bandwidth (Hz)")


def _add_budget_args(ap):
    ap.add_argument("--eval-samples", type=int, default=20)
    ap.add_argument("--sca-eps", type=float, default=1e-3)
    ap.add_argument("--sca-max-outer", type=int, default=15)
    ap.add_argument("--sca-tol", type=float, default=1e-6)


def _setup(args):
    cfg = ex.ExperimentConfig(M=[args.M], D=[args.D], case=[args.case], N_qol=[args.N_qol], N=args.N,
                              trials=1, seed=args.seed, B=args.B, n_eval_samples=args.eval_samples,
                              sca_eps=args.sca_eps, sca_max_outer=args.sca_max_outer,
                              sca_tol=args.sca_tol)
    p, setup = ex.setup_trial(cfg, args.case, args.M, args.D, args.N_qol, args.seed)
    return cfg, p, setup


def cmd_generate(args) -> int:
    p = SystemParams(B=args.B)
    pl = generate_placement(PlacementConfig(args.M, args.N, args.D, args.case), args.seed)
    net = realize(pl, p, args.seed + 1)
    text = net.dumps()
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


def cmd_optimize(args) -> int:
    cfg, p, setup = _setup(args)
    p = p.with_(lam=args.lam, tau_prox=args.tau_prox)
    opts = cfg.long_term_options()
    opts.max_iter = args.max_iter
    opts.init = args.init
    res = run_algorithm2(setup.placement, p, setup.streams["OPT"], opts)
    if args.trace:
        Path(args.trace).write_text(res.trace_csv())
    ev = evaluate_selection(res.a_binary, setup.nets, p, cfg.eval_options())
    print(json.dumps({"a_relaxed": np.round(res.a_relaxed, 6).tolist(),
                      "a_binary": res.a_binary.astype(int).tolist(), "n_selected": res.n_selected,
                      "iterations": res.iterations, "converged": res.converged,
                      "T_e": ev.T_e, "rounds": ev.rounds}, indent=1))
    return 0


def cmd_baseline(args) -> int:
    cfg, p, setup = _setup(args)
    runner = run_bl1 if args.scheme == "BL1" else run_bl2
    res = runner(setup.nets, p, np.random.default_rng(setup.streams[args.scheme]), cfg.eval_options())
    print(json.dumps({"scheme": res.scheme, "count": res.count, "rounds": res.rounds, "T_e": res.T_e},
                     indent=1))
    return 0


def _parse_list(kind):
    return lambda s: [kind(x) for x in s.split(",") if x]


def cmd_sweep(args) -> int:
    cfg = ex.ExperimentConfig.from_file(args.config) if args.config else ex.ExperimentConfig()
    overrides = {k: v for k, v in vars(args).items()
                 if k in {f for f in cfg.__dataclass_fields__} and v is not None}
    if overrides:
        cfg = ex.ExperimentConfig(**{**cfg.__dict__, **overrides})
    rows = ex.run_sweep(cfg)
    failed = sum(r["status"] != "ok" for r in rows)
    out = ex.output_dir(cfg)
    ex.write_summary(ex.summarize(rows), out / "summary.csv")
    print(f"{len(rows)} rows, {failed} failed -> {out}")
    return 1 if failed else 0


def cmd_summarize(args) -> int:
    rows = ex.read_rows(args.input)
    agg = ex.summarize(rows)
    out = Path(args.out) if args.out else Path(args.input).with_name("summary.csv")
    ex.write_summary(agg, out)
    for fig in args.figure or []:
        ex.emit_plotdata(agg, fig, out.parent / "plotdata")
    print(f"{len(agg)} groups -> {out}")
    return 0


def cmd_validate(args) -> int:
    from .validation import run_checks

    results = run_checks(seed=args.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cellfree-fl", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="draw a placement and one realization (JSON)")
    _add_network_args(g)
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    o = sub.add_parser("optimize", help="one run of the online selection algorithm")
    _add_network_args(o)
    _add_budget_args(o)
    o.add_argument("--max-iter", type=int, default=200)
    o.add_argument("--lam", type=float, default=1.0)
    o.add_argument("--tau-prox", type=float, default=1.0)
    o.add_argument("--init", choices=("random", "ones"), default="ones")
    o.add_argument("--trace", help="write the per-iteration trace CSV here")
    o.set_defaults(func=cmd_optimize)

    b = sub.add_parser("baseline", help="evaluate a random-selection baseline")
    _add_network_args(b)
    _add_budget_args(b)
    b.add_argument("--scheme", choices=("BL1", "BL2"), default="BL1")
    b.set_defaults(func=cmd_baseline)

    s = sub.add_parser("sweep", help="Monte Carlo sweep; flags override the config file")
    s.add_argument("--config", help="flat key=value file")
    s.add_argument("--M", type=_parse_list(int))
    s.add_argument("--D", type=_parse_list(float))
    s.add_argument("--case", type=_parse_list(str))
    s.add_argument("--N-qol", dest="N_qol", type=_parse_list(int))
    s.add_argument("--schemes", type=_parse_list(str))
    s.add_argument("--N", type=int)
    s.add_argument("--trials", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--output-dir", dest="output_dir")
    s.add_argument("--n-eval-samples", dest="n_eval_samples", type=int)
    s.add_argument("--max-iter", dest="max_iter", type=int)
    s.set_defaults(func=cmd_sweep)

    m = sub.add_parser("summarize", help="aggregate a results CSV and emit plot data")
    m.add_argument("input")
    m.add_argument("--out")
    m.add_argument("--figure", action="append", choices=sorted(ex.FIGURES))
    m.set_defaults(func=cmd_summarize)

    v = sub.add_parser("validate", help="quick invariant and oracle checks")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
