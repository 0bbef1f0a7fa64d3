"""Command-line interface: ``wdmshape <subcommand> ...``.

Exit status: 0 success, 1 configuration/input error, 2 runtime failure,
3 selfcheck failure.  Worker count for sweeps comes from ``--workers`` or
the ``WDMSHAPE_WORKERS`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_SELFCHECK = 0, 1, 2, 3


class InputError(Exception):
    """Bad command-line input (mapped to exit status 1)."""


def _link(args):
    from .channels import table_i_link, table_iv_link

    make = table_i_link if args.link == "table_i" else table_iv_link
    kw = {}
    if args.n_channels is not None:
        kw["n_channels"] = args.n_channels
    if args.ssfm_step_km is not None:
        kw["ssfm_step_km"] = args.ssfm_step_km
    if args.spans is not None:
        kw["n_spans"] = args.spans
    return make(**kw)


def _sampler(args):
    from .pipeline import awgn_sampler, fiber_sampler

    if args.channel == "awgn":
        return awgn_sampler(args.snr_db)
    return fiber_sampler(_link(args), args.power_dbm)


def _add_channel_args(p):
    p.add_argument("--channel", choices=("awgn", "fiber"), default="awgn")
    p.add_argument("--snr-db", type=float, default=15.0, help="AWGN SNR")
    p.add_argument("--link", choices=("table_i", "table_iv"), default="table_i")
    p.add_argument("--power-dbm", type=float, default=-6.0, help="launch power per channel")
    p.add_argument("--n-channels", type=int)
    p.add_argument("--ssfm-step-km", type=float)
    p.add_argument("--spans", type=int)
    p.add_argument("--symbols", type=int, default=100_000)


def _read_pmf_arg(path):
    from .shaping import read_pmf

    try:
        return read_pmf(path)
    except (OSError, ValueError) as e:
        raise InputError(str(e)) from e


# --- subcommands -------------------------------------------------------------------

def cmd_optimize_pmf(args):
    from .constellation import qam_points
    from .shaping import ShapingRunConfig, ba_optimize, default_alpha_grid, mb_optimize, write_pmf

    pts = qam_points(args.order)
    sampler = _sampler(args)
    if args.method == "mb":
        grid = np.linspace(0.0, args.lambda_max, args.n_lambda)
        pmf = mb_optimize(pts, sampler, grid, 1.0, args.symbols, args.seed)
        air = pmf.meta["air"]
    else:
        cfg = ShapingRunConfig(default_alpha_grid(pts, args.n_alpha), max_outer_iters=args.max_iters,
                               convergence_tol=args.tol, symbols_per_iter=args.symbols, seed=args.seed)
        pmf, est = ba_optimize(sampler, pts, cfg)
        air = est.air_bits_per_symbol
    write_pmf(args.out, pmf, algorithm=args.method, channel=args.channel, seed=args.seed)
    print(f"AIR {air:.4f} bits/symbol, entropy {pmf.entropy():.4f} bits -> {args.out}")


def cmd_ghc(args):
    from .shaping import ghc_symmetric, kl_bits, marginals, product_pmf, write_pmf

    pmf = _read_pmf_arg(args.pmf)
    try:
        pi, pq = marginals(pmf)
    except ValueError as e:
        raise InputError(str(e)) from e
    di, dq = ghc_symmetric(pi), ghc_symmetric(pq)
    out = product_pmf(di, dq)
    write_pmf(args.out, out, algorithm="ghc")
    print(f"KL(I) {kl_bits(di, pi):.5f} bits, KL(Q) {kl_bits(dq, pq):.5f} bits -> {args.out}")


def cmd_build_labeling(args):
    from .labeling import build_labeling, named_labeling, write_labeling
    from .shaping import marginals

    if args.name:
        try:
            tab = named_labeling(args.name)
        except ValueError as e:
            raise InputError(str(e)) from e
    else:
        if not args.pmf:
            raise InputError("give --name or --pmf")
        pi, pq = marginals(_read_pmf_arg(args.pmf))
        try:
            tab = build_labeling(pi, pq)
        except ValueError as e:
            raise InputError(str(e)) from e
    write_labeling(args.out, tab)
    print(f"m_I={tab.dim_i.m} m_Q={tab.dim_q.m} bijective={tab.is_bijective()} -> {args.out}")


def cmd_simulate(args):
    from .experiment import ConfigError, load_config, run_sweep

    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        raise InputError(str(e)) from e
    failed = 0
    for r in run_sweep(cfg, args.output_dir, args.workers):
        if r["status"] != "ok":
            failed += 1
            print(f"power {r['power_dbm']:g} dBm spans {r['spans']}: FAILED {r['error']}")
            continue
        print(f"power {r['power_dbm']:g} dBm spans {r['spans']}: SNR {r['snr_db']:.2f} dB "
              f"AIR {r['air']:.3f} post-FEC errors {r['post_fec_errors']}/{r['post_fec_bits']}")
    if failed:
        raise RuntimeError(f"{failed} cell(s) failed")


def cmd_air(args):
    from .air import estimate_air, fit_aux_model, write_model
    from .constellation import uniform_qam

    pmf = _read_pmf_arg(args.pmf) if args.pmf else uniform_qam(args.order)
    pairs = _sampler(args)(pmf, args.symbols, args.seed)
    model = fit_aux_model(pairs, pmf)
    est = estimate_air(pmf, model, pairs)
    if args.model_out:
        write_model(args.model_out, pmf, model)
    print(json.dumps({"air": est.air_bits_per_symbol, "std_error": est.stderr,
                      "entropy": pmf.entropy()}, sort_keys=True))


def cmd_exit(args):
    from .analysis import awgn_posterior_source, exit_decoder, exit_demapper, to_csv, tunnel_open
    from .labeling import named_labeling
    from .turbo import FecConfig, TurboCodec

    try:
        tab = named_labeling(args.labeling)
    except ValueError as e:
        raise InputError(str(e)) from e
    grid = np.linspace(0.0, 1.0, args.points)
    lp, bits, _ = awgn_posterior_source(tab, args.snr_db, args.symbols, args.seed)
    dem = exit_demapper(tab, lp, bits, grid, args.seed, tag=f"demapper {args.labeling} {args.snr_db:g} dB")
    codec = TurboCodec(FecConfig(args.eta, tab.m, args.block_symbols), tab.position_order())
    dec = exit_decoder(codec, grid, 1, args.seed, tag=f"decoder eta={args.eta:g}")
    rows = dem.rows() + dec.rows()
    if args.csv:
        sys.stdout.write(to_csv(rows))
    else:
        for r in rows:
            print(json.dumps(r, sort_keys=True))
    print(f"# tunnel open: {tunnel_open(dem, dec)}", file=sys.stderr)


def cmd_report(args):
    from .analysis import aggregate_report, to_csv
    from .experiment import read_runs

    p = Path(args.runs)
    if p.is_dir():
        p = p / "runs.jsonl"
    if not p.exists():
        raise InputError(f"{p}: no such file")
    try:
        runs = [r for r in read_runs(p) if r.get("status") == "ok"]
    except (OSError, ValueError) as e:
        raise InputError(str(e)) from e
    summary = aggregate_report(runs, args.symbol_rate, args.pilot_rate)
    if args.csv:
        sys.stdout.write(to_csv(summary))
    else:
        for s in summary:
            print(json.dumps(s, sort_keys=True))


def cmd_selfcheck(args):
    from .selfcheck import selfcheck

    res = selfcheck(args.labeling or ())
    bad = [r for r in res if not r.passed]
    print(f"{len(res) - len(bad)}/{len(res)} checks passed")
    return EXIT_SELFCHECK if bad else EXIT_OK


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wdmshape", description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0, help="base seed for every random draw")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize-pmf", help="optimise a QAM input PMF (Blahut-Arimoto or Maxwell-Boltzmann)")
    _add_channel_args(p)
    p.add_argument("--order", type=int, default=1024)
    p.add_argument("--method", choices=("ba", "mb"), default="ba")
    p.add_argument("--n-alpha", type=int, default=11)
    p.add_argument("--max-iters", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--lambda-max", type=float, default=5.0)
    p.add_argument("--n-lambda", type=int, default=26)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_optimize_pmf)

    p = sub.add_parser("ghc", help="dyadic product approximation of a PMF file")
    p.add_argument("--pmf", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ghc)

    p = sub.add_parser("build-labeling", help="many-to-one labeling for a dyadic PMF")
    p.add_argument("--pmf")
    p.add_argument("--name", help="built-in labeling, e.g. 1024qam-shaped")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_labeling)

    p = sub.add_parser("simulate", help="run a (power, spans) sweep from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("air", help="AIR of a PMF over a channel")
    _add_channel_args(p)
    p.add_argument("--pmf")
    p.add_argument("--order", type=int, default=1024)
    p.add_argument("--model-out")
    p.set_defaults(func=cmd_air)

    p = sub.add_parser("exit", help="EXIT curves of demapper (AWGN) and turbo decoder")
    p.add_argument("--labeling", default="1024qam-shaped")
    p.add_argument("--snr-db", type=float, default=18.0)
    p.add_argument("--eta", type=float, default=5.0)
    p.add_argument("--symbols", type=int, default=20_000)
    p.add_argument("--block-symbols", type=int, default=6000)
    p.add_argument("--points", type=int, default=11)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_exit)

    p = sub.add_parser("report", help="aggregate a sweep's runs.jsonl")
    p.add_argument("runs", help="runs.jsonl or the sweep output directory")
    p.add_argument("--csv", action="store_true")
    p.add_argument("--symbol-rate", type=float, default=10e9)
    p.add_argument("--pilot-rate", type=float, default=0.02)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("selfcheck", help="oracle-backed checks with runtimes")
    p.add_argument("--labeling", action="append", help="also validate this labeling file")
    p.set_defaults(func=cmd_selfcheck)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if rc is None else rc


if __name__ == "__main__":
    sys.exit(main())
