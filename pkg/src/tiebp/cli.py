"""Command-line entry point: ``tiebp {calibrate-noise,run,montecarlo,convergence}``.

Exit codes: 0 success, 1 configuration error, 2 noise calibration failure,
3 at least one case flagged as divergent.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import MODES, RunConfig, dumps_config, load_config, preset
from .engine import CalibrationError, run_link
from .harness import resolve_sigma, run_convergence, run_montecarlo, write_cases, write_checkpoints, write_traces
from .signal_core import ConfigurationError

EXIT_OK, EXIT_CONFIG, EXIT_CALIBRATION, EXIT_DIVERGED = 0, 1, 2, 3


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tiebp", description="TI-ADC mismatch calibration by error backpropagation")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--preset", choices=("desk", "paper"), help="base settings (default: desk)")
    common.add_argument("--seed", type=_u64, help="master seed")
    common.add_argument("--cases", type=int, help="number of Monte Carlo cases")
    common.add_argument("--out", help="output directory")
    common.add_argument("--mode", choices=MODES, help="receiver calibration mode")
    common.add_argument("--sigma", type=float, help="noise sigma (skips calibration)")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("calibrate-noise", parents=[common], help="find sigma for the target impairment-free BER")
    r = sub.add_parser("run", parents=[common], help="simulate one case")
    r.add_argument("--case", type=int, default=0, help="case id (default 0)")
    m = sub.add_parser("montecarlo", parents=[common], help="BER histogram over random cases")
    m.add_argument("--jobs", type=int, default=1, help="worker processes")
    c = sub.add_parser("convergence", parents=[common], help="traces for several decimation factors")
    c.add_argument("--db", type=int, nargs="+", default=[1, 16], help="block decimation factors")
    return p


def load(args) -> RunConfig:
    base = preset(args.preset) if args.preset else None
    try:
        cfg = load_config(args.config, base) if args.config else (base or RunConfig())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config: {exc}") from exc
    over = {k: getattr(args, k) for k in ("seed", "cases", "out", "mode", "sigma") if getattr(args, k) is not None}
    return cfg.with_(**over).validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load(args)
        os.makedirs(cfg.out, exist_ok=True)
        with open(os.path.join(cfg.out, "config.ini"), "w") as fh:
            fh.write(dumps_config(cfg))
        if args.command == "calibrate-noise":
            sigma = resolve_sigma(cfg.with_(sigma=-1.0))
            with open(os.path.join(cfg.out, "sigma.txt"), "w") as fh:
                fh.write(f"{sigma!r}\n")
            print(f"sigma = {sigma!r}")
            return EXIT_OK
        if args.command == "run":
            sigma = resolve_sigma(cfg)
            res = run_link(cfg, args.case, [cfg.mode], sigma)[cfg.mode]
            write_traces(cfg.out, res)
            write_cases(os.path.join(cfg.out, "cases.csv"), [res])
            write_checkpoints(cfg.out, res)
            print(f"case {res.case_id}: BER {res.ber:.3e}  MSE {res.mse:.3e}  SNDR {res.sndr_start:.1f} -> {res.sndr:.1f} dB")
            return EXIT_DIVERGED if res.diverged else EXIT_OK
        if args.command == "montecarlo":
            mc = run_montecarlo(cfg, sigma=resolve_sigma(cfg), out=cfg.out, jobs=args.jobs)
            print(f"sigma {mc.sigma:.5g}  baseline BER {mc.baseline:.3e}  median {cfg.mode} {mc.median_with:.3e}  "
                  f"median no-cal {mc.median_no_cal:.3e}")
            return EXIT_DIVERGED if mc.any_diverged else EXIT_OK
        res = run_convergence(cfg, args.db, out=cfg.out)
        for d, r in res.items():
            print(f"D_B {d}: final MSE {r.mse:.3e}  BER {r.ber:.3e}")
        return EXIT_DIVERGED if any(r.diverged for r in res.values()) else EXIT_OK
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
