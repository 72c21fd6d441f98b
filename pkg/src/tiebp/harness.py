"""Experiment runners: Monte Carlo BER histograms and convergence traces, with CSV output.

Case ``c`` of a run with master seed ``s`` draws every random quantity from
``RngStream(s, (c,))`` (see :mod:`tiebp.engine`), so results do not depend
on case order or on how cases are spread over worker processes.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .compeq import save_coefbank
from .config import RunConfig, dumps_config
from .engine import CaseResult, baseline_ber, calibrate_noise, run_link
from .metrics import log_bins

HIST_DECADES = (-6, 0)


@dataclass
class MonteCarloResult:
    sigma: float
    baseline: float
    with_cal: list[CaseResult]
    no_cal: list[CaseResult]

    @property
    def median_with(self) -> float:
        return float(np.median([r.ber for r in self.with_cal]))

    @property
    def median_no_cal(self) -> float:
        return float(np.median([r.ber for r in self.no_cal]))

    @property
    def any_diverged(self) -> bool:
        return any(r.diverged for r in self.with_cal)


def resolve_sigma(cfg: RunConfig) -> float:
    """Configured noise sigma, calibrated when the config leaves it negative."""
    return cfg.sigma if cfg.sigma >= 0 else calibrate_noise(cfg)


def _modes(cfg: RunConfig):
    if cfg.mode == "mixed-signal":
        return [["no-cal"], ["mixed-signal"]]
    if cfg.mode == "digital-ce":
        return [["no-cal", "digital-ce"]]
    return [["no-cal"]]


def _one_case(args) -> dict:
    cfg, case_id, sigma = args
    out = {}
    for group in _modes(cfg):
        out.update(run_link(cfg, case_id, group, sigma))
    return out


def histogram(bers, edges: np.ndarray) -> np.ndarray:
    """Counts per log bin; values below the first edge land in the first bin, above the last in the last."""
    b = np.clip(np.asarray(bers, dtype=float), edges[0], edges[-1])
    return np.histogram(b, bins=edges)[0]


def run_montecarlo(cfg: RunConfig, n_cases: int | None = None, sigma: float | None = None, out=None,
                   jobs: int = 1, baseline_cases: int = 2) -> MonteCarloResult:
    """Run ``n_cases`` independent cases for ``cfg.mode`` and the uncalibrated receiver.

    ``baseline`` is the pooled impairment-free BER of the uncalibrated
    receiver over ``baseline_cases`` extra cases (ids after the last case).
    """
    cfg.validate()
    n = cfg.cases if n_cases is None else n_cases
    if n < 1:
        raise ValueError("n_cases must be >= 1")
    s = resolve_sigma(cfg) if sigma is None else sigma
    tasks = [(cfg, c, s) for c in range(n)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_one_case, tasks))
    else:
        results = [_one_case(t) for t in tasks]
    base = baseline_ber(cfg, s, range(n, n + baseline_cases)) if baseline_cases else float("nan")
    mode = cfg.mode
    mc = MonteCarloResult(s, base, [r[mode] for r in results], [r["no-cal"] for r in results])
    if out is not None:
        write_montecarlo(mc, cfg, out)
    return mc


def _case_row(r: CaseResult, no_cal: CaseResult | None) -> list:
    return [r.case_id, r.seed, r.mode, repr(r.ber), repr(no_cal.ber) if no_cal else "", repr(r.mse), repr(r.sndr),
            repr(r.sndr_start), int(r.diverged), r.bits, repr(r.residual_gain), repr(r.residual_phase)]


CASE_HEADER = ["case_id", "seed", "mode", "ber", "ber_no_cal", "mse", "sndr", "sndr_start", "diverged", "bits",
               "residual_gain", "residual_phase"]


def write_cases(path, results, no_cal=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CASE_HEADER)
        for i, r in enumerate(results):
            w.writerow(_case_row(r, no_cal[i] if no_cal else None))


def write_checkpoints(out, r: CaseResult) -> None:
    if r.bank is None:
        return
    d = os.path.join(out, "checkpoints")
    os.makedirs(d, exist_ok=True)
    for b, bank in r.checkpoints:
        save_coefbank(bank, os.path.join(d, f"case{r.case_id:04d}_block{b:06d}.coef"))
    save_coefbank(r.bank, os.path.join(d, f"case{r.case_id:04d}_final.coef"))


def write_montecarlo(mc: MonteCarloResult, cfg: RunConfig, out) -> None:
    os.makedirs(out, exist_ok=True)
    edges = log_bins(*HIST_DECADES)
    cw = histogram([r.ber for r in mc.with_cal], edges)
    cn = histogram([r.ber for r in mc.no_cal], edges)
    with open(os.path.join(out, "histogram.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count_with_ce", "count_no_ce"])
        for lo, hi, a, b in zip(edges[:-1], edges[1:], cw, cn):
            w.writerow([repr(float(lo)), repr(float(hi)), int(a), int(b)])
    write_cases(os.path.join(out, "cases.csv"), mc.with_cal, mc.no_cal)
    with open(os.path.join(out, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        for k, v in (("sigma", mc.sigma), ("baseline_ber", mc.baseline), ("median_ber", mc.median_with),
                     ("median_ber_no_cal", mc.median_no_cal)):
            w.writerow([k, repr(float(v))])
    with open(os.path.join(out, "config.ini"), "w") as fh:
        fh.write(dumps_config(cfg))
    for r in mc.with_cal:
        write_checkpoints(out, r)


def write_traces(out, r: CaseResult) -> None:
    os.makedirs(out, exist_ok=True)
    for kind, tr in sorted(r.traces.items()):
        tr.to_csv(os.path.join(out, f"trace_{kind}.csv"))


def run_convergence(cfg: RunConfig, d_b_values=(1, 16), sigma: float | None = None, out=None,
                    case_id: int = 0) -> dict[int, CaseResult]:
    """One case per decimation factor (same seed); traces go to ``<out>/DB<d>/trace_<kind>.csv``."""
    cfg.validate()
    s = resolve_sigma(cfg) if sigma is None else sigma
    res = {}
    for d in d_b_values:
        c = cfg.with_(D_B=int(d)).validate()
        r = run_link(c, case_id, [c.mode], s)[c.mode]
        res[int(d)] = r
        if out is not None:
            sub = os.path.join(out, f"DB{int(d)}")
            write_traces(sub, r)
            write_cases(os.path.join(sub, "cases.csv"), [r])
            write_checkpoints(sub, r)
    return res
