"""Block-streaming link simulation: transmitter, TI-ADC, CE, FFE and EBP adaptation.

Per-case random streams are children of ``RngStream(master_seed, (case_id,))``:
0 transmit bits, 1 noise, 2 impairment draw, 3 jitter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .afe import (
    AdcConfig,
    ImpairmentRanges,
    ImpairmentSet,
    MixedSignalTrims,
    TiAdcFrontend,
    draw_impairments,
    quantize,
)
from .compeq import CoefBank, ce_filter_block, init_coefbank
from .config import RunConfig
from .ebp import (
    AdaptSchedule,
    AdaptTraceWriter,
    backpropagate,
    ce_gradient_block,
    ce_transpose,
    ce_update,
    decimation_gate,
    gain_update,
    gear_shift,
    halving_gears,
    offset_trim_update,
    offset_update,
    parity_energy,
    phase_update,
    remove_null_modes,
    trim_norm,
)
from .metrics import AlignmentError, MetricKind, MetricTrace, ber_with_lag, mse_trace, sndr_mean, windowed_ber
from .rxdsp import DspFilterBank, ffe_block_update, ffe_windows, slicer
from .signal_core import ConfigurationError, FirTaps, RngStream, design_rrc
from .txchain import (
    PAM4_LEVELS,
    SQRT10,
    ChannelResponse,
    LaneSource,
    GRAY_BITS,
    demap_lanes,
    dgd_channel,
    effective_pulses,
    identity_channel,
    lane_rms,
)

N_LANES = 4
# bit differences between PAM-4 level indices
_HAMMING = (GRAY_BITS[:, None, :] != GRAY_BITS[None, :, :]).sum(axis=2)


class CalibrationError(RuntimeError):
    pass


def _finite_or_zero(a: np.ndarray) -> np.ndarray:
    return np.where(np.isfinite(a), a, 0.0)


def level_index(a: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((a * SQRT10 + 3) / 2), 0, 3).astype(np.int64)


def case_seed(master: int, case_id: int) -> int:
    """64-bit value identifying a case's stream (for reporting)."""
    ss = np.random.SeedSequence(int(master), spawn_key=(int(case_id),))
    return int(ss.generate_state(1, np.uint64)[0])


def build_channel(cfg: RunConfig) -> ChannelResponse:
    if cfg.channel == "identity":
        return identity_channel()
    if cfg.channel == "dgd":
        return dgd_channel(cfg.dgd, cfg.symbol_rate, cfg.osf_T)
    data = np.loadtxt(cfg.fir_file, ndmin=2)
    # columns: re/im pairs of h11 h12 h21 h22; center is the middle row
    if data.shape[1] != 8:
        raise ConfigurationError("FIR channel file needs 8 columns (re, im of h11 h12 h21 h22)")
    c = (data.shape[0] - 1) // 2
    h = [FirTaps(data[:, 2 * q] + 1j * data[:, 2 * q + 1], c) for q in range(4)]
    return ChannelResponse([[h[0], h[1]], [h[2], h[3]]])


def schedule(cfg: RunConfig) -> AdaptSchedule:
    gears = halving_gears(cfg.mu, cfg.mu_o, cfg.mu_g, cfg.mu_t, cfg.gear_stage_blocks, cfg.gear_stages)
    s = AdaptSchedule(cfg.N, cfg.D_B, gears)
    s.validate(cfg.L_gamma, cfg.L_g)
    return s


def zero_ranges() -> ImpairmentRanges:
    return ImpairmentRanges()


# ---------------------------------------------------------------------------
# receiver
# ---------------------------------------------------------------------------


class Receiver:
    """Offset subtraction, CE, MIMO FFE and slicer with EBP adaptation.

    ``mode`` is ``no-cal`` (CE frozen at its pass-through delay),
    ``digital-ce`` or ``mixed-signal`` (no CE; analog trims adapted).
    """

    def __init__(self, cfg: RunConfig, mode: str, truth: np.ndarray, ffe_gain: float, trace: AdaptTraceWriter | None = None):
        self.cfg = cfg
        self.mode = mode
        self.truth = truth
        self.use_ce = mode != "mixed-signal"
        self.adapt = mode != "no-cal"
        self.sched = schedule(cfg)
        self.bank = init_coefbank(cfg.M, cfg.L_g, cfg.constraint, (cfg.constraint_lane, cfg.constraint_phase))
        self.trims = MixedSignalTrims.neutral(cfg.M1, cfg.M2) if mode == "mixed-signal" else None
        l_ce = self.bank.l_d if self.use_ce else 0
        self.D = (cfg.L_gamma // 2 + l_ce) // 2
        self.ffe = DspFilterBank.identity(cfg.L_gamma, 2 * self.D - l_ce, ffe_gain)
        self.ffe_frozen = False
        self.H = (cfg.L_gamma - 1) + 2 * (cfg.L_g - 1) + 4
        self.w_hist = np.zeros((N_LANES, self.H))
        self.x_hist = np.zeros((N_LANES, cfg.L_gamma - 1))
        self.e_hist = np.zeros((N_LANES, self.H))
        self.iteration = 0
        self.start_block = -(-2 * cfg.adapt_start // cfg.N)
        self.trace = trace
        # per-block records
        self.block_mse: list[float] = []
        self.block_first_symbol: list[int] = []
        self.sym_E: list[np.ndarray] = []
        self.sym_err: list[np.ndarray] = []
        self.sym_index: list[np.ndarray] = []
        self.meas_dec: list[np.ndarray] = []
        self.meas_k: list[np.ndarray] = []
        self.meas_from = cfg.n_symbols - cfg.measure_symbols
        self.checkpoints: list[tuple[int, CoefBank]] = []
        self.diverged = False
        self._floor = None
        self._bad = 0
        self._good = self._state()

    def _mu_ffe(self, k_first: int) -> float:
        if self.ffe_frozen:
            return 0.0
        return self.cfg.mu_ffe_train if k_first - self.D < self.cfg.train_symbols else self.cfg.mu_ffe

    def process(self, b: int, y: np.ndarray) -> None:
        cfg = self.cfg
        N, Lg, Lgam, H = cfg.N, cfg.L_g, cfg.L_gamma, self.H
        n0 = b * N
        if self.use_ce:
            w = y - self.bank.o_hat[:, (n0 + np.arange(N)) % cfg.M]
        else:
            w = y
        wext = np.concatenate([self.w_hist, w], axis=1)
        x = ce_filter_block(wext[:, H - (Lg - 1):], self.bank, n0) if self.use_ce else w
        xext = np.concatenate([self.x_hist, x], axis=1)
        win, k = ffe_windows(xext, Lgam, n0, N)
        K = k.size
        sidx = k - self.D
        valid = (sidx >= 0) & (sidx < self.truth.shape[1])
        truth = self.truth[:, np.clip(sidx, 0, self.truth.shape[1] - 1)]
        train = sidx < cfg.train_symbols
        u = np.empty((N_LANES, K))
        dec = np.empty((N_LANES, K))
        e = np.empty((N_LANES, K))
        Ks = cfg.ffe_sub_block
        for s in range(0, K, Ks):
            sl = slice(s, s + Ks)
            us = np.einsum("jil,ikl->jk", self.ffe.gamma, win[:, sl])
            ah = slicer(us)
            ref = np.where(train[sl], truth[:, sl], ah)
            es = (us - ref) * valid[sl]
            mu = self._mu_ffe(int(k[s]))
            if mu:
                ffe_block_update(self.ffe, win[:, sl], es, mu)
            u[:, sl], dec[:, sl], e[:, sl] = us, ah, es
        # metrics
        E = np.sum(e**2, axis=0)
        errs = _HAMMING[level_index(dec), level_index(truth)].sum(axis=0) * valid
        self.sym_E.append(E[valid])
        self.sym_err.append(errs[valid])
        self.sym_index.append(sidx[valid])
        mse = float(E[valid].mean()) if valid.any() else 0.0
        self.block_mse.append(mse)
        self.block_first_symbol.append(int(sidx[0]))
        meas = valid & (sidx >= self.meas_from) & (sidx < cfg.n_symbols)
        if meas.any():
            self.meas_dec.append(dec[:, meas])
            self.meas_k.append(sidx[meas])
        self._watch(b, mse)
        # backpropagation and CE / trim updates
        e_up = np.zeros((N_LANES, N))
        e_up[:, 2 * k - n0] = e
        eext = np.concatenate([self.e_hist, e_up], axis=1)
        if not self._finite():
            self.diverged = True
        if self.diverged:
            self._halt()
        else:
            # this block's MSE was produced by the current coefficients
            if self._floor is None or mse <= 10 * self._floor:
                self._good = self._state()
            if self.adapt and b >= self.start_block and decimation_gate(b - self.start_block, self.sched):
                self._adapt(b, n0, wext, eext)
                if not self._finite():
                    self.diverged = True
                    self._halt()
        self.w_hist = _finite_or_zero(wext[:, wext.shape[1] - H:])
        self.x_hist = _finite_or_zero(xext[:, xext.shape[1] - (Lgam - 1):])
        self.e_hist = _finite_or_zero(eext[:, eext.shape[1] - H:])
        if cfg.checkpoint_every and self.use_ce and (b + 1) % cfg.checkpoint_every == 0:
            self.checkpoints.append((b, self.bank.copy()))

    def _adapt(self, b: int, n0: int, wext: np.ndarray, eext: np.ndarray) -> None:
        cfg = self.cfg
        N, Lg, Lgam, H = cfg.N, cfg.L_g, cfg.L_gamma, self.H
        lag = (Lgam - 1) + (Lg - 1 if self.use_ce else 0)
        s0 = n0 - lag
        n_out = N + (Lg - 1 if self.use_ce else 0)
        gamma = self.ffe.copy()  # frozen snapshot for this block
        e_hat = backpropagate(eext[:, H - lag : H - lag + n_out + Lgam - 1], gamma, n_out)
        mu, mu_o, mu_g, mu_t = gear_shift(self.iteration, self.sched)
        if self.use_ce:
            wseg = wext[:, H - lag - (Lg - 1) : H - lag + N]
            grads = ce_gradient_block(e_hat[:, :N], wseg, s0, cfg.M)
            e_w = ce_transpose(e_hat, self.bank, s0, N)
            ce_update(self.bank, grads, mu)
            offset_update(self.bank, -e_w, s0, mu_o)
            if self.trace:
                self.trace.write(self.iteration, b, "g", self.bank.g, grads)
                self.trace.write(self.iteration, b, "o", self.bank.o_hat)
        else:
            wseg = wext[:, H - lag - 1 : H - lag + N + 1]
            eh = e_hat[:, :N]
            w_mid = wseg[:, 1:-1]
            nrm = dict(g=None, t=None, o=None)
            if cfg.normalize_trims:
                en = parity_energy(gamma)
                slope = wseg[:, 2:] - wseg[:, :-2]
                nrm = dict(g=trim_norm(en, w_mid, s0, cfg.M), t=trim_norm(en, slope, s0, cfg.M1),
                           o=trim_norm(en, np.ones_like(eh), s0, cfg.M))
            gain_update(self.trims, eh, w_mid, s0, mu_g, norm=nrm["g"], null_modes=True)
            phase_update(self.trims, eh, wseg, s0, mu_t, norm=nrm["t"], null_modes=True)
            offset_trim_update(self.trims, -eh, s0, mu_o, norm=nrm["o"])
            if self.trace:
                self.trace.write(self.iteration, b, "gain", self.trims.gain)
                self.trace.write(self.iteration, b, "phase", self.trims.phase)
                self.trace.write(self.iteration, b, "offset", self.trims.offset)
        self.iteration += 1

    def _state(self) -> tuple:
        return (self.bank.copy(), self.ffe.gamma.copy(), None if self.trims is None else self.trims.copy())

    def _finite(self) -> bool:
        arrays = [self.bank.g, self.bank.o_hat, self.ffe.gamma]
        if self.trims is not None:
            arrays += [self.trims.gain, self.trims.phase, self.trims.offset]
        return all(np.isfinite(a).all() for a in arrays)

    def _halt(self) -> None:
        """Stop all adaptation and fall back to the last state that was finite and below the divergence bound."""
        if not self.adapt and self.ffe_frozen:
            return
        bank, gamma, trims = self._good
        self.bank = bank.copy()
        self.ffe.gamma = gamma.copy()
        if trims is not None:
            self.trims = trims.copy()
        self.adapt = False
        self.ffe_frozen = True

    def _watch(self, b: int, mse: float) -> None:
        if not np.isfinite(mse):
            self.diverged = True
            return
        # MSE floor = last block before CE adaptation starts
        if b == self.start_block - 1 or (self._floor is None and b >= self.start_block):
            self._floor = max(mse, 1e-12)
        if self._floor is None or b < self.start_block:
            return
        self._bad = self._bad + 1 if mse > 10 * self._floor else 0
        if self._bad >= 5:
            self.diverged = True

    # -- results ---------------------------------------------------------
    def final_ber(self, bit_source: np.ndarray) -> tuple[float, int, int]:
        if not self.meas_k:
            return float("nan"), 0, 0
        k = np.concatenate(self.meas_k)
        dec = np.concatenate(self.meas_dec, axis=1)
        bits = demap_lanes(dec.T)
        truth = bit_source[8 * k[0] : 8 * (k[-1] + 1)]
        try:
            rate, lag = ber_with_lag(bits, truth, self.cfg.lag_window)
        except AlignmentError:
            # receiver lost lock: flag the case and count errors at the nominal lag
            self.diverged = True
            rate, lag = ber_with_lag(bits, truth, 0, min_agreement=-1.0)
        return rate, lag, bits.size

    def final_mse(self) -> float:
        E = np.concatenate(self.sym_E)
        k = np.concatenate(self.sym_index)
        sel = k >= self.meas_from
        return float(E[sel].mean()) if sel.any() else float("nan")

    def traces(self) -> dict[str, MetricTrace]:
        cfg = self.cfg
        E = np.concatenate(self.sym_E)
        err = np.concatenate(self.sym_err).astype(float)
        k0 = int(np.concatenate(self.sym_index)[0]) if E.size else 0
        out = {"MSE": mse_trace(E, cfg.ber_stride, k0)}
        inst = mse_trace(err / 8.0, cfg.ber_stride, k0)  # bit errors per bit
        out["BER"] = windowed_ber(inst.value, cfg.ber_window, inst.index)
        return out


# ---------------------------------------------------------------------------
# per-case simulation
# ---------------------------------------------------------------------------


@dataclass
class CaseResult:
    case_id: int
    seed: int
    mode: str
    ber: float
    mse: float
    sndr: float
    sndr_start: float
    diverged: bool
    bits: int
    lag: int
    impairments: ImpairmentSet
    bank: CoefBank | None = None
    trims: MixedSignalTrims | None = None
    gamma: DspFilterBank | None = None
    traces: dict = field(default_factory=dict)
    checkpoints: list = field(default_factory=list)
    residual_gain: float = float("nan")
    residual_phase: float = float("nan")
    observable_gain: float = float("nan")
    observable_phase: float = float("nan")
    saturated: int = 0


class Link:
    """Transmitter, channel and TI-ADC for one case."""

    def __init__(self, cfg: RunConfig, case_id: int, ranges: ImpairmentRanges | None = None):
        self.cfg = cfg
        root = RngStream(cfg.seed, (case_id,))
        self.imp = draw_impairments(cfg.ranges() if ranges is None else ranges, cfg.M1, root.child(2), M2=cfg.M2,
                                    bw_nominal=cfg.bandwidth, symbol_rate=cfg.symbol_rate)
        pulse = design_rrc(cfg.rolloff, cfg.pulse_span, cfg.osf_T)
        ch = build_channel(cfg)
        self.scale = cfg.loading * cfg.vfs / (3 * lane_rms(ch, pulse, cfg.osf_T))
        q, qc = effective_pulses(ch, pulse)
        self.ffe_gain = 1.0 / (self.scale * float(np.max(np.abs(q[0, 0].real))))
        pad = (q.shape[-1] + 4 * cfg.osf_T + cfg.interp_len)
        self.source = LaneSource(cfg.n_symbols + 64, ch, pulse, cfg.osf_T, self.scale, root.child(0),
                                 root.child(1), grid_start=-pad)
        self.adc = AdcConfig(cfg.bits, cfg.vfs, cfg.fs, cfg.M, cfg.quantize)
        self.frontend = TiAdcFrontend(self.source, self.imp, self.adc, osf=cfg.osf, symbol_rate=cfg.symbol_rate,
                                      M2=cfg.M2, jitter_rms=cfg.jitter_rms, jitter_rng=root.child(3),
                                      interp_len=cfg.interp_len, lowpass=cfg.lowpass,
                                      chunk=cfg.N * cfg.osf)
        self.truth = self.source.symbols.lanes()
        self.n_blocks = 2 * cfg.n_symbols // cfg.N

    def reference_delay(self, trims: MixedSignalTrims | None) -> np.ndarray:
        """Lane-mean effective sampling delay in grid samples."""
        cfg = self.cfg
        d = cfg.osf_T * (self.imp.phase.mean(axis=1) + self.imp.lane_delay * cfg.symbol_rate)
        if trims is not None:
            d = d + cfg.osf * trims.phase.mean(axis=1)
        return d

    def sndr_of(self, blk, n0: int) -> float:
        obs = blk.signal + blk.offset
        if self.adc.quantize:
            obs = quantize(obs, self.adc)
        vals = [sndr_mean(obs[i], blk.reference[i], n0, self.cfg.M, self.cfg.sndr_average) for i in range(N_LANES)]
        return float(np.mean(vals))


def residual_errors(imp: ImpairmentSet, trims: MixedSignalTrims, osf_ratio: float,
                    observable: bool = False) -> tuple[float, float]:
    """Worst gain error relative to the lane mean and worst sampling-phase spread (in T) after trims.

    With ``observable`` the lane's alternating pattern is removed as well,
    leaving only the components a T-spaced slicer can detect.
    """
    g = np.log(imp.gain * trims.gain)
    t = imp.phase + trims.phase / osf_ratio
    if observable:
        g, t = remove_null_modes(g), remove_null_modes(t)
    else:
        g, t = g - g.mean(axis=1, keepdims=True), t - t.mean(axis=1, keepdims=True)
    return float(np.abs(np.expm1(g)).max()), float(np.abs(t).max())


def run_link(cfg: RunConfig, case_id: int, modes, sigma: float, ranges: ImpairmentRanges | None = None,
             trace_path=None) -> dict[str, CaseResult]:
    """Simulate one case for one or more receive modes sharing the same link.

    Digital modes share one ADC output stream; mixed-signal drives its own
    (trimmed) converter.
    """
    cfg.validate()
    modes = list(modes)
    if "mixed-signal" in modes and len(modes) > 1:
        raise ConfigurationError("mixed-signal runs cannot share a link with other modes")
    link = Link(cfg, case_id, ranges)
    trace = AdaptTraceWriter(trace_path, cfg.trace_updates) if trace_path else None
    rx = {m: Receiver(cfg, m, link.truth, link.ffe_gain, trace) for m in modes}
    mixed = modes == ["mixed-signal"]
    stats: dict = {}
    sndr_series: list[tuple[int, float]] = []
    N = cfg.N
    for b in range(link.n_blocks):
        n0 = b * N
        trims = rx["mixed-signal"].trims if mixed else None
        want_sndr = b % cfg.sndr_every == 0 or b == link.n_blocks - 1
        blk = link.frontend.convert(n0, n0 + N, trims, link.reference_delay(trims) if want_sndr else None)
        y = blk.output(sigma, link.adc, stats)
        if want_sndr:
            sndr_series.append((n0, link.sndr_of(blk, n0)))
        for r in rx.values():
            r.process(b, y)
    if trace:
        trace.close()
    out = {}
    seed = case_seed(cfg.seed, case_id)
    for m, r in rx.items():
        rate, lag, nbits = r.final_ber(link.source.symbols.bit_source)
        traces = r.traces()
        idx, val = zip(*sndr_series)
        traces["SNDR"] = MetricTrace(np.array(idx) // 2, np.array(val), MetricKind.SNDR)
        res = CaseResult(case_id, seed, m, rate, r.final_mse(), float(val[-1]), float(val[0]), r.diverged, nbits,
                         lag, link.imp, r.bank.copy() if r.use_ce else None,
                         r.trims.copy() if r.trims is not None else None, r.ffe.copy(), traces, r.checkpoints,
                         saturated=stats.get("saturated", 0))
        if r.trims is not None:
            res.residual_gain, res.residual_phase = residual_errors(link.imp, r.trims, cfg.Ts_per_T)
            res.observable_gain, res.observable_phase = residual_errors(link.imp, r.trims, cfg.Ts_per_T, True)
        out[m] = res
    return out


def run_case(cfg: RunConfig, case_id: int = 0, sigma: float | None = None, mode: str | None = None,
             ranges: ImpairmentRanges | None = None, trace_path=None) -> CaseResult:
    mode = mode or cfg.mode
    s = cfg.sigma if sigma is None else sigma
    if s < 0:
        raise ConfigurationError("run_case needs a noise sigma; run calibrate_noise first")
    return run_link(cfg, case_id, [mode], s, ranges, trace_path)[mode]


# ---------------------------------------------------------------------------
# noise calibration
# ---------------------------------------------------------------------------


class _CalibLink:
    """Impairment-free ADC blocks kept in signal/noise form for fast sigma sweeps."""

    def __init__(self, cfg: RunConfig, case_id: int):
        self.link = Link(cfg, case_id, zero_ranges())
        N = cfg.N
        self.blocks = [self.link.frontend.convert(b * N, (b + 1) * N) for b in range(self.link.n_blocks)]

    def ber(self, sigma: float) -> tuple[int, int]:
        cfg = self.link.cfg
        r = Receiver(cfg, "no-cal", self.link.truth, self.link.ffe_gain)
        for b, blk in enumerate(self.blocks):
            r.process(b, blk.output(sigma, self.link.adc))
        rate, _, nbits = r.final_ber(self.link.source.symbols.bit_source)
        return int(round(rate * nbits)), nbits


def calibrate_noise(cfg: RunConfig, case_base: int = 1_000_000, max_iter: int = 40) -> float:
    """Bisect (in log sigma) until the impairment-free BER is within tolerance of the target."""
    c = cfg.with_(n_symbols=cfg.calib_symbols, measure_symbols=min(cfg.measure_symbols, cfg.calib_symbols // 2),
                  mode="no-cal").validate()
    links = [_CalibLink(c, case_base + i) for i in range(cfg.calib_cases)]
    target, tol = cfg.target_ber, cfg.calib_tolerance

    def f(sigma):
        e = n = 0
        for lk in links:
            de, dn = lk.ber(sigma)
            e, n = e + de, n + dn
        return e / n

    # first guess from the lane rms; bracket by factors of 2
    lo = hi = 0.1 * cfg.loading * cfg.vfs / 3
    b_lo = b_hi = f(lo)
    it = 0
    while b_lo > target and it < max_iter:
        hi, b_hi = lo, b_lo
        lo /= 2
        b_lo = f(lo)
        it += 1
    while b_hi < target and it < max_iter:
        lo, b_lo = hi, b_hi
        hi *= 2
        b_hi = f(hi)
        it += 1
        if b_hi >= 0.5:
            break
    if not (b_lo <= target <= b_hi):
        raise CalibrationError("could not bracket the target BER")
    for b in (b_lo, b_hi):
        if abs(b - target) <= tol * target:
            return lo if b == b_lo else hi
    while it < max_iter:
        mid = float(np.sqrt(lo * hi))
        bm = f(mid)
        it += 1
        if abs(bm - target) <= tol * target:
            return mid
        if bm < target:
            lo = mid
        else:
            hi = mid
    raise CalibrationError("bisection did not reach the target BER tolerance")


def baseline_ber(cfg: RunConfig, sigma: float, case_ids) -> float:
    """Pooled impairment-free BER of the uncalibrated receiver."""
    e = n = 0
    for c in case_ids:
        r = run_link(cfg, c, ["no-cal"], sigma, zero_ranges())["no-cal"]
        e += r.ber * r.bits
        n += r.bits
    return e / n
