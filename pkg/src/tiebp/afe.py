"""Analog front end and time-interleaved ADC impairment model.

Sample ``n`` of a lane is taken by sub-ADC ``s = n mod (M1*M2)`` whose
rank-1 switch is ``m1 = n mod M1``.  Sampling phase errors follow the
switch; gain, offset and bandwidth follow the sub-ADC.  A flat TI-ADC is
the special case ``M2 = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .signal_core import (
    ConfigurationError,
    RealSignal,
    RngStream,
    interpolate_at,
    lowpass_coefficients,
)
from scipy import signal as sps

N_LANES = 4


@dataclass
class AdcConfig:
    bits: int = 8
    vfs: float = 1.0
    fs: float = 192e9
    M: int = 8
    quantize: bool = True

    def __post_init__(self):
        if self.bits < 2:
            raise ConfigurationError("ADC needs at least 2 bits")

    @property
    def step(self) -> float:
        return 2 * self.vfs / 2**self.bits


@dataclass
class HierarchicalConfig:
    M1: int
    M2: int = 1
    jitter_rms: float = 0.0

    def __post_init__(self):
        if self.M1 < 1 or self.M2 < 1:
            raise ConfigurationError("M1 and M2 must be >= 1")

    @property
    def n_subadc(self) -> int:
        return self.M1 * self.M2


@dataclass
class ImpairmentRanges:
    """Uniform draw intervals; phase and skew in symbol periods, bandwidth relative to B0."""

    gain: tuple[float, float] = (0.0, 0.0)
    phase: tuple[float, float] = (0.0, 0.0)
    bandwidth: tuple[float, float] = (0.0, 0.0)
    skew: tuple[float, float] = (0.0, 0.0)
    offset: tuple[float, float] = (0.0, 0.0)

    @classmethod
    def table_one(cls) -> "ImpairmentRanges":
        return cls(gain=(-0.15, 0.15), phase=(-0.10, 0.10), bandwidth=(-0.075, 0.075),
                   skew=(-0.10, 0.10), offset=(-0.025, 0.025))

    def validate(self):
        for name in ("gain", "phase", "bandwidth", "skew", "offset"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigurationError(f"{name} range is inverted")
        if self.gain[0] <= -1:
            raise ConfigurationError("gain error range must keep gain positive")
        if max(abs(v) for v in self.phase) >= 0.5:
            raise ConfigurationError("phase errors must stay within half a period")
        if self.bandwidth[0] <= -1:
            raise ConfigurationError("bandwidth range must keep bandwidth positive")


@dataclass
class ImpairmentSet:
    """Per-lane mismatch realization.

    ``gain``, ``offset`` and ``bandwidth`` are ``(4, M1*M2)``; ``phase`` is
    ``(4, M1)`` in fractions of T; ``lane_delay`` is ``(4,)`` seconds.
    """

    gain: np.ndarray
    phase: np.ndarray
    offset: np.ndarray
    bandwidth: np.ndarray
    lane_delay: np.ndarray
    bw_nominal: float

    def __post_init__(self):
        if np.any(self.gain <= 0):
            raise ConfigurationError("gains must be positive")
        if np.any(np.abs(self.phase) >= 0.5):
            raise ConfigurationError("|phase error| must be < T/2")

    @property
    def M1(self) -> int:
        return self.phase.shape[1]

    @property
    def n_subadc(self) -> int:
        return self.gain.shape[1]

    @classmethod
    def identity(cls, M1: int, M2: int = 1, bw_nominal: float = 53e9) -> "ImpairmentSet":
        S = M1 * M2
        return cls(np.ones((N_LANES, S)), np.zeros((N_LANES, M1)), np.zeros((N_LANES, S)),
                   np.full((N_LANES, S), bw_nominal), np.zeros(N_LANES), bw_nominal)

    def iq_skew(self) -> tuple[float, float]:
        """(tau_H, tau_V) in seconds."""
        d = self.lane_delay
        return float(d[0] - d[1]), float(d[2] - d[3])


def draw_impairments(ranges: ImpairmentRanges, M1: int, rng: RngStream, *, M2: int = 1,
                     bw_nominal: float = 53e9, symbol_rate: float = 96e9) -> ImpairmentSet:
    """Independent uniform mismatch draws per lane and sub-ADC.

    Draw order: gain, phase, bandwidth, offset arrays, then the two I/Q
    skews; each lane pair splits its skew symmetrically.
    """
    ranges.validate()
    S = M1 * M2
    gain = 1.0 + rng.uniform(*ranges.gain, size=(N_LANES, S))
    phase = rng.uniform(*ranges.phase, size=(N_LANES, M1))
    bw = bw_nominal * (1.0 + rng.uniform(*ranges.bandwidth, size=(N_LANES, S)))
    off = rng.uniform(*ranges.offset, size=(N_LANES, S))
    skew = rng.uniform(*ranges.skew, size=2) / symbol_rate
    delay = np.array([skew[0] / 2, -skew[0] / 2, skew[1] / 2, -skew[1] / 2])
    return ImpairmentSet(np.atleast_2d(gain), np.atleast_2d(phase), np.atleast_2d(off),
                         np.atleast_2d(bw), delay, bw_nominal)


def quantize(x, adc: AdcConfig, stats: dict | None = None):
    """Mid-rise uniform quantizer with silent saturation at +-(VFS - step/2).

    If ``stats`` is given its ``"saturated"`` entry is incremented by the
    number of clipped samples.
    """
    d = adc.step
    x = np.asarray(x, dtype=float)
    q = (np.floor(x / d) + 0.5) * d
    top = adc.vfs - d / 2
    if stats is not None:
        stats["saturated"] = stats.get("saturated", 0) + int(np.count_nonzero(np.abs(q) > top))
    q = np.clip(q, -top, top)
    return float(q) if q.ndim == 0 else q


def hierarchical_index(n, cfg: HierarchicalConfig):
    """(rank-1 switch, rank-2 stage) serving sample ``n``."""
    return n % cfg.M1, (n // cfg.M1) % cfg.M2


def apply_jitter(instants, jitter_rms: float, rng: RngStream) -> np.ndarray:
    instants = np.asarray(instants, dtype=float)
    if jitter_rms < 0:
        raise ConfigurationError("jitter_rms must be >= 0")
    if jitter_rms == 0:
        return instants.copy()
    return instants + rng.normal(jitter_rms, instants.shape)


@dataclass
class MixedSignalTrims:
    """Analog corrections applied inside the sampler.

    Effective sample: ``Q(gain * g_trim * v(t + phase_trim*Ts) + offset - o_trim)``
    so convergence drives ``gain*g_trim`` to a common value, ``phase_trim*Ts``
    to cancel the switch phase error and ``o_trim`` to the offset.
    """

    gain: np.ndarray
    phase: np.ndarray
    offset: np.ndarray

    @classmethod
    def neutral(cls, M1: int, M2: int = 1) -> "MixedSignalTrims":
        S = M1 * M2
        return cls(np.ones((N_LANES, S)), np.zeros((N_LANES, M1)), np.zeros((N_LANES, S)))

    def copy(self) -> "MixedSignalTrims":
        return MixedSignalTrims(self.gain.copy(), self.phase.copy(), self.offset.copy())


@dataclass
class AdcBlock:
    """Pre-quantization pieces of a converted block; combine with :meth:`output`."""

    start: int
    signal: np.ndarray
    noise: np.ndarray
    offset: np.ndarray
    reference: np.ndarray | None = None

    def analog(self, sigma: float) -> np.ndarray:
        return self.signal + sigma * self.noise + self.offset

    def output(self, sigma: float, adc: AdcConfig, stats: dict | None = None) -> np.ndarray:
        x = self.analog(sigma)
        return quantize(x, adc, stats) if adc.quantize else x


class TiAdcFrontend:
    """Streaming AFE + TI-ADC for the four lanes.

    Pulls grid chunks from a :class:`~tiebp.txchain.LaneSource`, applies the
    per-sub-ADC lowpass (one recursive filter per distinct bandwidth), and
    samples with windowed-sinc interpolation at the impaired instants.
    """

    def __init__(self, source, imp: ImpairmentSet, adc: AdcConfig, *, osf: int, symbol_rate: float,
                 M2: int = 1, jitter_rms: float = 0.0, jitter_rng: RngStream | None = None,
                 interp_len: int = 33, lowpass: bool = True, reference: bool = False, chunk: int = 1 << 15):
        self.source = source
        self.imp = imp
        self.adc = adc
        self.osf = osf
        self.T = 1.0 / symbol_rate
        self.osf_T = source.osf_T
        self.dt = self.T / self.osf_T
        self.M1 = imp.M1
        self.S = imp.n_subadc
        if self.S != self.M1 * M2:
            raise ConfigurationError("impairment shape does not match M1*M2")
        self.jitter_rms = jitter_rms
        self.jitter_rng = jitter_rng
        if jitter_rms > 0 and jitter_rng is None:
            raise ConfigurationError("jitter needs an RNG stream")
        self.interp_len = interp_len
        self.chunk = chunk
        self.margin = 4 * self.osf_T + interp_len
        fsim = self.osf_T * symbol_rate
        bw = imp.bandwidth
        # bandwidth classes per lane: class 0 is always the nominal bandwidth
        self.cls_bw = []
        self.cls_of = np.zeros((N_LANES, self.S), dtype=np.int64)
        for i in range(N_LANES):
            values = [imp.bw_nominal] + [b for b in np.unique(bw[i]) if b != imp.bw_nominal]
            self.cls_bw.append(values)
            for s in range(self.S):
                self.cls_of[i, s] = values.index(bw[i, s])
        self.lowpass = lowpass
        self._coef = [[lowpass_coefficients(b / fsim) if lowpass else None for b in row] for row in self.cls_bw]
        self._zi = [[np.zeros((2, 1)) for _ in row] for row in self.cls_bw]
        self._buf = [[np.zeros((2, 0)) for _ in row] for row in self.cls_bw]
        self.buf_start = source.grid_end
        self.reference = reference
        self.stats: dict = {}

    # -- grid management -------------------------------------------------
    def _extend(self, grid_end: int):
        while self.buf_start + self._buf[0][0].shape[1] < grid_end:
            sig, noise = self.source.next_chunk(self.chunk)
            for i in range(N_LANES):
                x = np.stack([sig[i], noise[i]])
                for c, coef in enumerate(self._coef[i]):
                    if coef is None:
                        y = x
                    else:
                        y, self._zi[i][c] = sps.lfilter(coef[0], coef[1], x, axis=1, zi=self._zi[i][c])
                    self._buf[i][c] = np.concatenate([self._buf[i][c], y], axis=1)

    def _trim(self, grid_keep: int):
        drop = grid_keep - self.buf_start
        if drop > 0:
            for row in self._buf:
                for c in range(len(row)):
                    row[c] = row[c][:, drop:]
            self.buf_start += drop

    # -- sampling --------------------------------------------------------
    def instants(self, n: np.ndarray, lane: int, trims: MixedSignalTrims | None = None) -> np.ndarray:
        """Grid positions of samples ``n`` for ``lane`` (before jitter)."""
        m1 = n % self.M1
        delay_T = self.imp.phase[lane, m1] + self.imp.lane_delay[lane] / self.T
        pos = self.osf * n + self.osf_T * delay_T
        if trims is not None:
            pos = pos + self.osf * trims.phase[lane, m1]
        return pos

    def convert(self, n0: int, n1: int, trims: MixedSignalTrims | None = None,
                reference_delay: np.ndarray | None = None) -> AdcBlock:
        """Convert samples ``[n0, n1)`` on all lanes.

        ``reference_delay`` (grid samples, per lane) requests an ideal,
        unimpaired sampling of the noise-free nominal-bandwidth signal.
        """
        n = np.arange(n0, n1)
        pos = np.stack([self.instants(n, i, trims) for i in range(N_LANES)])
        if self.jitter_rms > 0:
            pos = pos + self.jitter_rng.normal(self.jitter_rms / self.dt, pos.shape)
        half = self.interp_len // 2 + 2
        lo = float(pos.min()) - half
        hi = float(pos.max()) + half
        if reference_delay is not None:
            lo = min(lo, self.osf * n0 + float(np.min(reference_delay)) - half)
            hi = max(hi, self.osf * (n1 - 1) + float(np.max(reference_delay)) + half)
        if lo < self.buf_start:
            raise RuntimeError("requested samples already discarded")
        self._extend(int(np.ceil(hi)) + 1)
        s = n % self.S
        sig = np.empty((N_LANES, n.size))
        noi = np.empty((N_LANES, n.size))
        ref = np.empty((N_LANES, n.size)) if reference_delay is not None else None
        for i in range(N_LANES):
            cls = self.cls_of[i, s]
            for c in np.unique(cls):
                sel = cls == c
                buf = self._buf[i][c]
                both = interpolate_at(buf, pos[i, sel], self.interp_len, origin=self.buf_start)
                sig[i, sel], noi[i, sel] = both[0], both[1]
            if ref is not None:
                rpos = self.osf * n + reference_delay[i]
                ref[i] = interpolate_at(self._buf[i][0][0], rpos, self.interp_len, origin=self.buf_start)
        gain = self.imp.gain[:, s]
        off = self.imp.offset[:, s].copy()
        if trims is not None:
            gain = gain * trims.gain[:, s]
            off = off - trims.offset[:, s]
        self._trim(int(np.floor(lo)) - self.margin)
        return AdcBlock(n0, gain * sig, gain * noi, off, ref)


def apply_afe_lane(s_lane, imp: ImpairmentSet, lane: int, adc: AdcConfig, *, osf: int, osf_T: int,
                   symbol_rate: float, interp_len: int = 33, lowpass: bool = True,
                   n_samples: int | None = None) -> RealSignal:
    """Digitize one whole oversampled lane waveform (grid index 0 = sample 0)."""
    x = np.asarray(s_lane.samples if isinstance(s_lane, RealSignal) else s_lane, dtype=float)
    fsim = osf_T * symbol_rate
    T = 1.0 / symbol_rate
    half = interp_len // 2 + 2
    margin = int(osf_T * (np.max(np.abs(imp.phase[lane])) + abs(imp.lane_delay[lane]) / T)) + half + 1
    if n_samples is None:
        n_samples = (x.size - margin) // osf
    n = np.arange(n_samples)
    s = n % imp.n_subadc
    m1 = n % imp.M1
    pos = osf * n + osf_T * (imp.phase[lane, m1] + imp.lane_delay[lane] / T)
    # zero history before the signal start
    pad = margin + half
    xp = np.concatenate([np.zeros(pad), x])
    out = np.empty(n_samples)
    for b in np.unique(imp.bandwidth[lane]):
        sel = imp.bandwidth[lane, s] == b
        z = sps.lfilter(*lowpass_coefficients(b / fsim), xp) if lowpass else xp
        out[sel] = interpolate_at(z, pos[sel], interp_len, origin=-pad)
    y = imp.gain[lane, s] * out + imp.offset[lane, s]
    if adc.quantize:
        y = quantize(y, adc)
    return RealSignal(y, "Ts")
