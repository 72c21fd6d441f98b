"""Low-level DSP primitives shared by the transmitter, front end and receiver.

Everything here is a pure function of its inputs plus an explicit
:class:`RngStream`.  Convolutions are direct (no FFT) and zero padded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import signal as sps


class ConfigurationError(ValueError):
    """Raised when a parameter is outside its documented domain."""


class ContractViolation(RuntimeError):
    """Raised when a caller does not supply the history a filter needs."""


class RateTag(str, Enum):
    OVERSAMPLED = "oversampled"
    TS = "Ts"
    T = "T"


@dataclass
class RealSignal:
    samples: np.ndarray
    rate_tag: RateTag = RateTag.OVERSAMPLED

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        self.rate_tag = RateTag(self.rate_tag)
        if not np.all(np.isfinite(self.samples)):
            raise ConfigurationError("signal contains non-finite samples")

    def __len__(self):
        return self.samples.shape[-1]


@dataclass
class FirTaps:
    """FIR impulse response with an explicit zero-delay tap index."""

    taps: np.ndarray
    center: int = 0

    def __post_init__(self):
        self.taps = np.atleast_1d(np.asarray(self.taps))
        if self.taps.ndim != 1 or self.taps.size < 1:
            raise ConfigurationError("FIR must have at least one tap")
        if not 0 <= self.center < self.taps.size:
            raise ConfigurationError(f"center {self.center} outside 0..{self.taps.size - 1}")

    def __len__(self):
        return self.taps.size

    @classmethod
    def delta(cls, length: int = 1, center: int | None = None, dtype=float) -> "FirTaps":
        c = (length - 1) // 2 if center is None else center
        h = np.zeros(length, dtype=dtype)
        h[c] = 1
        return cls(h, c)


# ---------------------------------------------------------------------------
# random numbers
# ---------------------------------------------------------------------------


@dataclass
class RngStream:
    """Seeded, splittable random stream.

    Backed by numpy's counter-based Philox-4x64 bit generator.  Child
    streams are derived with ``SeedSequence(seed, spawn_key=path)`` so a
    given ``(seed, path)`` names the same sequence on every platform.
    """

    seed: int
    path: tuple[int, ...] = ()
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        ss = np.random.SeedSequence(int(self.seed), spawn_key=tuple(self.path))
        self._gen = np.random.Generator(np.random.Philox(ss))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def child(self, *key: int) -> "RngStream":
        """Independent stream addressed by ``key`` below this one."""
        return RngStream(self.seed, tuple(self.path) + tuple(int(k) for k in key))

    def uniform(self, lo, hi, size=None):
        return rng_uniform(self, lo, hi, size)

    def normal(self, sigma=1.0, size=None):
        return self._gen.normal(0.0, sigma, size)

    def bits(self, n: int) -> np.ndarray:
        return self._gen.integers(0, 2, size=n, dtype=np.uint8)


def rng_uniform(stream: RngStream, lo, hi, size=None):
    """Draw from U[lo, hi]; a degenerate interval returns ``lo`` exactly."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise ConfigurationError("rng_uniform requires lo <= hi")
    u = stream.generator.random(size)
    out = lo + (hi - lo) * u
    out = np.where(hi == lo, lo, out)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# filter design
# ---------------------------------------------------------------------------


def rrc_pulse(t: np.ndarray, rolloff: float) -> np.ndarray:
    """Root-raised-cosine pulse at times ``t`` in symbol periods (peak 1 - a + 4a/pi)."""
    t = np.asarray(t, dtype=float)
    a = rolloff
    out = np.empty_like(t)
    at_zero = np.abs(t) < 1e-12
    at_sing = np.abs(np.abs(t) - 1.0 / (4 * a)) < 1e-9
    gen = ~(at_zero | at_sing)
    tg = t[gen]
    num = np.sin(np.pi * tg * (1 - a)) + 4 * a * tg * np.cos(np.pi * tg * (1 + a))
    den = np.pi * tg * (1 - (4 * a * tg) ** 2)
    out[gen] = num / den
    out[at_zero] = 1 - a + 4 * a / np.pi
    out[at_sing] = (a / np.sqrt(2)) * (
        (1 + 2 / np.pi) * np.sin(np.pi / (4 * a)) + (1 - 2 / np.pi) * np.cos(np.pi / (4 * a))
    )
    return out


def design_rrc(rolloff: float, span_symbols: int, osf: int) -> FirTaps:
    """Unit-energy root-raised-cosine FIR spanning ``span_symbols`` symbols.

    The taps are the closed-form pulse sampled every ``1/osf`` symbol,
    symmetric about the center tap and scaled to unit energy.
    """
    if not 0 < rolloff <= 1:
        raise ConfigurationError("rolloff must lie in (0, 1]")
    if span_symbols < 4 or osf < 2:
        raise ConfigurationError("need span_symbols >= 4 and osf >= 2")
    n = span_symbols * osf + 1
    c = n // 2
    h = rrc_pulse((np.arange(n) - c) / osf, rolloff)
    return FirTaps(h / np.sqrt(np.sum(h**2)), c)


def fir_filter(x, h: FirTaps) -> np.ndarray:
    """Centered zero-padded FIR: ``out[n] = sum_l h[l] x[n - l + center]``.

    Operates along the last axis and returns the same length as ``x``.
    """
    x = np.asarray(x.samples if isinstance(x, RealSignal) else x)
    full = np.apply_along_axis(np.convolve, -1, x, h.taps) if x.ndim > 1 else np.convolve(x, h.taps)
    n = x.shape[-1]
    return full[..., h.center : h.center + n]


# Blackman window evaluated on a continuous argument; the support is one
# tap wider than the filter so the outermost taps stay nonzero.
def _blackman(x: np.ndarray, length: int) -> np.ndarray:
    w = length + 1
    out = 0.42 + 0.5 * np.cos(2 * np.pi * x / w) + 0.08 * np.cos(4 * np.pi * x / w)
    return np.where(np.abs(x) <= w / 2, out, 0.0)


def windowed_sinc(frac: np.ndarray, length: int) -> np.ndarray:
    """Interpolation kernels for fractional delays ``frac`` (any shape).

    Returns ``frac.shape + (length,)`` taps, each row normalized to unit
    DC gain.  Row ``r`` applied with :func:`fir_filter` semantics delays
    by ``frac[r]`` samples.
    """
    frac = np.asarray(frac, dtype=float)
    c = (length - 1) // 2
    x = np.arange(length) - c - frac[..., None]
    h = np.sinc(x) * _blackman(x, length)
    return h / h.sum(axis=-1, keepdims=True)


def fractional_delay_taps(delay: float, length: int = 33) -> FirTaps:
    """Blackman-windowed sinc with group delay ``center + delay`` samples."""
    if length < 9 or length % 2 == 0:
        raise ConfigurationError("fractional delay length must be odd and >= 9")
    if abs(delay) >= 1:
        raise ConfigurationError("|delay| must be < 1; shift the integer part by index")
    return FirTaps(windowed_sinc(np.asarray(delay), length), (length - 1) // 2)


def delay_taps(delay: float, length: int = 33) -> FirTaps:
    """Arbitrary (integer + fractional) delay as a centered FIR.

    The integer part moves the reference tap; ``length`` must leave room
    for the shift.
    """
    whole = int(np.round(delay))
    frac = delay - whole
    base = windowed_sinc(np.asarray(frac), length)
    pad = abs(whole)
    taps = np.zeros(length + 2 * pad)
    taps[pad + whole : pad + whole + length] = base
    return FirTaps(taps, (length - 1) // 2 + pad)


def interpolate_at(z: np.ndarray, positions: np.ndarray, length: int = 33, origin: int = 0) -> np.ndarray:
    """Evaluate the band-limited signal ``z`` at real-valued sample positions.

    Works along the last axis of ``z``; ``z[..., 0]`` sits at absolute
    index ``origin``.  Raises :class:`ContractViolation` if a kernel would
    leave the buffer.
    """
    positions = np.asarray(positions, dtype=float)
    base = np.rint(positions).astype(np.int64)
    frac = positions - base
    c = (length - 1) // 2
    lo = base - c - origin
    if lo.size and (lo.min() < 0 or lo.max() + length > z.shape[-1]):
        raise ContractViolation("interpolation window outside available samples")
    # sampling at base + frac is filtering with a delay of -frac
    if frac.size > 64:
        uniq, inv = np.unique(frac, return_inverse=True)
    else:
        uniq, inv = None, None
    if uniq is not None and uniq.size * 4 <= frac.size:
        h = windowed_sinc(-uniq, length)[:, ::-1][inv.reshape(frac.shape)]
    else:
        h = windowed_sinc(-frac, length)[..., ::-1]
    idx = lo[..., None] + np.arange(length)
    if positions.ndim == 1:
        return np.einsum("...nl,nl->...n", z[..., idx], h)
    return (z[..., idx] * h).sum(axis=-1)


def lowpass_coefficients(f3db_over_fsim: float) -> tuple[np.ndarray, np.ndarray]:
    """Single-pole lowpass via prewarped bilinear transform (exact 3 dB point)."""
    if not 0 < f3db_over_fsim < 0.5:
        raise ConfigurationError("f3db/fsim must be in (0, 0.5)")
    k = np.tan(np.pi * f3db_over_fsim)
    b = np.array([k, k]) / (1 + k)
    a = np.array([1.0, (k - 1) / (k + 1)])
    return b, a


def first_order_lowpass(x, f3db_over_fsim: float, zi=None):
    """Unit-DC-gain single-pole lowpass; returns ``(y, zf)`` when ``zi`` is given."""
    b, a = lowpass_coefficients(f3db_over_fsim)
    x = np.asarray(x.samples if isinstance(x, RealSignal) else x, dtype=float)
    if zi is None:
        return sps.lfilter(b, a, x)
    return sps.lfilter(b, a, x, zi=zi)
