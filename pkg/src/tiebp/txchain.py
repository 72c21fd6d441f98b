"""Dual-polarization 16-QAM transmitter, 2x2 MIMO channel and AWGN.

Lanes are numbered 0..3 for (H,I), (H,Q), (V,I), (V,Q).  Time runs on a
simulation grid of ``osf_T`` samples per symbol; symbol ``k`` is centered
on grid index ``k * osf_T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .signal_core import ConfigurationError, FirTaps, RealSignal, RngStream, delay_taps

SQRT10 = np.sqrt(10.0)
PAM4_LEVELS = np.array([-3.0, -1.0, 1.0, 3.0]) / SQRT10
# level index -> Gray bit pair
GRAY_BITS = np.array([[0, 0], [0, 1], [1, 1], [1, 0]], dtype=np.uint8)


@dataclass
class SymbolStream:
    hpol: np.ndarray
    vpol: np.ndarray
    bit_source: np.ndarray

    def __len__(self):
        return self.hpol.size

    def lanes(self) -> np.ndarray:
        """Real per-lane symbol components, shape ``(4, K)``."""
        return np.stack([self.hpol.real, self.hpol.imag, self.vpol.real, self.vpol.imag])


def pam4_from_bits(b0: np.ndarray, b1: np.ndarray) -> np.ndarray:
    idx = (b0.astype(np.int64) ^ b1.astype(np.int64)) + 2 * b0.astype(np.int64)
    # (0,0)->0 (0,1)->1 (1,1)->2 (1,0)->3
    return PAM4_LEVELS[idx]


def map_qam16(bits) -> SymbolStream:
    """Gray-mapped unit-energy 16-QAM, 8 bits per (H, V) symbol pair.

    Bits ``8k..8k+3`` form the H symbol (I pair then Q pair) and
    ``8k+4..8k+7`` the V symbol.
    """
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.size % 8:
        raise ConfigurationError("bit count must be a multiple of 8")
    b = bits.reshape(-1, 8)
    lanes = [pam4_from_bits(b[:, 2 * q], b[:, 2 * q + 1]) for q in range(4)]
    return SymbolStream(lanes[0] + 1j * lanes[1], lanes[2] + 1j * lanes[3], bits)


def demap_lanes(levels: np.ndarray) -> np.ndarray:
    """Inverse of :func:`map_qam16` for per-lane decisions of shape ``(K, 4)``.

    Returns the flat bit sequence (8 bits per symbol pair).
    """
    idx = np.clip(np.rint((np.asarray(levels) * SQRT10 + 3) / 2), 0, 3).astype(np.int64)
    return GRAY_BITS[idx].reshape(idx.shape[0], 8).ravel()


@dataclass
class ChannelResponse:
    """2x2 complex FIRs ``h[m][n]`` on the simulation grid, all sharing one center."""

    h: list[list[FirTaps]]

    def __post_init__(self):
        lens = {len(t) for row in self.h for t in row}
        centers = {t.center for row in self.h for t in row}
        if len(lens) != 1 or len(centers) != 1:
            raise ConfigurationError("channel entries must share length and center")

    @property
    def center(self) -> int:
        return self.h[0][0].center

    def array(self) -> np.ndarray:
        return np.array([[t.taps for t in row] for row in self.h], dtype=complex)


def identity_channel() -> ChannelResponse:
    one = FirTaps(np.array([1.0 + 0j]), 0)
    zero = FirTaps(np.array([0.0 + 0j]), 0)
    return ChannelResponse([[one, zero], [zero, one]])


def dgd_channel(dgd_seconds: float, symbol_rate: float, osf_T: int, length: int = 33) -> ChannelResponse:
    """First-order PMD: delays of +-DGD/2 on principal axes rotated by 45 degrees."""
    half = 0.5 * dgd_seconds * symbol_rate * osf_T  # grid samples
    if abs(dgd_seconds * symbol_rate) > 2:
        raise ConfigurationError("DGD beyond two symbol periods")
    if dgd_seconds == 0:
        return identity_channel()
    fast = delay_taps(-half, length)
    slow = delay_taps(half, length)
    c = s = np.sqrt(0.5)
    # H = R^T diag(fast, slow) R with R = [[c, s], [-s, c]]
    h11 = c * c * fast.taps + s * s * slow.taps
    h22 = s * s * fast.taps + c * c * slow.taps
    h12 = c * s * (fast.taps - slow.taps)
    mk = lambda t: FirTaps(t.astype(complex), fast.center)  # noqa: E731
    return ChannelResponse([[mk(h11), mk(h12)], [mk(h12), mk(h22)]])


def effective_pulses(ch: ChannelResponse, pulse: FirTaps) -> tuple[np.ndarray, int]:
    """Channel response convolved with the transmit pulse, shape ``(2, 2, L)``."""
    h = ch.array()
    q = np.array([[np.convolve(h[m, n], pulse.taps) for n in range(2)] for m in range(2)])
    return q, ch.center + pulse.center


def shape_block(a: np.ndarray, q: np.ndarray, q_center: int, osf_T: int, k0: int, g0: int, g1: int) -> np.ndarray:
    """Grid samples ``[g0, g1)`` of the mixed waveforms for symbols starting at ``k0``.

    ``a`` is ``(2, K)`` complex (H, V); symbols outside ``a`` are zero.
    Returns the four real lanes, shape ``(4, g1 - g0)``.
    """
    out = np.zeros((2, g1 - g0), dtype=complex)
    if a.shape[1] == 0:
        return np.zeros((4, g1 - g0))
    for n in range(2):
        for m in range(2):
            full = sps.upfirdn(q[m, n], a[n], up=osf_T)
            start = k0 * osf_T - q_center  # grid index of full[0]
            lo, hi = max(g0, start), min(g1, start + full.size)
            if hi > lo:
                out[m, lo - g0 : hi - g0] += full[lo - start : hi - start]
    return np.stack([out[0].real, out[0].imag, out[1].real, out[1].imag])


def shape_and_mix(sym: SymbolStream, ch: ChannelResponse, pulse: FirTaps, osf_T: int) -> list[RealSignal]:
    """Pulse shaping plus 2x2 channel for a whole symbol block.

    Output covers grid indices ``0 .. K*osf_T - 1``.
    """
    if sym.hpol.size != sym.vpol.size:
        raise ConfigurationError("H and V symbol streams differ in length")
    q, qc = effective_pulses(ch, pulse)
    a = np.stack([sym.hpol, sym.vpol])
    lanes = shape_block(a, q, qc, osf_T, 0, 0, a.shape[1] * osf_T)
    return [RealSignal(x) for x in lanes]


def add_awgn(x, sigma: float, rng: RngStream) -> np.ndarray:
    if sigma < 0:
        raise ConfigurationError("sigma must be >= 0")
    x = np.asarray(x.samples if isinstance(x, RealSignal) else x, dtype=float)
    if sigma == 0:
        return x.copy()
    return x + rng.normal(sigma, x.shape)


class LaneSource:
    """Streams the four noise-free lane waveforms and unit-variance noise.

    All symbols are drawn up front from ``bits_rng``; grid samples are
    produced in increasing, contiguous chunks so the noise stream is
    independent of chunk size.
    """

    def __init__(self, n_symbols: int, ch: ChannelResponse, pulse: FirTaps, osf_T: int,
                 scale: float, bits_rng: RngStream, noise_rng: RngStream, grid_start: int = 0):
        self.osf_T = osf_T
        self.symbols = map_qam16(bits_rng.bits(8 * n_symbols))
        self._a = np.stack([self.symbols.hpol, self.symbols.vpol]) * scale
        self.q, self.q_center = effective_pulses(ch, pulse)
        self._noise = noise_rng
        self.grid_end = grid_start

    def __len__(self):
        return len(self.symbols)

    def next_chunk(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        g0, g1 = self.grid_end, self.grid_end + n
        L = self.q.shape[-1]
        k0 = max(0, (g0 - (L - 1 - self.q_center)) // self.osf_T - 1)
        k1 = min(self._a.shape[1], (g1 + self.q_center) // self.osf_T + 2)
        sig = shape_block(self._a[:, k0:k1], self.q, self.q_center, self.osf_T, k0, g0, g1)
        noise = self._noise.normal(1.0, (n, 4)).T  # time-major: chunking does not reorder draws
        self.grid_end = g1
        return sig, noise


def lane_rms(ch: ChannelResponse, pulse: FirTaps, osf_T: int) -> float:
    """Predicted RMS of a lane waveform for unit-energy 16-QAM symbols."""
    q, _ = effective_pulses(ch, pulse)
    per_pol = 0.5 * np.sum(np.abs(q) ** 2, axis=(1, 2)) / osf_T
    return float(np.sqrt(per_pol.max()))
