"""Error backpropagation through the receiver FFE and the CE/trim updates.

The baud-rate slicer error is zero-stuffed to T/2 and passed backwards
through the transposed FFE::

    e_hat[i, n] = sum_j sum_l gamma[j, i, l] * e[j, n + l]

which is the derivative of the total squared slicer error with respect to
the CE output (up to the factor ``alpha = 2`` carried by the gradients).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .afe import MixedSignalTrims
from .compeq import CoefBank, enforce_constraint
from .rxdsp import DspFilterBank
from .signal_core import ConfigurationError, ContractViolation

ALPHA = 2.0


def upsample_error(e_k: np.ndarray) -> np.ndarray:
    """Insert a zero after every symbol-rate error sample (last axis)."""
    e_k = np.asarray(e_k, dtype=float)
    out = np.zeros(e_k.shape[:-1] + (2 * e_k.shape[-1],))
    out[..., ::2] = e_k
    return out


def backpropagate(e: np.ndarray, gamma: DspFilterBank, N: int | None = None) -> np.ndarray:
    """Backpropagated error for ``N`` outputs.

    ``e`` is ``(4, N + L - 1)``: output ``n`` reads ``e[:, n : n + L]``.
    """
    e = np.asarray(e, dtype=float)
    L = gamma.L
    if N is None:
        N = e.shape[-1] - (L - 1)
    if N < 0 or e.shape[-1] < N + L - 1:
        raise ContractViolation(f"backpropagation needs {L - 1} lookahead samples")
    ahead = sliding_window_view(e[:, : N + L - 1], L, axis=-1)  # [j, n, l] = e[j, n + l]
    return np.einsum("jil,jnl->in", gamma.gamma, ahead)


def ce_gradient(e_hat_n: float, w_hist) -> np.ndarray:
    """Instantaneous gradient for one sample: ``alpha * e_hat[n] * [w[n], ..., w[n - L_g + 1]]``."""
    return ALPHA * float(e_hat_n) * np.asarray(w_hist, dtype=float)


def ce_gradient_block(e_hat: np.ndarray, w_ext: np.ndarray, n0: int, M: int, average: bool = True) -> np.ndarray:
    """Per-(lane, phase, tap) gradient over a block.

    ``e_hat`` is ``(4, N)`` for indices ``n0 .. n0 + N - 1``; ``w_ext`` is
    ``(4, L_g - 1 + N)`` with the CE history first.  With ``average`` each
    phase is normalized by its number of samples.
    """
    N = e_hat.shape[1]
    L = w_ext.shape[1] - N + 1
    if L < 1:
        raise ContractViolation("CE input history missing")
    win = sliding_window_view(w_ext, L, axis=-1)[..., ::-1]  # [i, n, l] = w[i, n - l]
    ph = (n0 + np.arange(N)) % M
    grad = np.zeros((e_hat.shape[0], M, L))
    for m in range(M):
        sel = ph == m
        if not sel.any():
            continue
        g = np.einsum("in,inl->il", e_hat[:, sel], win[:, sel, :])
        grad[:, m, :] = ALPHA * (g / sel.sum() if average else g)
    return grad


def ce_update(bank: CoefBank, grads: np.ndarray, mu: float) -> CoefBank:
    """``g -= mu * grads`` then re-impose the constrained slot (in place)."""
    if mu < 0:
        raise ConfigurationError("mu must be >= 0")
    if mu:
        bank.g -= mu * grads
    return enforce_constraint(bank)


def ce_transpose(e_hat: np.ndarray, bank: CoefBank, n0: int, N: int) -> np.ndarray:
    """Error at the CE input: ``e_w[n] = sum_l g[(n + l) % M, l] * e_hat[n + l]``.

    ``e_hat`` covers ``n0 .. n0 + N + L_g - 2``.
    """
    L = bank.L_g
    if e_hat.shape[1] < N + L - 1:
        raise ContractViolation("CE transpose needs L_g - 1 lookahead samples")
    ahead = sliding_window_view(e_hat[:, : N + L - 1], L, axis=-1)  # [i, n, l]
    ph = (n0 + np.arange(N)[:, None] + np.arange(L)) % bank.M
    g = bank.g[:, ph, np.arange(L)]  # [i, n, l] = g[i, (n0+n+l) % M, l]
    return np.einsum("inl,inl->in", ahead, g)


def _phase_mean(v: np.ndarray, idx: np.ndarray, P: int, average: bool) -> np.ndarray:
    out = np.zeros((v.shape[0], P))
    for p in range(P):
        sel = idx == p
        if sel.any():
            s = v[:, sel].sum(axis=1)
            out[:, p] = s / sel.sum() if average else s
    return out


def offset_update(bank: CoefBank, e_o: np.ndarray, n0: int, mu_o: float, average: bool = True) -> CoefBank:
    """``o_hat[i, m] -= mu_o * e_o[i, n]`` over the block's phase-``m`` samples (in place).

    With ``average`` the contributions are averaged so each block moves
    ``o_hat`` once per phase.
    """
    if mu_o < 0:
        raise ConfigurationError("mu_o must be >= 0")
    ph = (n0 + np.arange(e_o.shape[1])) % bank.M
    bank.o_hat -= mu_o * _phase_mean(e_o, ph, bank.M, average)
    return bank


def parity_energy(gamma: DspFilterBank) -> np.ndarray:
    """``(4, 2)`` energy of the FFE taps reached by even / odd input samples.

    A sample at index ``n`` reaches the even-indexed slicer outputs only
    through taps ``l`` with ``l = n (mod 2)``.
    """
    g2 = gamma.gamma**2
    return np.stack([g2[:, :, 0::2].sum(axis=(0, 2)), g2[:, :, 1::2].sum(axis=(0, 2))], axis=1)


def trim_norm(energy: np.ndarray, v: np.ndarray, n0: int, P: int) -> np.ndarray:
    """Per-(lane, trim) normalizer: parity tap energy times the mean of ``v**2`` over the trim's samples."""
    idx = (n0 + np.arange(v.shape[1])) % P
    par = energy[:, (np.arange(P) % 2)] if P % 2 == 0 else np.repeat(energy.mean(axis=1, keepdims=True), P, 1)
    return np.maximum(par * _phase_mean(v**2, idx, P, True), 1e-30)


def remove_null_modes(step: np.ndarray) -> np.ndarray:
    """Remove each row's mean and, for an even count, its alternating (-1)**m component.

    With a T/2 equalizer feeding a T-spaced slicer these two patterns are
    absorbed by the equalizer (common gain/delay, odd-tap scaling/shift), so
    the slicer error carries no information about them.
    """
    out = step - step.mean(axis=1, keepdims=True)
    P = step.shape[1]
    if P % 2 == 0 and P > 2:
        alt = (-1.0) ** np.arange(P)
        out -= np.outer(out @ alt / P, alt)
    return out


def gain_update(trims: MixedSignalTrims, e_hat: np.ndarray, w: np.ndarray, n0: int, mu_g: float,
                average: bool = True, norm: np.ndarray | None = None, null_modes: bool = False) -> MixedSignalTrims:
    """``gain[i, s] -= mu_g * e_hat[n] * w[n]`` with ``s = n % (M1*M2)`` (in place).

    ``norm`` (``(4, M1*M2)``) divides the step per trim; ``null_modes``
    drops the step components the slicer cannot observe.
    """
    if mu_g < 0:
        raise ConfigurationError("mu_gamma must be >= 0")
    S = trims.gain.shape[1]
    step = mu_g * _phase_mean(e_hat * w, (n0 + np.arange(w.shape[1])) % S, S, average)
    if norm is not None:
        step /= norm
    if null_modes:
        step = remove_null_modes(step)
    trims.gain -= step
    return trims


def phase_update(trims: MixedSignalTrims, e_hat: np.ndarray, w_ext: np.ndarray, n0: int, mu_t: float,
                 average: bool = True, norm: np.ndarray | None = None, null_modes: bool = False) -> MixedSignalTrims:
    """``phase[i, m1] -= mu_t * e_hat[n] * (w[n+1] - w[n-1])`` with ``m1 = n % M1`` (in place).

    ``w_ext`` is ``(4, N + 2)``: one neighbor on each side of the block.
    ``norm`` (``(4, M1)``) divides the step per trim; see :func:`gain_update`
    for ``null_modes``.
    """
    if mu_t < 0:
        raise ConfigurationError("mu_tau must be >= 0")
    N = e_hat.shape[1]
    if w_ext.shape[1] < N + 2:
        raise ContractViolation("phase update needs one neighbor on each side")
    slope = w_ext[:, 2 : N + 2] - w_ext[:, :N]
    M1 = trims.phase.shape[1]
    step = mu_t * _phase_mean(e_hat * slope, (n0 + np.arange(N)) % M1, M1, average)
    if norm is not None:
        step /= norm
    if null_modes:
        step = remove_null_modes(step)
    trims.phase -= step
    return trims


def offset_trim_update(trims: MixedSignalTrims, e_o: np.ndarray, n0: int, mu_o: float,
                       average: bool = True, norm: np.ndarray | None = None) -> MixedSignalTrims:
    """``offset[i, s] -= mu_o * e_o[i, n]`` over sub-ADC ``s = n % (M1*M2)`` (in place)."""
    if mu_o < 0:
        raise ConfigurationError("mu_o must be >= 0")
    S = trims.offset.shape[1]
    step = mu_o * _phase_mean(e_o, (n0 + np.arange(e_o.shape[1])) % S, S, average)
    trims.offset -= step if norm is None else step / norm
    return trims


# ---------------------------------------------------------------------------
# scheduling
# ---------------------------------------------------------------------------


@dataclass
class AdaptSchedule:
    """Block size, block decimation and gear table rows ``(threshold, mu, mu_o, mu_g, mu_t)``."""

    N: int = 4096
    D_B: int = 1
    gears: list = field(default_factory=lambda: [(0, 1e-3, 1e-3, 1e-3, 1e-3)])

    def validate(self, L_gamma: int = 1, L_g: int = 1):
        if self.N < L_gamma + L_g:
            raise ConfigurationError("block size N must be >= L_gamma + L_g")
        if self.D_B < 1:
            raise ConfigurationError("D_B must be >= 1")
        if not self.gears:
            raise ConfigurationError("gear table is empty")
        th = [row[0] for row in self.gears]
        if th != sorted(th):
            raise ConfigurationError("gear thresholds must be ascending")
        if any(v < 0 for row in self.gears for v in row[1:]):
            raise ConfigurationError("step sizes must be >= 0")


def decimation_gate(block_index: int, sched: AdaptSchedule) -> bool:
    return block_index % sched.D_B == 0


def gear_shift(iteration: int, sched: AdaptSchedule) -> tuple[float, float, float, float]:
    """Step sizes of the last gear whose threshold is <= ``iteration``."""
    if not sched.gears:
        raise ConfigurationError("gear table is empty")
    row = sched.gears[0]
    for r in sched.gears:
        if r[0] <= iteration:
            row = r
        else:
            break
    return tuple(float(v) for v in row[1:5])


def halving_gears(mu, mu_o, mu_g, mu_t, stage_len: int, stages: int = 4) -> list:
    """Gear table that halves every step size at each of ``stages`` stages."""
    return [(k * stage_len, mu / 2**k, mu_o / 2**k, mu_g / 2**k, mu_t / 2**k) for k in range(stages)]


class AdaptTraceWriter:
    """Per-update CSV rows, written only when ``verbose``."""

    header = ("iteration", "block", "lane", "phase", "kind", "value", "grad_norm")

    def __init__(self, path=None, verbose: bool = False):
        self.verbose = bool(verbose and path is not None)
        self._fh = open(path, "w", newline="") if self.verbose else None
        self._w = csv.writer(self._fh) if self._fh else None
        if self._w:
            self._w.writerow(self.header)

    def write(self, iteration, block, kind, values: np.ndarray, grads: np.ndarray | None = None):
        if not self._w:
            return
        # values: (lane, phase) or (lane, phase, tap); gradient norm per (lane, phase)
        for lane in range(values.shape[0]):
            for ph in range(values.shape[1]):
                v = values[lane, ph]
                gn = 0.0 if grads is None else float(np.linalg.norm(grads[lane, ph]))
                val = float(np.linalg.norm(v)) if np.ndim(v) else float(v)
                self._w.writerow((iteration, block, lane, ph, kind, repr(val), repr(gn)))

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None
