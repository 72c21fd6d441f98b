"""4x4 real MIMO T/2 feed-forward equalizer, per-lane 4-PAM slicer and LMS.

Slicer inputs are produced at even sample indices only::

    u[j, k] = sum_i sum_l gamma[j, i, l] * x[i, 2k - l]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .signal_core import ConfigurationError, ContractViolation
from .txchain import PAM4_LEVELS

N_LANES = 4


@dataclass
class DspFilterBank:
    gamma: np.ndarray  # (out j, in i, tap l)

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float)
        if self.gamma.ndim != 3 or self.gamma.shape[:2] != (N_LANES, N_LANES) or self.gamma.shape[2] < 1:
            raise ConfigurationError("gamma must have shape (4, 4, L) with L >= 1")
        if not np.all(np.isfinite(self.gamma)):
            raise ConfigurationError("gamma has non-finite taps")

    @property
    def L(self) -> int:
        return self.gamma.shape[2]

    def copy(self) -> "DspFilterBank":
        return DspFilterBank(self.gamma.copy())

    @classmethod
    def identity(cls, L: int, main: int = 0, gain: float = 1.0) -> "DspFilterBank":
        g = np.zeros((N_LANES, N_LANES, L))
        g[np.arange(N_LANES), np.arange(N_LANES), main] = gain
        return cls(g)


@dataclass
class SlicerRecord:
    k: int
    u: np.ndarray
    a_hat: np.ndarray

    @property
    def e(self) -> np.ndarray:
        return self.u - self.a_hat


def ffe_windows(ext: np.ndarray, L: int, n0: int, N: int) -> tuple[np.ndarray, np.ndarray]:
    """Input windows at the even indices of ``[n0, n0 + N)``.

    ``ext`` holds ``L - 1`` history samples followed by the frame starting
    at absolute index ``n0``.  Returns ``(win, k)`` with
    ``win[i, k, l] = x[i, 2k - l]``.
    """
    if ext.shape[-1] < L - 1 + N:
        raise ContractViolation(f"FFE needs {L - 1} history samples")
    first = n0 + (n0 % 2)
    n_even = np.arange(first, n0 + N, 2)
    win = sliding_window_view(ext, L, axis=-1)[..., ::-1]
    return win[:, n_even - n0, :], n_even // 2


def mimo_ffe(ext: np.ndarray, bank: DspFilterBank, n0: int, N: int | None = None):
    """Slicer inputs for the even indices of a frame; returns ``(u (4, K), k)``."""
    ext = np.asarray(ext, dtype=float)
    if N is None:
        N = ext.shape[-1] - (bank.L - 1)
    win, k = ffe_windows(ext, bank.L, n0, N)
    return np.einsum("jil,ikl->jk", bank.gamma, win), k


_MIDPOINTS = 0.5 * (PAM4_LEVELS[1:] + PAM4_LEVELS[:-1])


def slicer(u, levels=PAM4_LEVELS):
    """Nearest level; exact midpoints go to the lower level."""
    levels = np.asarray(levels, dtype=float)
    if levels.size == 0:
        raise ConfigurationError("alphabet is empty")
    mids = _MIDPOINTS if levels is PAM4_LEVELS else 0.5 * (levels[1:] + levels[:-1])
    idx = np.searchsorted(mids, np.asarray(u, dtype=float), side="left")
    out = levels[idx]
    return float(out) if np.ndim(out) == 0 else out


def slicer_error(u, a_hat) -> tuple[np.ndarray, float]:
    e = np.asarray(u, dtype=float) - np.asarray(a_hat, dtype=float)
    return e, float(np.sum(e**2))


def ffe_lms_update(bank: DspFilterBank, xwin: np.ndarray, e: np.ndarray, mu: float) -> DspFilterBank:
    """Single-symbol LMS: ``gamma[j, i, l] -= mu * e[j] * x[i, 2k - l]``.

    ``xwin`` is ``(4, L)`` with ``xwin[i, l] = x[i, 2k - l]``.
    """
    if mu < 0:
        raise ConfigurationError("mu_ffe must be >= 0")
    out = bank.copy()
    out.gamma -= mu * np.einsum("j,il->jil", np.asarray(e, dtype=float), np.asarray(xwin, dtype=float))
    return out


def ffe_block_update(bank: DspFilterBank, win: np.ndarray, e: np.ndarray, mu: float,
                     normalize: bool = True) -> None:
    """In-place block LMS averaged over the ``K`` symbols of ``win`` (4, K, L) and ``e`` (4, K).

    With ``normalize`` the step is divided by the mean window energy
    (block NLMS), making ``mu`` independent of the input scale.
    """
    K = e.shape[1]
    if K:
        step = mu / K
        if normalize:
            step /= max(float(np.sum(win**2)) / K, 1e-30)
        bank.gamma -= step * np.einsum("jk,ikl->jil", e, win)

