"""Compensation equalizer: offset subtraction and an M-periodic FIR per lane.

For lane ``i`` and absolute sample index ``n``::

    w[n] = y[n] - o_hat[i, n % M]
    x[n] = sum_l g[i, n % M, l] * w[n - l]

Lanes are 0-based here (0..3 for H-I, H-Q, V-I, V-Q).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .signal_core import ConfigurationError, ContractViolation

N_LANES = 4
FORMAT_TAG = "# coefbank v1"


@dataclass
class CoefBank:
    """CE coefficients ``g[lane, phase, tap]`` and offset estimates ``o_hat[lane, phase]``."""

    g: np.ndarray
    o_hat: np.ndarray
    constraint_enabled: bool = True
    constrained_slot: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float)
        self.o_hat = np.asarray(self.o_hat, dtype=float)
        if self.g.ndim != 3 or self.g.shape[0] != N_LANES:
            raise ConfigurationError("g must have shape (4, M, L_g)")
        if self.g.shape[2] % 2 == 0 or self.g.shape[2] < 3:
            raise ConfigurationError("L_g must be odd and >= 3")
        if self.o_hat.shape != self.g.shape[:2]:
            raise ConfigurationError("o_hat must have shape (4, M)")
        lane, phase = self.constrained_slot
        if not (0 <= lane < N_LANES and 0 <= phase < self.M):
            raise ConfigurationError("constrained slot out of range")
        self.constrained_slot = (int(lane), int(phase))

    @property
    def M(self) -> int:
        return self.g.shape[1]

    @property
    def L_g(self) -> int:
        return self.g.shape[2]

    @property
    def l_d(self) -> int:
        """Delay of the pass-through response."""
        return (self.L_g + 1) // 2

    def copy(self) -> "CoefBank":
        return CoefBank(self.g.copy(), self.o_hat.copy(), self.constraint_enabled, self.constrained_slot)

    def delta(self) -> np.ndarray:
        d = np.zeros(self.L_g)
        d[self.l_d] = 1.0
        return d

    def slot_is_delta(self) -> bool:
        lane, phase = self.constrained_slot
        return bool(np.array_equal(self.g[lane, phase], self.delta()))


@dataclass
class LaneFrame:
    """Rate-1/T_s samples starting at absolute index ``start_index``."""

    samples: np.ndarray
    start_index: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.start_index < 0:
            raise ConfigurationError("start_index must be >= 0")

    def __len__(self):
        return self.samples.shape[-1]


def init_coefbank(M: int, L_g: int, constraint: bool = True, slot: tuple[int, int] = (0, 0)) -> CoefBank:
    """Every lane and phase set to a delay of ``l_d = (L_g + 1) // 2`` samples; offsets zero."""
    if M < 1:
        raise ConfigurationError("M must be >= 1")
    if L_g % 2 == 0 or L_g < 3:
        raise ConfigurationError("L_g must be odd and >= 3")
    g = np.zeros((N_LANES, M, L_g))
    g[:, :, (L_g + 1) // 2] = 1.0
    return CoefBank(g, np.zeros((N_LANES, M)), constraint, slot)


def subtract_offset(y: LaneFrame, bank: CoefBank, lane: int) -> LaneFrame:
    n = y.start_index + np.arange(len(y))
    return LaneFrame(y.samples - bank.o_hat[lane, n % bank.M], y.start_index)


def ce_filter(w: LaneFrame, bank: CoefBank, lane: int, history=None) -> LaneFrame:
    """Apply lane ``lane`` of the CE to ``w``.

    ``history`` holds the ``L_g - 1`` samples preceding the frame (oldest
    first); its absence is a contract violation.
    """
    need = bank.L_g - 1
    if history is None or len(history) < need:
        raise ContractViolation(f"ce_filter needs {need} history samples")
    hist = np.asarray(history, dtype=float)[len(history) - need :]
    ext = np.concatenate([hist, w.samples])
    x = ce_filter_block(ext[None, :], bank, w.start_index, lanes=[lane])[0]
    return LaneFrame(x, w.start_index)


def _windows(ext: np.ndarray, L: int) -> np.ndarray:
    # win[..., n, l] = ext[..., n + L - 1 - l], i.e. w[n - l] in frame coordinates
    return sliding_window_view(ext, L, axis=-1)[..., ::-1]


def ce_filter_block(ext: np.ndarray, bank: CoefBank, n0: int, lanes=None) -> np.ndarray:
    """Multi-lane CE filtering.

    ``ext`` is ``(n_lanes, L_g - 1 + N)``: history followed by the frame
    whose first sample has absolute index ``n0``.  Returns ``(n_lanes, N)``.
    """
    lanes = list(range(N_LANES)) if lanes is None else list(lanes)
    ext = np.asarray(ext, dtype=float)
    N = ext.shape[-1] - (bank.L_g - 1)
    if N < 0:
        raise ContractViolation("frame shorter than the CE history")
    phases = (n0 + np.arange(N)) % bank.M
    win = _windows(ext, bank.L_g)
    g = bank.g[lanes][:, phases, :]
    return np.einsum("inl,inl->in", win, g)


def enforce_constraint(bank: CoefBank) -> CoefBank:
    """Reset the constrained slot to the exact delta (in place); returns ``bank``."""
    if bank.constraint_enabled:
        lane, phase = bank.constrained_slot
        bank.g[lane, phase] = bank.delta()
    return bank


# ---------------------------------------------------------------------------
# plain-text checkpoint format
# ---------------------------------------------------------------------------
#   # coefbank v1
#   shape <M> <L_g>
#   constraint <0|1> <lane> <phase>
#   g <lane> <phase> <tap> <value>
#   o <lane> <phase> <value>
# Lanes and phases are 0-based; values use Python repr so they round-trip.


def dumps_coefbank(bank: CoefBank) -> str:
    lines = [FORMAT_TAG, f"shape {bank.M} {bank.L_g}",
             f"constraint {int(bank.constraint_enabled)} {bank.constrained_slot[0]} {bank.constrained_slot[1]}"]
    for i in range(N_LANES):
        for m in range(bank.M):
            for l in range(bank.L_g):
                lines.append(f"g {i} {m} {l} {float(bank.g[i, m, l])!r}")
    for i in range(N_LANES):
        for m in range(bank.M):
            lines.append(f"o {i} {m} {float(bank.o_hat[i, m])!r}")
    return "\n".join(lines) + "\n"


def loads_coefbank(text: str) -> CoefBank:
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    head = {r[0]: r[1:] for r in rows if r[0] in ("shape", "constraint")}
    if "shape" not in head:
        raise ConfigurationError("coefbank text lacks a shape row")
    M, L = (int(v) for v in head["shape"])
    en, lane, phase = (int(v) for v in head.get("constraint", ["1", "0", "0"]))
    g = np.full((N_LANES, M, L), np.nan)
    o = np.full((N_LANES, M), np.nan)
    for r in rows:
        if r[0] == "g":
            g[int(r[1]), int(r[2]), int(r[3])] = float(r[4])
        elif r[0] == "o":
            o[int(r[1]), int(r[2])] = float(r[3])
    if np.isnan(g).any() or np.isnan(o).any():
        raise ConfigurationError("coefbank text is incomplete")
    return CoefBank(g, o, bool(en), (lane, phase))


def save_coefbank(bank: CoefBank, path) -> None:
    Path(path).write_text(dumps_coefbank(bank))


def load_coefbank(path) -> CoefBank:
    return loads_coefbank(Path(path).read_text())
