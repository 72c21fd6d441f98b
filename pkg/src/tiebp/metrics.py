"""BER, MSE and reference-based SNDR measurements."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .signal_core import ConfigurationError

SNDR_CAP_DB = 120.0


class AlignmentError(RuntimeError):
    """No lag in the search window gives enough bit agreement."""


class MetricKind(str, Enum):
    BER = "BER"
    MSE = "MSE"
    SNDR = "SNDR"


@dataclass
class MetricTrace:
    index: np.ndarray
    value: np.ndarray
    kind: MetricKind

    def __post_init__(self):
        self.index = np.asarray(self.index, dtype=np.int64)
        self.value = np.asarray(self.value, dtype=float)
        self.kind = MetricKind(self.kind)
        if self.index.shape != self.value.shape:
            raise ConfigurationError("index and value lengths differ")
        if np.any(np.diff(self.index) <= 0):
            raise ConfigurationError("trace indices must be strictly increasing")

    def __len__(self):
        return self.index.size

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("index", "value"))
            for i, v in zip(self.index, self.value):
                w.writerow((int(i), repr(float(v))))


def _agreement(a: np.ndarray, b: np.ndarray, lag: int) -> tuple[int, int]:
    # compare a[n] with b[n + lag]
    if lag >= 0:
        x, y = a[: a.size - lag] if lag else a, b[lag:]
    else:
        x, y = a[-lag:], b[: b.size + lag]
    n = min(x.size, y.size)
    return int(np.count_nonzero(x[:n] == y[:n])), n


def ber_with_lag(decisions, truth, lag_window: int = 256, min_agreement: float = 0.6,
                 search_len: int = 8192) -> tuple[float, int]:
    """BER and the lag maximizing agreement between ``decisions[n]`` and ``truth[n + lag]``.

    The lag is chosen on the first ``search_len`` bits, then the error
    rate is counted over the whole overlap.
    """
    a = np.asarray(decisions).astype(np.uint8).ravel()
    b = np.asarray(truth).astype(np.uint8).ravel()
    if a.size == 0 or b.size == 0:
        raise ConfigurationError("empty bit sequence")
    sa, sb = a[: search_len + lag_window], b[: search_len + lag_window]
    best, best_lag = -1.0, 0
    for lag in range(-lag_window, lag_window + 1):
        agree, n = _agreement(sa, sb, lag)
        if n and agree / n > best:
            best, best_lag = agree / n, lag
    if best <= min_agreement:
        raise AlignmentError(f"best bit agreement {best:.3f} <= {min_agreement}")
    agree, n = _agreement(a, b, best_lag)
    return (n - agree) / n, best_lag


def ber(decisions, truth, lag_window: int = 256, min_agreement: float = 0.6) -> float:
    return ber_with_lag(decisions, truth, lag_window, min_agreement)[0]


def windowed_ber(inst, window: int, index=None) -> MetricTrace:
    """Trailing moving average (shorter at the start) of instantaneous BER values."""
    if window < 1:
        raise ConfigurationError("window must be >= 1")
    v = np.asarray(inst, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(v)])
    k = np.arange(1, v.size + 1)
    lo = np.maximum(0, k - window)
    avg = (c[k] - c[lo]) / (k - lo)
    idx = np.arange(v.size) if index is None else index
    return MetricTrace(idx, avg, MetricKind.BER)


def mse_trace(E, stride: int, start: int = 0) -> MetricTrace:
    """Means of ``E_k`` over consecutive ``stride``-long blocks; index = first symbol of block."""
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    E = np.asarray(E, dtype=float)
    nb = E.size // stride
    vals = E[: nb * stride].reshape(nb, stride).mean(axis=1)
    return MetricTrace(start + stride * np.arange(nb), vals, MetricKind.MSE)


def _align(observed: np.ndarray, reference: np.ndarray, max_lag: int):
    """Best integer lag and least-squares gain mapping ``observed`` onto ``reference``."""
    best = None
    for lag in range(-max_lag, max_lag + 1):
        o = np.roll(observed, lag)
        sl = slice(max_lag, observed.size - max_lag) if max_lag else slice(None)
        oo, rr = o[sl], reference[sl]
        den = float(np.dot(oo, oo))
        c = float(np.dot(oo, rr)) / den if den > 0 else 0.0
        res = float(np.sum((rr - c * oo) ** 2))
        if best is None or res < best[0]:
            best = (res, lag, c)
    return best[1], best[2], (slice(max_lag, observed.size - max_lag) if max_lag else slice(None))


def _db(p_sig: float, p_err: float) -> float:
    if p_err <= p_sig * 10 ** (-SNDR_CAP_DB / 10):
        return SNDR_CAP_DB
    return float(10 * np.log10(p_sig / p_err))


def sndr(observed, reference, max_lag: int = 2) -> float:
    """Reference-based SNDR in dB after scalar gain and integer-lag alignment (capped at 120 dB)."""
    o = np.asarray(observed, dtype=float).ravel()
    r = np.asarray(reference, dtype=float).ravel()
    if o.shape != r.shape:
        raise ConfigurationError("observed and reference lengths differ")
    if not np.any(r):
        raise ValueError("SNDR undefined for a zero-energy reference")
    lag, c, sl = _align(o, r, max_lag)
    err = r[sl] - c * np.roll(o, lag)[sl]
    return _db(float(np.sum(r[sl] ** 2)), float(np.sum(err**2)))


def sndr_mean(observed, reference, n0: int, n_sub: int, average: str = "db", max_lag: int = 2) -> float:
    """Mean per-sub-ADC SNDR of one lane.

    Gain and lag are aligned once over the whole record, so gain mismatch
    between sub-ADCs remains visible.  ``average`` is ``"db"`` (mean of dB
    values) or ``"power"`` (ratio of pooled powers).
    """
    o = np.asarray(observed, dtype=float)
    r = np.asarray(reference, dtype=float)
    if not np.any(r):
        raise ValueError("SNDR undefined for a zero-energy reference")
    lag, c, sl = _align(o, r, max_lag)
    idx = (n0 + np.arange(o.size))[sl]
    err = r[sl] - c * np.roll(o, lag)[sl]
    ref = r[sl]
    if average == "power":
        return _db(float(np.sum(ref**2)), float(np.sum(err**2)))
    if average != "db":
        raise ConfigurationError("average must be 'db' or 'power'")
    vals = [_db(float(np.sum(ref[idx % n_sub == s] ** 2)), float(np.sum(err[idx % n_sub == s] ** 2)))
            for s in range(n_sub)]
    return float(np.mean(vals))


def log_bins(lo_decade: int = -6, hi_decade: int = 0, per_decade: int = 10) -> np.ndarray:
    """Logarithmic histogram edges, ``per_decade`` bins per decade."""
    n = (hi_decade - lo_decade) * per_decade
    return 10.0 ** (lo_decade + np.arange(n + 1) / per_decade)
