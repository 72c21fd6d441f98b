"""Run configuration: INI file sections with a default for every key.

The ``desk`` preset keeps runs to seconds per case; ``paper`` restores the
full-scale interleave count, case count and run length.  Keys absent from
a file keep the preset value.  See ``docs/config.md`` for the schema.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields, replace

from .afe import ImpairmentRanges
from .signal_core import ConfigurationError

MODES = ("no-cal", "digital-ce", "mixed-signal")


def _range(v) -> tuple[float, float]:
    if isinstance(v, (tuple, list)):
        lo, hi = v
    else:
        parts = [p for p in str(v).replace(",", " ").split() if p]
        if len(parts) == 1:
            hi = abs(float(parts[0]))
            lo = -hi
        elif len(parts) == 2:
            lo, hi = float(parts[0]), float(parts[1])
        else:
            raise ConfigurationError(f"bad range {v!r}")
    return float(lo), float(hi)


@dataclass
class RunConfig:
    # [system]
    modulation: str = "16qam"
    symbol_rate: float = 96e9
    osf_T: int = 8
    Ts_per_T: int = 2
    rolloff: float = 0.10
    pulse_span: int = 32
    # [channel]
    channel: str = "dgd"  # identity | dgd | fir
    dgd: float = 10e-12
    fir_file: str = ""
    # [adc]
    M1: int = 8
    M2: int = 1
    bits: int = 8
    vfs: float = 1.0
    loading: float = 0.7
    quantize: bool = True
    bandwidth: float = 53e9
    lowpass: bool = True
    interp_len: int = 33
    jitter_rms: float = 0.0
    # [impairments] symmetric half-width or "lo, hi"
    gain_range: tuple = (-0.15, 0.15)
    phase_range: tuple = (-0.10, 0.10)
    bandwidth_range: tuple = (-0.075, 0.075)
    skew_range: tuple = (-0.10, 0.10)
    offset_range: tuple = (-0.025, 0.025)
    # [dsp]
    L_g: int = 7
    L_gamma: int = 15
    constraint: bool = True
    constraint_lane: int = 0
    constraint_phase: int = 0
    mu_ffe_train: float = 1.0
    mu_ffe: float = 0.1
    ffe_sub_block: int = 32
    train_symbols: int = 8000
    # [noise]
    sigma: float = -1.0  # < 0: calibrate
    target_ber: float = 1.2e-3
    calib_tolerance: float = 0.15
    calib_symbols: int = 200000
    calib_cases: int = 2
    # [adapt]
    N: int = 4096
    D_B: int = 1
    adapt_start: int = 8000  # symbols
    mu: float = 0.15
    mu_o: float = 0.15
    mu_g: float = 0.5  # trim steps are normalized (see normalize_trims)
    mu_t: float = 0.5
    gear_stage_blocks: int = 8
    gear_stages: int = 4
    normalize_trims: bool = True
    # [run]
    mode: str = "digital-ce"
    seed: int = 1
    n_symbols: int = 200000
    measure_symbols: int = 100000
    cases: int = 50
    out: str = "out"
    sndr_average: str = "db"
    sndr_every: int = 4  # blocks
    ber_stride: int = 2048  # symbols per instantaneous BER point
    ber_window: int = 8
    lag_window: int = 256
    checkpoint_every: int = 0  # blocks; 0 = final only
    trace_updates: bool = False

    # ------------------------------------------------------------------
    def ranges(self) -> ImpairmentRanges:
        return ImpairmentRanges(self.gain_range, self.phase_range, self.bandwidth_range,
                                self.skew_range, self.offset_range)

    @property
    def M(self) -> int:
        return self.M1 * self.M2

    @property
    def fs(self) -> float:
        return self.symbol_rate * self.Ts_per_T

    @property
    def osf(self) -> int:
        return self.osf_T // self.Ts_per_T

    def validate(self) -> "RunConfig":
        if self.modulation.lower() != "16qam":
            raise ConfigurationError("only 16qam is supported")
        if self.Ts_per_T != 2:
            raise ConfigurationError("only T_s = T/2 is supported")
        if self.osf_T % 2 or self.osf_T < 4:
            raise ConfigurationError("osf_T must be even and >= 4")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if self.channel not in ("identity", "dgd", "fir"):
            raise ConfigurationError("channel must be identity, dgd or fir")
        if self.channel == "fir" and not self.fir_file:
            raise ConfigurationError("channel = fir needs fir_file")
        if self.L_g % 2 == 0 or self.L_g < 3:
            raise ConfigurationError("L_g must be odd and >= 3")
        if self.L_gamma < 1:
            raise ConfigurationError("L_gamma must be >= 1")
        if self.N % 2 or self.N < self.L_gamma + self.L_g:
            raise ConfigurationError("N must be even and >= L_gamma + L_g")
        if (self.N // 2) % self.ffe_sub_block:
            raise ConfigurationError("ffe_sub_block must divide N/2")
        if self.D_B < 1 or self.M1 < 1 or self.M2 < 1:
            raise ConfigurationError("D_B, M1 and M2 must be >= 1")
        if not 0 < self.loading < 1:
            raise ConfigurationError("loading must be in (0, 1)")
        if not 0 < self.target_ber < 0.5:
            raise ConfigurationError("target_ber must be in (0, 0.5)")
        if self.n_symbols < 2 * self.N or self.measure_symbols > self.n_symbols:
            raise ConfigurationError("run too short for the block size or measurement window")
        if self.sndr_average not in ("db", "power"):
            raise ConfigurationError("sndr_average must be db or power")
        if self.cases < 1:
            raise ConfigurationError("cases must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        for v in (self.mu, self.mu_o, self.mu_g, self.mu_t, self.mu_ffe, self.mu_ffe_train):
            if v < 0:
                raise ConfigurationError("step sizes must be >= 0")
        self.ranges().validate()
        return self

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)


SECTIONS = {
    "system": ("modulation", "symbol_rate", "osf_T", "Ts_per_T", "rolloff", "pulse_span"),
    "channel": ("channel", "dgd", "fir_file"),
    "adc": ("M1", "M2", "bits", "vfs", "loading", "quantize", "bandwidth", "lowpass", "interp_len", "jitter_rms"),
    "impairments": ("gain_range", "phase_range", "bandwidth_range", "skew_range", "offset_range"),
    "dsp": ("L_g", "L_gamma", "constraint", "constraint_lane", "constraint_phase", "mu_ffe_train", "mu_ffe",
            "ffe_sub_block", "train_symbols"),
    "noise": ("sigma", "target_ber", "calib_tolerance", "calib_symbols", "calib_cases"),
    "adapt": ("N", "D_B", "adapt_start", "mu", "mu_o", "mu_g", "mu_t", "gear_stage_blocks", "gear_stages",
              "normalize_trims"),
    "run": ("mode", "seed", "n_symbols", "measure_symbols", "cases", "out", "sndr_average", "sndr_every",
            "ber_stride", "ber_window", "lag_window", "checkpoint_every", "trace_updates"),
}

_ALIASES = {"m": "M1", "l_gamma": "L_gamma", "l_g": "L_g", "n": "N", "d_b": "D_B", "osf_t": "osf_T"}


def preset(name: str) -> RunConfig:
    if name == "desk":
        return RunConfig()
    if name == "paper":
        return RunConfig(M1=16, L_gamma=31, n_symbols=1_000_000, measure_symbols=500_000, cases=500,
                         N=8192, calib_symbols=1_000_000, train_symbols=20000, adapt_start=20000)
    raise ConfigurationError(f"unknown preset {name!r}")


def _to_int(raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        f = float(raw)  # allow "2e5"
        if not f.is_integer():
            raise
        return int(f)


def _convert(name: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        if isinstance(default, tuple):
            return _range(raw)
        if isinstance(default, int):
            return _to_int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except (KeyError, ValueError) as exc:
        raise ConfigurationError(f"bad value for {name}: {raw!r}") from exc


def loads_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(str(exc)) from exc
    cfg = base or RunConfig()
    if cp.has_option("run", "preset") and base is None:
        cfg = preset(cp.get("run", "preset"))
    names = {f.name: f for f in fields(RunConfig)}
    updates = {}
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigurationError(f"unknown section [{sec}]")
        for key, raw in cp.items(sec):
            if sec == "run" and key == "preset":
                continue
            name = _ALIASES.get(key.lower(), key)
            if name not in names or name not in SECTIONS[sec]:
                raise ConfigurationError(f"unknown key {key!r} in [{sec}]")
            updates[name] = _convert(name, raw, getattr(cfg, name))
    return replace(cfg, **updates)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path) as fh:
        return loads_config(fh.read(), base)


def dumps_config(cfg: RunConfig) -> str:
    d = asdict(cfg)
    out = []
    for sec, keys in SECTIONS.items():
        out.append(f"[{sec}]")
        for k in keys:
            v = d[k]
            if isinstance(v, tuple):
                v = f"{v[0]!r}, {v[1]!r}"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            out.append(f"{k} = {v}")
        out.append("")
    return "\n".join(out)
