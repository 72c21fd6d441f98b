"""Background calibration of time-interleaved ADC mismatch by error backpropagation."""

from .compeq import CoefBank, init_coefbank, load_coefbank, save_coefbank
from .config import RunConfig, load_config, loads_config, preset
from .engine import CaseResult, calibrate_noise, run_case, run_link
from .harness import run_convergence, run_montecarlo
from .signal_core import ConfigurationError, ContractViolation, RngStream

__all__ = [
    "CaseResult",
    "CoefBank",
    "ConfigurationError",
    "ContractViolation",
    "RngStream",
    "RunConfig",
    "calibrate_noise",
    "init_coefbank",
    "load_coefbank",
    "load_config",
    "loads_config",
    "preset",
    "run_case",
    "run_convergence",
    "run_link",
    "run_montecarlo",
    "save_coefbank",
]

__version__ = "0.1.0"
