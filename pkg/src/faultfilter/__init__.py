"""Fault-tolerant quantum filtering for an atom driven by a single photon."""

from .cascade import PlantModel, assemble
from .experiment import ConfigError, ExperimentConfig, RunSettings, run_ensemble
from .faultproc import FaultModel, FaultPath, example31_model, kolmogorov_solve, sample_path, validate_qmatrix
from .filtering import (
    DivergenceError,
    FilterConfig,
    FilterState,
    estimate,
    filter_record,
    init_state,
    normalize,
    posterior,
    reference_step,
    step_normalized,
    step_zakai,
)
from .truthsim import MeasurementRecord, master_solve, read_record, simulate_record
from .wavepacket import Wavepacket

__version__ = "0.1.0"
