"""Determined blind source separation with auxiliary-function updates and
maximum-SIR demixing from interference covariance matrices."""

from .algorithms import (
    ALGOS,
    OracleInfo,
    SeparatorConfig,
    interference_cov_masked,
    interference_cov_oracle,
    interference_covariances,
    narrowband_sir,
    oracle_masks,
    rank1_source_covariance,
    read_masks,
    run_auxica,
    run_auxiva,
    run_gev,
    run_ilrma,
    run_mvica,
    run_oracle_variant,
    separate,
    sir_bound,
    write_masks,
)
from .core import apply_demixing, contrast_weights, minimal_distortion_rescale, objective
from .errors import BSSError, DataError, NumericalError, UsageError
from .metrics import EvalReport, bss_eval, improvement, si_sdr
from .roomsim import RoomSpec, Scenario, make_scenario, simulate_rir
from .stft import Spectrogram, analyze, synthesize

__version__ = "0.1.0"
