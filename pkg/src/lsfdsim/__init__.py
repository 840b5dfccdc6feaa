"""Two-layer decoding for multi-cell massive MIMO uplinks.

The package simulates spatially correlated Rayleigh fading cells, estimates
channels from contaminated pilots (MMSE or element-wise MMSE), evaluates the
uplink spectral efficiency of two-layer decoding in closed form for MRC and
by Monte Carlo for arbitrary combiners, and jointly optimizes data powers and
second-layer weights with an alternating weighted-MMSE scheme.
"""

from .scenario import (
    ConfigurationError,
    NetworkConfig,
    ScenarioStatistics,
    UserDrop,
    build_drop,
    correlation_matrix,
    large_scale_fading,
    scenario_statistics,
)
from .channel import (
    EstimationModel,
    compute_psi,
    estimation_model,
    ewmmse_estimate,
    mmse_estimate,
    pilot_observation,
    sample_channels,
)
from .se import (
    GeneralSEModel,
    PowerAllocation,
    SECoefficients,
    SEReport,
    coefficients,
    general_expectations_mc,
    general_optimal_lsfd,
    general_sinr,
    optimal_lsfd,
    rzf_combiner,
    se_report,
    single_layer_lsfd,
    sinr_closed_form,
)
from .optimizer import (
    ConvergenceOptions,
    OptimizationTrace,
    WmmseState,
    arithmetic_op_count,
    run_single_layer,
    run_two_layer,
    stopping_met,
)
from .verify import (
    McSinrEstimate,
    gaussian_quartic_check,
    mc_sinr,
    mmse_orthogonality_check,
    toy_example_check,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
