"""Asynchronous cell-free massive MIMO downlink with rate-splitting.

Simulation and optimization toolkit for a distributed multi-antenna
downlink impaired by propagation-delay phases and Wiener oscillator
drift: channel/phase models, MMSE and LS estimation statistics, exact
hardening-bound SINR/SE expressions for private and common streams, a
Monte Carlo oracle validating them, and two optimizers (power-split
binary search and max-min robust common precoding).
"""

from .closed_form import (
    PrecodingPlan,
    SEReport,
    TraceTerms,
    common_normalization,
    common_sinr,
    common_sinr_coherent,
    common_sinr_noncoherent,
    evaluate_plan,
    make_plan,
    power_control_coefficients,
    private_normalization,
    private_sinr,
    private_sinr_coherent,
    private_sinr_noncoherent,
    se_from_sinr,
    sum_se,
)
from .estimation import (
    EstimationStatistics,
    PilotAssignment,
    assign_pilots,
    estimation_statistics,
    mmse_estimate_realization,
    nmse_ls,
)
from .model import (
    NetworkModel,
    PhaseStatistics,
    SystemConfig,
    build_network,
    expected_phase_decay,
    phase_increment_variance,
    sample_phase_trajectory,
)
from .montecarlo import (
    MCSinr,
    RealizationBatch,
    UatFTerms,
    dummse_precoder,
    estimate_uatf_terms,
    mc_sinr,
    sample_batch,
    transmit_power_stats,
)
from .optimize import (
    FeasibilityVerdict,
    MaxMinProblem,
    RobustPrecodingResult,
    build_maxmin_problem,
    check_feasibility,
    optimal_rho,
    robust_common_precoding,
)

__version__ = "0.1.0"
