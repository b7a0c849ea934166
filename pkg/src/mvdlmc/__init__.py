"""Double loop Monte Carlo with importance sampling for McKean-Vlasov SDEs."""

from mvdlmc.control import (
    ControlField,
    Grid1D,
    ValueField,
    eval_control,
    extract_control,
    solve_kbe,
    solve_offline_control,
)
from mvdlmc.decoupled import (
    WeightedSample,
    inner_estimator,
    simulate_coupled_levels,
    simulate_decoupled_path,
    simulate_decoupled_paths,
)
from mvdlmc.dlmc import (
    EstimatorResult,
    LevelParams,
    ToleranceBudget,
    VarianceConstants,
    adaptive_dlmc,
    dlmc_estimate,
    estimate_bias_antithetic,
    estimate_variance_constants,
    optimal_parameters,
    optimal_samples,
)
from mvdlmc.model import (
    ModelSpec,
    Observable,
    constant_observable,
    cosine_observable,
    indicator_observable,
    interaction_mean,
    kuramoto_model,
    zero_kernel_model,
)
from mvdlmc.particles import EmpiricalLaw, law_at, partition_antithetic, simulate_particles
from mvdlmc.rng import RandomStreams

__version__ = "0.1.0"
