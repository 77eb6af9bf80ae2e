"""Variance-aware algorithms for linear bandits with parameter noise."""

from .algorithms import (
    HorizonReached,
    run_baseline_explore_exploit,
    run_baseline_se,
    run_valee,
    run_vase,
)
from .design import frank_wolfe_design, g_value
from .environments import (
    LinearBanditEnv,
    best_action_lp,
    diagnostics,
    gap,
    make_lower_bound_env,
    sigma_of_action,
    sigma_q_sq,
)
from .estimation import (
    estimate_action_variance,
    median_of_means,
    stopping_rule_estimate,
    weighted_least_squares,
)
from .harness import fit_loglog_slope, run_experiment
from .types import (
    Algorithm,
    ConfigError,
    Design,
    ExperimentConfig,
    FiniteActions,
    LpBall,
    RewardModel,
    RunTrace,
    SamplerKind,
    derive_rng_stream,
    dual_exponent,
)

__version__ = "0.1.0"
