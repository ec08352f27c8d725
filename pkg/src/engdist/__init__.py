"""Distributional long-term engagement modeling from logged sessions.

Subpackages: ``simenv`` (synthetic session MDP and Monte Carlo oracles),
``distdp`` (exact quantile dynamic programming), ``qrlearn`` (the
quantile/termination learner), ``ranker`` (score blending), ``dataio``
(file formats), ``evaluate`` (session metrics), ``cli`` (pipeline commands).
"""

from .distdp import (DiscountSpec, FixedPointResult, ValueTable,
                     apply_operator, check_contraction, max_contraction_ratio,
                     quantile_midpoints, solve_fixed_point, sup_wasserstein,
                     wasserstein)
from .errors import (ConvergenceError, DataFormatError, EngdistError,
                     TrainingDivergedError, ValidationError)
from .qrlearn import (EngagementModel, ModelConfig, TrainingConfig,
                      bce_loss, compute_targets, gradient_check,
                      quantile_huber_loss, train)
from .ranker import ScoredItem, engagement_score, rank
from .simenv import (StateFeaturizer, SyntheticMDP, Transition,
                     empirical_termination_rate, generate_logs, iter_sessions,
                     mc_return_samples, random_mdp)

__all__ = [
    "ConvergenceError", "DataFormatError", "DiscountSpec", "EngagementModel",
    "EngdistError", "FixedPointResult", "ModelConfig", "ScoredItem",
    "StateFeaturizer", "SyntheticMDP", "TrainingConfig",
    "TrainingDivergedError", "Transition", "ValidationError", "ValueTable",
    "apply_operator", "bce_loss", "check_contraction", "compute_targets",
    "empirical_termination_rate", "engagement_score", "generate_logs",
    "gradient_check", "iter_sessions", "max_contraction_ratio",
    "mc_return_samples", "quantile_huber_loss", "quantile_midpoints",
    "random_mdp", "rank", "solve_fixed_point", "sup_wasserstein", "train",
]

__version__ = "0.1.0"
