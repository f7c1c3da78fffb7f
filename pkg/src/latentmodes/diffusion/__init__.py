"""Executable mixture-diffusion theory: scores, training, samplers, metrics, sweeps."""
from .metrics import frechet_distance, knn_kl
from .sampling import ScheduleTable, make_schedule, nested_noise, sample_euler_maruyama, sample_exp_integrator
from .score import (
    DiffusionError,
    ScoreNet,
    dsm_loss,
    exact_score,
    forward_marginal,
    forward_noise,
    log_density_t,
    marginal_gmm,
    oracle_loss,
    scorenet_eval,
    scorenet_grad,
    theory_gmm,
)
from .train import TrainConfig, TrainTrace, matched_mean_error, train_scorenet

__all__ = [
    "DiffusionError", "ScheduleTable", "ScoreNet", "TrainConfig", "TrainTrace", "dsm_loss", "exact_score",
    "forward_marginal", "forward_noise", "frechet_distance", "knn_kl", "log_density_t", "make_schedule",
    "marginal_gmm", "matched_mean_error", "nested_noise", "oracle_loss", "sample_euler_maruyama", "sample_exp_integrator",
    "scorenet_eval", "scorenet_grad", "theory_gmm", "train_scorenet",
]
