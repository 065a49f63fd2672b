"""Grouped-observation content/style disentanglement with an adversarially
trained mutual-information penalty on the style latent."""

from .gaussians import (
    DiagonalGaussian,
    accumulate_average,
    accumulate_product,
    kl_to_standard_normal,
    log_prob,
    rsample,
)
from .networks import ModelBundle, load_checkpoint, save_checkpoint
from .objectives import (
    ElboTerms,
    PairSets,
    adversarial_objective,
    dataset_objective,
    dv_mi_loss,
    group_elbo,
    sample_pairs,
)
from .training import LambdaState, RunConfig, train, update_lambda

__all__ = [
    "DiagonalGaussian",
    "ElboTerms",
    "LambdaState",
    "ModelBundle",
    "PairSets",
    "RunConfig",
    "accumulate_average",
    "accumulate_product",
    "adversarial_objective",
    "dataset_objective",
    "dv_mi_loss",
    "group_elbo",
    "kl_to_standard_normal",
    "load_checkpoint",
    "log_prob",
    "rsample",
    "sample_pairs",
    "save_checkpoint",
    "train",
    "update_lambda",
]
