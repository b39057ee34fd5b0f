from .discriminator import TFDiscriminator, build_discriminator, discriminator_loss, judge
from .generator import OutcomeGenerator, build_generator, predict_potential_outcomes
from .training import TrainHistory, TrainResult, impute_counterfactuals, train, train_and_impute

__all__ = [
    "OutcomeGenerator",
    "TFDiscriminator",
    "TrainHistory",
    "TrainResult",
    "build_discriminator",
    "build_generator",
    "discriminator_loss",
    "impute_counterfactuals",
    "judge",
    "predict_potential_outcomes",
    "train",
    "train_and_impute",
]
