"""Structure-perturbing attacks and the perturbation type they produce."""

from .mettack import MetaConfig, adversarial_augment, adversarial_perturbation, mettack
from .nettack import SurrogateModel, nettack, nettack_targets, surrogate_fit
from .perturbation import (ADD, REMOVE, Flip, Perturbation, apply_perturbation, budget_for,
                           load_perturbation, save_perturbation)
from .random import random_attack

__all__ = [
    "ADD", "REMOVE", "Flip", "MetaConfig", "Perturbation", "SurrogateModel", "adversarial_augment",
    "adversarial_perturbation", "apply_perturbation", "budget_for", "load_perturbation", "mettack",
    "nettack", "nettack_targets", "random_attack", "save_perturbation", "surrogate_fit",
]
