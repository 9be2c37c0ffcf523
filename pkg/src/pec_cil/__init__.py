"""Prediction Error-based Classification for class-incremental learning."""

from .balancing import BalancingScalars, CMAConfig, apply_scalars, equal_budget_schedule, fit_scalars
from .data import Dataset, load_cifar10, load_mnist, split_tasks, synthetic_gaussians
from .harness import ExperimentConfig, RunReport, run_experiment, run_seed_sweep
from .pec import PECArch, PECClassifier, TrainBudget, build_pec

__version__ = "0.1.0"
