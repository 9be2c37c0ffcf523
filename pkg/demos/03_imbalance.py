"""Class imbalance: more data means smaller scores; two fixes.

Run: python demos/03_imbalance.py   (about ten seconds)
"""

import dataclasses

from pec_cil.harness import ExperimentConfig, run_experiment

base = ExperimentConfig(method="pec", dataset="synthetic", split="10/1", seed=0)

# Class 0 gets twice its data and class 1 half of it.
runs = {
    "balanced": base,
    "imbalanced": dataclasses.replace(base, imbalanced=True),
    "imbalanced + equal budgets": dataclasses.replace(base, imbalanced=True, budget="equal_budgets"),
    "imbalanced + buffer balancing": dataclasses.replace(base, imbalanced=True, balancing="buffer",
                                                         cma_generations=100),
}
for name, cfg in runs.items():
    r = run_experiment(cfg)
    pc = r.per_class_accuracy
    print(f"{name:<31} {100 * r.accuracy:6.2f}%   class 0 {100 * pc[0]:5.1f}%   class 1 {100 * pc[1]:5.1f}%")
