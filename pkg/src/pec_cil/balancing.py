"""Score rescaling and training schedules for class-imbalanced streams.

PEC scores of a class trained on more data tend to be smaller. Two remedies:

* post-hoc per-class scalars ``s_c = exp(l_c)`` multiplying the scores, fitted
  by CMA-ES to maximize accuracy on a labeled set (test set for "oracle",
  a small reservoir of training samples for "buffer" balancing);
* giving every class the same number of gradient steps ("equal budgets").
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class CMAConfig:
    sigma0: float = 0.001
    popsize: int = 100
    weight_decay: float = 0.0
    generations: int = 300
    seed: int = 0
    target: float | None = None  # stop once a fitness >= target was seen

    def __post_init__(self):
        if self.popsize < 2:
            raise ValueError("popsize must be >= 2")
        if self.sigma0 <= 0:
            raise ValueError("sigma0 must be > 0")


@dataclass
class CMAResult:
    x: np.ndarray
    fitness: float
    evaluations: int
    generations: int


def cma_es_maximize(fitness: Callable[[np.ndarray], float], dim: int, cfg: CMAConfig = CMAConfig(),
                    x0: np.ndarray | None = None) -> CMAResult:
    """(mu/mu_w, lambda)-CMA-ES with rank-one and rank-mu updates.

    ``x0`` (zeros by default) is evaluated first and the best point ever
    evaluated is returned. Non-finite fitness counts as -inf. When the best
    and the quarter-rank fitness of a generation coincide (a plateau, common
    for accuracy objectives), the step size is enlarged to escape it.
    ``weight_decay`` subtracts ``wd * ||x||^2`` from the fitness.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    n = dim
    lam = cfg.popsize
    mu = lam // 2
    w = np.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    w /= w.sum()
    mueff = 1.0 / np.sum(w**2)

    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    cs = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

    def evaluate(x):
        f = float(fitness(x))
        if not math.isfinite(f):
            return -math.inf
        return f - cfg.weight_decay * float(x @ x)

    mean = np.zeros(n) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    sigma = cfg.sigma0
    C = np.eye(n)
    B = np.eye(n)
    D = np.ones(n)
    pc = np.zeros(n)
    ps = np.zeros(n)

    best_x, best_f = mean.copy(), evaluate(mean)
    evals = 1
    gen = 0
    eigen_every = max(1, int(lam / (c1 + cmu) / n / 10))
    for gen in range(1, cfg.generations + 1):
        if cfg.target is not None and best_f >= cfg.target:
            gen -= 1
            break
        z = rng.standard_normal((lam, n))
        y = (z * D) @ B.T
        xs = mean + sigma * y
        fs = np.array([evaluate(x) for x in xs])
        evals += lam
        order = np.argsort(-fs, kind="stable")
        if fs[order[0]] > best_f:
            best_f, best_x = float(fs[order[0]]), xs[order[0]].copy()

        y_sel = y[order[:mu]]
        y_w = w @ y_sel
        mean = mean + sigma * y_w

        C_inv_sqrt_y = B @ ((B.T @ y_w) / D)
        ps = (1 - cs) * ps + math.sqrt(cs * (2 - cs) * mueff) * C_inv_sqrt_y
        hsig = np.linalg.norm(ps) / math.sqrt(1 - (1 - cs) ** (2 * gen)) / chi_n < 1.4 + 2 / (n + 1)
        pc = (1 - cc) * pc + hsig * math.sqrt(cc * (2 - cc) * mueff) * y_w
        rank_mu = (y_sel.T * w) @ y_sel
        C = ((1 - c1 - cmu) * C + c1 * (np.outer(pc, pc) + (not hsig) * cc * (2 - cc) * C)
             + cmu * rank_mu)
        sigma *= math.exp((cs / damps) * (np.linalg.norm(ps) / chi_n - 1))
        if fs[order[0]] == fs[order[min(lam - 1, int(math.ceil(0.1 + lam / 4)))]]:
            sigma *= math.exp(0.2 + cs / damps)

        if gen % eigen_every == 0:
            C = np.triu(C) + np.triu(C, 1).T
            evals_c, B = np.linalg.eigh(C)
            D = np.sqrt(np.maximum(evals_c, 1e-20))
    return CMAResult(best_x, best_f, evals, gen)


@dataclass
class BalancingScalars:
    log_scale: np.ndarray  # l_c

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @classmethod
    def identity(cls, num_classes: int) -> BalancingScalars:
        return cls(np.zeros(num_classes))


def apply_scalars(scores: np.ndarray, scalars: BalancingScalars) -> np.ndarray:
    """Rescale PEC scores column-wise; predictions are the argmin of the result."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[-1] != len(scalars.log_scale):
        raise ValueError("number of scalars does not match number of classes")
    return scores * scalars.scale


def scaled_accuracy(scores: np.ndarray, labels: np.ndarray, log_scale: np.ndarray) -> float:
    # argmin in log space: same decision as argmin(scores * exp(l)) without overflow
    with np.errstate(divide="ignore"):
        log_scores = np.log(scores)
    return float(np.mean(np.argmin(log_scores + log_scale, axis=1) == labels))


def fit_scalars(scores: np.ndarray, labels: np.ndarray, cfg: CMAConfig = CMAConfig()) -> BalancingScalars:
    """Per-class scalars maximizing accuracy of argmin(s_c * scores) on (scores, labels)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or len(scores) != len(labels):
        raise ValueError("scores must be (N, C) with one label per row")
    if len(np.unique(labels)) < 2:
        raise ValueError("balancing needs labels from at least two classes")
    cfg = cfg if cfg.target is not None else CMAConfig(**{**cfg.__dict__, "target": 1.0})
    res = cma_es_maximize(lambda l: scaled_accuracy(scores, labels, l), scores.shape[1], cfg)
    return BalancingScalars(res.x)


def equal_budget_schedule(class_counts, single_pass: bool = True, steps: int | None = None) -> np.ndarray:
    """Same number of gradient steps for every class.

    In single-pass mode this is the smallest class size (at batch size 1),
    otherwise ``steps`` for every class.
    """
    counts = np.asarray(class_counts, dtype=np.int64)
    if np.any(counts < 0):
        raise ValueError("class counts must be >= 0")
    if single_pass:
        if np.any(counts == 0):
            raise ValueError("single-pass equal budgets need data for every class")
        return np.full(len(counts), counts.min())
    if steps is None or steps < 0:
        raise ValueError("multi-pass equal budgets need steps >= 0")
    return np.full(len(counts), steps)
