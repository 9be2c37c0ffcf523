"""Prediction Error-based Classification.

Every class gets its own small student network, trained only on that class's
data to reproduce the outputs of one shared, frozen, randomly initialized
teacher. A test input is assigned to the class whose student imitates the
teacher best, i.e. the class with the smallest squared prediction error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import nn

TEACHER_CHUNK = 1024


@dataclass(frozen=True)
class PECArch:
    family: str  # "mlp" or "conv"
    input_shape: tuple[int, ...]
    student_width: int
    teacher_width: int
    output_dim: int
    pool_target: int | None = None
    depth: int = 1
    init: str = "kaiming_uniform"
    init_range: float = 0.01  # only used by init="uniform"

    def __post_init__(self):
        if self.family not in ("mlp", "conv"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.family == "conv" and self.pool_target is None:
            raise ValueError("conv architecture needs pool_target")
        if self.family == "mlp" and len(self.input_shape) != 1:
            raise ValueError("mlp architecture takes flat inputs")
        if self.family == "conv" and len(self.input_shape) != 3:
            raise ValueError("conv architecture takes (C, H, W) inputs")

    def specs(self, width: int) -> list[nn.LayerSpec]:
        if self.family == "mlp":
            return nn.mlp_specs(self.input_shape[0], width, self.output_dim, self.depth)
        return nn.conv_specs(self.input_shape[0], width, self.output_dim, self.pool_target, self.depth)

    def init_scheme(self, seed: int) -> nn.InitScheme:
        return nn.InitScheme(self.init, seed, self.init_range)


MNIST_ARCH = PECArch("mlp", (784,), student_width=10, teacher_width=5000, output_dim=99)
CIFAR10_ARCH = PECArch("conv", (3, 32, 32), student_width=60, teacher_width=6000, output_dim=743, pool_target=5)
CIFAR100_ARCH = PECArch("conv", (3, 32, 32), student_width=40, teacher_width=4000, output_dim=172, pool_target=4)

PRESETS = {"mnist": MNIST_ARCH, "cifar10": CIFAR10_ARCH, "cifar100": CIFAR100_ARCH}


def preset(dataset: str, **overrides) -> PECArch:
    """Architecture preset for a dataset, with optional field overrides."""
    arch = PRESETS[dataset]
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(arch, **overrides) if overrides else arch


@dataclass
class TrainBudget:
    """How long to train one student.

    ``steps=None`` means a single pass over the class data.
    """

    lr: float = 0.01
    batch_size: int = 1
    decay: bool = True
    steps: int | None = None

    def __post_init__(self):
        if self.steps is not None and self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def num_steps(self, n_samples: int) -> int:
        if self.steps is not None:
            return self.steps
        return math.ceil(n_samples / self.batch_size)


class PECClassifier:
    """A frozen teacher plus one student and one Adam state per class."""

    def __init__(self, arch: PECArch, teacher: nn.Network, students: list[nn.Network]):
        self.arch = arch
        self.teacher = teacher
        self.students = students
        self.adam = [nn.AdamState.zeros_like(s.flat) for s in students]
        self.trained_steps = [0] * len(students)

    @property
    def num_classes(self) -> int:
        return len(self.students)

    def teacher_outputs(self, x: np.ndarray) -> np.ndarray:
        return nn.predict(self.teacher, x, chunk=TEACHER_CHUNK)

    def train_class(self, c: int, x: np.ndarray, y: np.ndarray | None = None,
                    budget: TrainBudget | None = None, seed: int = 0) -> np.ndarray:
        """Train student ``c`` on samples of class ``c`` (in the given order).

        Each step minimizes the batch mean of ||student(x) - teacher(x)||^2.
        Batches are taken sequentially; when ``budget.steps`` asks for more
        than one pass, every further pass reshuffles with ``seed``. Returns
        the per-step training losses.
        """
        budget = budget or TrainBudget()
        if not 0 <= c < self.num_classes:
            raise IndexError(f"class {c} out of range")
        x = np.asarray(x)
        if y is not None and np.any(np.asarray(y) != c):
            raise ValueError(f"stream for class {c} contains other labels")
        n = len(x)
        steps = budget.num_steps(n)
        if steps == 0:
            return np.zeros(0)
        if n == 0:
            raise ValueError(f"no data for class {c} but {steps} steps requested")

        targets = self.teacher_outputs(x)
        student = self.students[c]
        state = self.adam[c]
        grad = np.zeros_like(student.flat)
        bs = budget.batch_size
        losses = np.empty(steps)
        order = np.arange(n)
        rng = np.random.default_rng([seed, c])
        pos = 0
        for k in range(steps):
            if pos >= n:
                order = rng.permutation(n)
                pos = 0
            idx = order[pos : pos + bs]
            pos += bs
            out, cache = nn.forward(student, x[idx])
            diff = out - targets[idx]
            losses[k] = float(np.einsum("ij,ij->", diff, diff, dtype=np.float64)) / len(idx)
            diff *= 2.0 / len(idx)
            nn.backward(student, cache, diff, out=grad)
            nn.adam_step(state, student.flat, grad, nn.lr_at(budget.lr, k, steps, budget.decay))
            student.version += 1
        self.trained_steps[c] += steps
        return losses

    def scores(self, x: np.ndarray, merged: bool = True, chunk: int = 1000) -> np.ndarray:
        """Squared prediction error of every student, shape (N, C).

        The teacher runs once per input. With ``merged=True`` the first layer
        of all students is evaluated as one wide layer.
        """
        x = np.asarray(x)
        out = np.empty((len(x), self.num_classes))
        for i in range(0, len(x), chunk):
            xb = x[i : i + chunk]
            t = nn.forward(self.teacher, xb)[0]
            if merged:
                outs = self._merged_student_outputs(xb)
            else:
                outs = [nn.forward(s, xb)[0] for s in self.students]
            for c, o in enumerate(outs):
                d = o - t
                out[i : i + len(xb), c] = np.einsum("ij,ij->i", d, d, dtype=np.float64)
        return out

    def _merged_student_outputs(self, xb):
        first = self.students[0].specs[0]
        C = self.num_classes
        xb = np.asarray(xb, dtype=self.students[0].dtype)
        if first.kind == "dense":
            W = np.concatenate([s.params[0]["W"] for s in self.students], axis=1)
            b = np.concatenate([s.params[0]["b"] for s in self.students])
            h = (xb @ W + b).reshape(len(xb), C, first.out_dim)
            parts = [h[:, c] for c in range(C)]
        else:
            W = np.concatenate([s.params[0]["W"] for s in self.students], axis=0)
            b = np.concatenate([s.params[0]["b"] for s in self.students])
            B, _, H, Wd = xb.shape
            cols = nn._im2col(xb)
            h = (np.matmul(W.reshape(len(W), -1), cols) + b[:, None]).reshape(B, C, first.out_dim, H, Wd)
            parts = [h[:, c] for c in range(C)]
        return [nn.forward(s, p, start=1)[0] for s, p in zip(self.students, parts)]

    def predict(self, x: np.ndarray, merged: bool = True) -> np.ndarray:
        """Class with the smallest prediction error (lowest index on ties)."""
        return np.argmin(self.scores(x, merged=merged), axis=1)

    def param_count(self) -> int:
        # the frozen teacher is regenerated from its seed, so it is not counted
        return sum(nn.count_params(s) for s in self.students)

    def mac_count(self, elementwise: bool = False) -> int:
        shape = self.arch.input_shape
        return nn.count_macs(self.teacher, shape, elementwise) + sum(
            nn.count_macs(s, shape, elementwise) for s in self.students
        )


def build_pec(arch: PECArch, num_classes: int, teacher_seed: int, student_seed: int,
              dtype=np.float32) -> PECClassifier:
    """Frozen teacher from ``teacher_seed``; all students identical from ``student_seed``."""
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    teacher = nn.init_network(arch.specs(arch.teacher_width), arch.init_scheme(teacher_seed),
                              input_shape=arch.input_shape, dtype=dtype, trainable=False)
    template = nn.init_network(arch.specs(arch.student_width), arch.init_scheme(student_seed),
                               input_shape=arch.input_shape, dtype=dtype)
    students = [template.copy() for _ in range(num_classes)]
    return PECClassifier(arch, teacher, students)
