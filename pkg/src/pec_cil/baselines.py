"""Comparison methods: Nearest mean, streaming LDA and small discriminative MLPs.

Nearest mean and SLDA keep closed-form running statistics. Their updates take
a batch of samples, but the result is the same as feeding the samples one by
one (exact streaming merge), so chunked updates still count as a single pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn


def _as_batch(x, y):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if len(x) != len(y):
        raise ValueError("x and y lengths differ")
    return x, y


def _masked_argmin(d: np.ndarray, seen: np.ndarray) -> np.ndarray:
    d = np.where(seen[None, :], d, np.inf)
    return np.argmin(d, axis=1)


class NearestMean:
    """Per-class running means; predicts the closest mean (Euclidean)."""

    def __init__(self, num_classes: int, dim: int):
        self.means = np.zeros((num_classes, dim))
        self.counts = np.zeros(num_classes, dtype=np.int64)

    def update(self, x, y) -> NearestMean:
        x, y = _as_batch(x, y)
        for c in np.unique(y):
            xc = x[y == c]
            n_old, n_new = self.counts[c], len(xc)
            self.means[c] += (xc.sum(axis=0) - n_new * self.means[c]) / (n_old + n_new)
            self.counts[c] += n_new
        return self

    def distances(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return (
            np.sum(x * x, axis=1)[:, None]
            - 2.0 * x @ self.means.T
            + np.sum(self.means * self.means, axis=1)[None, :]
        )

    def predict(self, x) -> np.ndarray:
        if not self.counts.any():
            raise RuntimeError("no class has data yet")
        return _masked_argmin(self.distances(x), self.counts > 0)

    def param_count(self) -> int:
        return int(self.means.size)


class SLDA:
    """Streaming linear discriminant analysis.

    Keeps class means and the pooled within-class scatter. The shared
    covariance starts as the identity, which enters as one pseudo-observation:
    ``cov = (I + scatter) / (1 + n)``. Prediction uses the precision matrix of
    the shrunk covariance ``(1 - eps) * cov + eps * I``.
    """

    def __init__(self, num_classes: int, dim: int, epsilon: float = 0.1):
        if not 0.0 < epsilon <= 1.0:
            raise ValueError("epsilon must be in (0, 1]")
        self.epsilon = epsilon
        self.means = np.zeros((num_classes, dim))
        self.counts = np.zeros(num_classes, dtype=np.int64)
        self.scatter = np.zeros((dim, dim))
        self.n = 0
        self._cache = None

    @property
    def covariance(self) -> np.ndarray:
        dim = self.scatter.shape[0]
        return (np.eye(dim) + self.scatter) / (1.0 + self.n)

    def update(self, x, y) -> SLDA:
        x, y = _as_batch(x, y)
        for c in np.unique(y):
            xc = x[y == c]
            n_old, n_new = int(self.counts[c]), len(xc)
            mean_new = xc.mean(axis=0)
            xm = xc - mean_new
            delta = mean_new - self.means[c]
            # pairwise merge of scatter matrices (parallel variance update)
            self.scatter += xm.T @ xm + (n_old * n_new / (n_old + n_new)) * np.outer(delta, delta)
            self.means[c] += delta * (n_new / (n_old + n_new))
            self.counts[c] += n_new
        self.scatter = 0.5 * (self.scatter + self.scatter.T)
        self.n += len(y)
        self._cache = None
        return self

    def _linear(self, epsilon):
        key = epsilon
        if self._cache is None or self._cache[0] != key:
            dim = self.scatter.shape[0]
            shrunk = (1.0 - epsilon) * self.covariance + epsilon * np.eye(dim)
            precision = np.linalg.inv(shrunk)
            W = precision @ self.means.T
            b = 0.5 * np.sum(self.means.T * W, axis=0)
            self._cache = (key, W, b)
        return self._cache[1], self._cache[2]

    def scores(self, x, epsilon: float | None = None) -> np.ndarray:
        eps = self.epsilon if epsilon is None else epsilon
        W, b = self._linear(eps)
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        s = x @ W - b
        return np.where(self.counts[None, :] > 0, s, -np.inf)

    def predict(self, x, epsilon: float | None = None) -> np.ndarray:
        if not self.counts.any():
            raise RuntimeError("no class has data yet")
        return np.argmax(self.scores(x, epsilon), axis=1)

    def param_count(self) -> int:
        return int(self.means.size + self.scatter.size)


@dataclass
class ReplayBuffer:
    """Reservoir-sampled buffer of (sample, label) pairs."""

    capacity: int = 500
    seed: int = 0
    x: list = field(default_factory=list)
    y: list = field(default_factory=list)
    seen: int = 0

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def __len__(self):
        return len(self.y)

    def insert(self, x, y) -> None:
        if len(self.y) < self.capacity:
            self.x.append(np.array(x))
            self.y.append(int(y))
        else:
            j = int(self.rng.integers(0, self.seen + 1))
            if j < self.capacity:
                self.x[j] = np.array(x)
                self.y[j] = int(y)
        self.seen += 1

    def insert_batch(self, xs, ys) -> None:
        """Insert in order; equivalent to repeated :meth:`insert`."""
        k = 0
        while k < len(ys) and len(self.y) < self.capacity:
            self.insert(xs[k], ys[k])
            k += 1
        if k == len(ys):
            return
        # once full, item number t (0-based) replaces slot j ~ U{0..t} if j < capacity
        js = self.rng.integers(0, self.seen + np.arange(1, len(ys) - k + 1))
        for off in np.flatnonzero(js < self.capacity):
            self.x[js[off]] = np.array(xs[k + off])
            self.y[js[off]] = int(ys[k + off])
        self.seen += len(ys) - k

    def sample(self, b: int) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``b`` items: without replacement if the buffer holds at least ``b``."""
        if not self.y:
            raise ValueError("buffer is empty")
        idx = self.rng.choice(len(self.y), size=b, replace=len(self.y) < b)
        return np.stack([self.x[i] for i in idx]), np.array([self.y[i] for i in idx])

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.stack(self.x), np.array(self.y)


MODES = ("finetune", "er", "labels_trick")


class DiscriminativeMLP:
    """Softmax classifier over all classes trained by Adam.

    ``finetune`` uses plain cross-entropy, ``er`` adds an equally sized replay
    draw to every batch, ``labels_trick`` restricts the softmax to the classes
    of the current task.
    """

    def __init__(self, in_dim: int, num_classes: int, mode: str = "finetune",
                 hidden=(100, 100), seed: int = 0, dtype=np.float32):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.num_classes = num_classes
        self.net = nn.init_network(nn.relu_mlp_specs(in_dim, list(hidden), num_classes),
                                   nn.InitScheme(seed=seed), input_shape=(in_dim,), dtype=dtype)
        self.adam = nn.AdamState.zeros_like(self.net.flat)
        self._grad = np.zeros_like(self.net.flat)

    def train_step(self, x, y, lr: float, buffer: ReplayBuffer | None = None,
                   current_classes=None) -> float:
        x = np.asarray(x)
        y = np.asarray(y)
        columns = None
        if self.mode == "labels_trick":
            if current_classes is None or len(current_classes) == 0:
                raise ValueError("labels trick needs the current task's classes")
            columns = np.sort(np.asarray(current_classes))
        elif self.mode == "er":
            if buffer is None:
                raise ValueError("experience replay needs a buffer")
            if len(buffer):
                bx, by = buffer.sample(len(y))
                x = np.concatenate([x, bx.astype(x.dtype)])
                y = np.concatenate([y, by])
        logits, cache = nn.forward(self.net, x)
        loss, g = nn.cross_entropy(logits, y, columns)
        nn.backward(self.net, cache, g, out=self._grad)
        nn.adam_step(self.adam, self.net.flat, self._grad, lr)
        self.net.version += 1
        return loss

    def predict(self, x) -> np.ndarray:
        return np.argmax(nn.predict(self.net, x), axis=1)

    def param_count(self) -> int:
        return nn.count_params(self.net)
