"""Gaussian-process view of prediction-error classification.

With teachers ``h`` drawn from a zero-mean GP prior and a student fitted to
``h`` on the class data ``X``, the expected squared imitation error at ``x*``
is bounded below by the GP posterior variance at ``x*`` given ``X``. This
module computes that variance exactly, runs the corresponding classification
rule, and estimates imitation errors with small trained networks so the bound
and its large-sample behaviour can be checked numerically.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import erf

from . import nn

JITTER = 1e-10


class NumericalError(RuntimeError):
    pass


def _as_points(x, dim: int = 1) -> np.ndarray:
    """Rows of points; scalars and 1-D arrays are read as 1-D inputs."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return np.zeros((0, x.shape[1] if x.ndim == 2 else dim))
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x[:, None]
    return x


@dataclass(frozen=True)
class RBFKernel:
    lengthscale: float = 1.0
    amplitude: float = 1.0  # k(x, x)

    def __post_init__(self):
        if self.lengthscale <= 0 or self.amplitude <= 0:
            raise ValueError("lengthscale and amplitude must be > 0")

    def __call__(self, a, b) -> np.ndarray:
        a, b = _as_points(a), _as_points(b)
        d2 = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T
        return self.amplitude * np.exp(-0.5 * np.maximum(d2, 0.0) / self.lengthscale**2)


@dataclass
class GPModel:
    """Training inputs only; the posterior variance does not depend on targets."""

    kernel: RBFKernel
    X: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))

    def __post_init__(self):
        self.X = _as_points(self.X)


def posterior_variance(model: GPModel, x_star) -> np.ndarray:
    """k(x*, x*) - k(x*, X) k(X, X)^-1 k(X, x*) at each row of ``x_star``."""
    xs = _as_points(x_star)
    prior = np.full(len(xs), model.kernel.amplitude)
    if len(model.X) == 0:
        return prior
    K = model.kernel(model.X, model.X) + JITTER * np.eye(len(model.X))
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError as e:
        raise NumericalError("Gram matrix is not positive definite even with jitter") from e
    V = np.linalg.solve(L, model.kernel(model.X, xs))
    return np.clip(prior - np.sum(V * V, axis=0), 0.0, model.kernel.amplitude)


TIE_TOL = 1e-12


def gp_classify(models: list[GPModel], x_star) -> np.ndarray:
    """Class whose inputs leave the smallest posterior variance.

    Variances within ``TIE_TOL * amplitude`` of the minimum count as ties
    (round-off makes mirror-image classes differ in the last bits); ties go
    to the lowest index.
    """
    kernels = {m.kernel for m in models}
    if len(kernels) != 1:
        raise ValueError("all class models must share one kernel")
    v = np.stack([posterior_variance(m, x_star) for m in models], axis=1)
    tol = TIE_TOL * kernels.pop().amplitude
    return np.argmax(v <= v.min(axis=1, keepdims=True) + tol, axis=1)


def sample_gp_function(kernel: RBFKernel, grid, seed=0, size: int | None = None) -> np.ndarray:
    """Draw(s) of a zero-mean GP on ``grid``.

    Uses the symmetric eigendecomposition with negative eigenvalues clipped,
    so singular Gram matrices (repeated grid points) are handled exactly.
    Returns shape (len(grid),) or (size, len(grid)).
    """
    pts = _as_points(grid)
    if not np.all(np.isfinite(pts)):
        raise ValueError("grid must be finite")
    K = kernel(pts, pts)
    w, U = np.linalg.eigh(K)
    if w.min() < -1e-6 * kernel.amplitude * len(pts):
        raise NumericalError("Gram matrix has a large negative eigenvalue")
    root = U * np.sqrt(np.clip(w, 0.0, None))
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((1 if size is None else size, len(pts)))
    f = z @ root.T
    return f[0] if size is None else f


# --------------------------------------------------------------------------
# imitation-error estimates


@dataclass
class ImitatorConfig:
    width: int = 256
    lr: float = 0.01
    tol: float = 1e-6  # stop once training MSE is below this
    max_steps: int = 10_000
    seed: int = 0


@dataclass
class ImitatorFit:
    net: nn.Network
    mse: float
    steps: int


def fit_imitator(X, targets, cfg: ImitatorConfig = ImitatorConfig()) -> ImitatorFit:
    """One-hidden-layer GELU network fitted full-batch by Adam (float64)."""
    X = _as_points(X)
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    specs = [nn.dense(X.shape[1], cfg.width), nn.gelu(), nn.dense(cfg.width, 1)]
    net = nn.init_network(specs, nn.InitScheme(seed=cfg.seed), input_shape=(X.shape[1],), dtype=np.float64)
    if len(X) == 0:
        return ImitatorFit(net, 0.0, 0)
    state = nn.AdamState.zeros_like(net.flat)
    grad = np.zeros_like(net.flat)
    mse = math.inf
    for k in range(cfg.max_steps):
        out, cache = nn.forward(net, X)
        diff = out - t
        mse = float(np.mean(diff * diff))
        if not math.isfinite(mse):
            raise NumericalError("imitator training diverged")
        if mse < cfg.tol:
            return ImitatorFit(net, mse, k)
        nn.backward(net, cache, diff * (2.0 / len(X)), out=grad)
        nn.adam_step(state, net.flat, grad, cfg.lr)
        net.version += 1
    out = nn.forward(net, X)[0]
    mse = float(np.mean((out - t) ** 2))
    return ImitatorFit(net, mse, cfg.max_steps)


def _gelu(z):
    cdf = 0.5 * (1.0 + erf(z / math.sqrt(2.0)))
    return z * cdf, cdf + z * np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def fit_imitators(X, targets, cfg: ImitatorConfig = ImitatorConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Fit one imitator per row of ``targets`` (B, N) in a single batched loop.

    Every network starts from the initialization :func:`fit_imitator` would
    use and follows the same Adam trajectory, stopping individually once its
    MSE is below ``cfg.tol``. Returns the parameter rows and final MSEs; use
    :func:`imitator_outputs` to evaluate them.
    """
    X = _as_points(X)
    T = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    B, (N, d), w = len(T), X.shape, cfg.width
    template = fit_imitator(np.zeros((0, d)), [], replace(cfg, max_steps=0)).net.flat
    P = np.tile(template, (B, 1))
    if N == 0:
        return P, np.zeros(B)
    m, v = np.zeros_like(P), np.zeros_like(P)
    mse = np.full(B, np.inf)
    active = np.arange(B)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for k in range(cfg.max_steps + 1):
        W1, c1, W2, c2 = _unpack(P[active], d, w)
        z = np.einsum("nd,bdw->bnw", X, W1) + c1[:, None, :]
        a, da = _gelu(z)
        out = np.einsum("bnw,bw->bn", a, W2) + c2
        diff = out - T[active]
        mse[active] = np.mean(diff * diff, axis=1)
        if not np.all(np.isfinite(mse[active])):
            raise NumericalError("imitator training diverged")
        keep = mse[active] >= cfg.tol
        if k == cfg.max_steps or not keep.any():
            break
        g = diff * (2.0 / N)
        gz = g[:, :, None] * W2[:, None, :] * da
        grad = np.concatenate([
            np.einsum("nd,bnw->bdw", X, gz).reshape(len(active), -1),
            gz.sum(axis=1),
            np.einsum("bn,bnw->bw", g, a),
            g.sum(axis=1, keepdims=True),
        ], axis=1)
        active, grad = active[keep], grad[keep]
        # same update as nn.adam_step, applied to the still-active rows
        m[active] = b1 * m[active] + (1 - b1) * grad
        v[active] = b2 * v[active] + (1 - b2) * grad**2
        denom = np.sqrt(v[active]) / math.sqrt(1 - b2 ** (k + 1)) + eps
        P[active] -= (cfg.lr / (1 - b1 ** (k + 1))) * m[active] / denom
    return P, mse


def _unpack(P, d, w):
    B = len(P)
    W1 = P[:, : d * w].reshape(B, d, w)
    c1 = P[:, d * w : d * w + w]
    W2 = P[:, d * w + w : d * w + 2 * w]
    c2 = P[:, -1:]
    return W1, c1, W2, c2


def imitator_outputs(P, x, width: int) -> np.ndarray:
    """Outputs (B, M) of batched imitators at the points ``x``."""
    x = _as_points(x)
    W1, c1, W2, c2 = _unpack(P, x.shape[1], width)
    a, _ = _gelu(np.einsum("nd,bdw->bnw", x, W1) + c1[:, None, :])
    return np.einsum("bnw,bw->bn", a, W2) + c2


def imitation_errors(kernel: RBFKernel, X, x_star, B: int, cfg: ImitatorConfig = ImitatorConfig(),
                     seed: int = 0) -> np.ndarray:
    """Squared errors (B, M): row i is ||g_i(x*) - h_i(x*)||^2 for teacher draw i.

    Each teacher ``h_i`` is sampled jointly on X and x*; the imitator sees
    only its values on X.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    xs = _as_points(x_star)
    X = _as_points(X, xs.shape[1])
    H = sample_gp_function(kernel, np.concatenate([X, xs]), seed=seed, size=B)
    P, _ = fit_imitators(X, H[:, : len(X)], cfg)
    return (imitator_outputs(P, xs, cfg.width) - H[:, len(X) :]) ** 2


@dataclass
class SBEstimate:
    mean: np.ndarray  # s_B at each x*
    stderr: np.ndarray
    errors: np.ndarray  # (B, M)


def estimate_s_B(kernel: RBFKernel, X, x_star, B: int, cfg: ImitatorConfig = ImitatorConfig(),
                 seed: int = 0) -> SBEstimate:
    """Mean squared imitation error over B teacher draws, with its standard error."""
    errs = imitation_errors(kernel, X, x_star, B, cfg, seed)
    se = errs.std(axis=0, ddof=1) / math.sqrt(B) if B > 1 else np.zeros(errs.shape[1])
    return SBEstimate(errs.mean(axis=0), se, errs)


# --------------------------------------------------------------------------
# numerical checks of the two propositions


@dataclass
class Prop1Report:
    B: int
    margin_se: float
    pass_fraction: float
    x_star: list
    s_B: list
    stderr: list
    posterior_var: list

    def to_dict(self) -> dict:
        return asdict(self)


def check_proposition1(kernel: RBFKernel, X, test_points, B: int = 64, cfg: ImitatorConfig = ImitatorConfig(),
                       seed: int = 0, margin_se: float = 3.0) -> Prop1Report:
    """Test s_B(x*) >= posterior variance(x*) - margin_se * SE at every test point."""
    if B < 64:
        raise ValueError("use B >= 64 for a meaningful check")
    est = estimate_s_B(kernel, X, test_points, B, cfg, seed)
    var = posterior_variance(GPModel(kernel, X), test_points)
    ok = est.mean >= var - margin_se * est.stderr
    xs = _as_points(test_points)
    return Prop1Report(B, margin_se, float(ok.mean()), xs.tolist(), est.mean.tolist(),
                       est.stderr.tolist(), var.tolist())


@dataclass
class Prop2Report:
    Ns: list
    mean_s1: list
    stderr: list
    margin_se: float
    non_increasing: bool

    def to_dict(self) -> dict:
        return asdict(self)


def mean_s1(kernel: RBFKernel, X, x_star, repeats: int, cfg: ImitatorConfig, seed: int):
    """Per-repeat mean over x* of single-draw imitation errors."""
    return np.array([imitation_errors(kernel, X, x_star, 1, cfg, seed=[seed, r]).mean()
                     for r in range(repeats)])


def check_proposition2(kernel: RBFKernel, Ns=(10, 100, 1000), low: float = -1.0, high: float = 1.0,
                       n_test: int = 50, repeats: int = 8, cfg: ImitatorConfig = ImitatorConfig(),
                       seed: int = 0, margin_se: float = 3.0) -> Prop2Report:
    """Mean s_1 over x* ~ U[low, high] with training sets of N uniform draws.

    Every repeat draws a fresh training set, test set and teacher. The trend
    passes if each mean is at most the previous one plus ``margin_se``
    combined standard errors.
    """
    Ns = [int(n) for n in Ns]
    if any(b <= a for a, b in zip(Ns, Ns[1:])):
        raise ValueError("Ns must be increasing")
    means, ses = [], []
    for j, n in enumerate(Ns):
        vals = []
        for r in range(repeats):
            rng = np.random.default_rng([seed, j, r])
            X = rng.uniform(low, high, n)
            xs = rng.uniform(low, high, n_test)
            vals.append(imitation_errors(kernel, X, xs, 1, cfg, seed=[seed, j, r, 1]).mean())
        vals = np.array(vals)
        means.append(float(vals.mean()))
        ses.append(float(vals.std(ddof=1) / math.sqrt(repeats)) if repeats > 1 else 0.0)
    ok = all(means[i + 1] <= means[i] + margin_se * math.hypot(ses[i], ses[i + 1])
             for i in range(len(Ns) - 1))
    return Prop2Report(Ns, means, ses, margin_se, ok)


def saturated_s1(kernel: RBFKernel, support, repeats: int = 4, cfg: ImitatorConfig = ImitatorConfig(),
                 seed: int = 0) -> np.ndarray:
    """Mean s_1 over a finite support when the training set is the whole support."""
    support = _as_points(support)
    return mean_s1(kernel, support, support, repeats, cfg, seed)
