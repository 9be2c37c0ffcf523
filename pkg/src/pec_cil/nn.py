"""Minimal numpy neural-network engine.

Supports the small, fixed layer menu that the prediction-error classifier and
the baselines need: dense, 3x3 convolution (padding 1), layer/instance
normalization, GELU, ReLU, adaptive average pooling and flatten. Backprop is
written by hand per layer.

All parameters of a network live in one flat vector (``Network.flat``); the
per-layer arrays in ``Network.params`` are views into it. Gradients come back
in the same flat layout, so the optimizer works on a single array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

NORM_EPS = 1e-5

KINDS = (
    "dense",
    "conv3x3",
    "layer_norm",
    "instance_norm",
    "gelu",
    "relu",
    "avg_pool",
    "flatten",
)


class ShapeError(ValueError):
    """Raised when a layer chain or an input does not fit together."""


class StaleCacheError(RuntimeError):
    """Raised when backward is given a cache from before a parameter update."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int | None = None
    out_dim: int | None = None
    pool_target: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")


def dense(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec("dense", in_dim, out_dim)


def conv3x3(in_channels: int, out_channels: int) -> LayerSpec:
    return LayerSpec("conv3x3", in_channels, out_channels)


def layer_norm(dim: int) -> LayerSpec:
    return LayerSpec("layer_norm", dim, dim)


def instance_norm(channels: int) -> LayerSpec:
    return LayerSpec("instance_norm", channels, channels)


def gelu() -> LayerSpec:
    return LayerSpec("gelu")


def relu() -> LayerSpec:
    return LayerSpec("relu")


def avg_pool(target: int) -> LayerSpec:
    return LayerSpec("avg_pool", pool_target=target)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def mlp_specs(in_dim: int, width: int, out_dim: int, depth: int = 1) -> list[LayerSpec]:
    """``depth`` blocks of dense -> layer norm -> GELU, then a dense head."""
    specs = []
    d = in_dim
    for _ in range(depth):
        specs += [dense(d, width), layer_norm(width), gelu()]
        d = width
    specs.append(dense(d, out_dim))
    return specs


def conv_specs(
    in_channels: int, width: int, out_dim: int, pool_target: int, depth: int = 1
) -> list[LayerSpec]:
    """``depth`` blocks of conv -> instance norm -> ReLU, then pool, flatten, dense."""
    specs = []
    c = in_channels
    for _ in range(depth):
        specs += [conv3x3(c, width), instance_norm(width), relu()]
        c = width
    specs += [avg_pool(pool_target), flatten(), dense(width * pool_target**2, out_dim)]
    return specs


def relu_mlp_specs(in_dim: int, hidden: list[int], out_dim: int) -> list[LayerSpec]:
    """Plain ReLU MLP (no normalization), used by the discriminative baselines."""
    specs = []
    d = in_dim
    for h in hidden:
        specs += [dense(d, h), relu()]
        d = h
    specs.append(dense(d, out_dim))
    return specs


# --------------------------------------------------------------------------
# shape algebra


def _param_shapes(spec: LayerSpec) -> dict[str, tuple[int, ...]]:
    if spec.kind == "dense":
        return {"W": (spec.in_dim, spec.out_dim), "b": (spec.out_dim,)}
    if spec.kind == "conv3x3":
        return {"W": (spec.out_dim, spec.in_dim, 3, 3), "b": (spec.out_dim,)}
    if spec.kind == "layer_norm":
        return {"gamma": (spec.in_dim,), "beta": (spec.in_dim,)}
    return {}


def layer_output_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-sample output shape of one layer, or ShapeError."""
    k = spec.kind
    if k == "dense":
        if len(shape) != 1 or shape[0] != spec.in_dim:
            raise ShapeError(f"dense({spec.in_dim}->{spec.out_dim}) got input {shape}")
        return (spec.out_dim,)
    if k == "layer_norm":
        if len(shape) != 1 or shape[0] != spec.in_dim:
            raise ShapeError(f"layer_norm({spec.in_dim}) got input {shape}")
        return shape
    if k in ("conv3x3", "instance_norm"):
        if len(shape) != 3 or shape[0] != spec.in_dim:
            raise ShapeError(f"{k}({spec.in_dim}) got input {shape}")
        return (spec.out_dim, shape[1], shape[2])
    if k == "avg_pool":
        if len(shape) != 3:
            raise ShapeError(f"avg_pool needs (C, H, W) input, got {shape}")
        r = spec.pool_target
        if r is None or r < 1 or r > min(shape[1], shape[2]):
            raise ShapeError(f"pool target {r} invalid for input {shape}")
        return (shape[0], r, r)
    if k == "flatten":
        return (int(np.prod(shape)),)
    return shape  # activations


def infer_shapes(specs, input_shape) -> list[tuple[int, ...]]:
    """Output shape after every layer for a per-sample ``input_shape``."""
    shapes = []
    shape = tuple(int(s) for s in input_shape)
    for spec in specs:
        shape = layer_output_shape(spec, shape)
        shapes.append(shape)
    return shapes


def _check_chain(specs) -> None:
    # Without an input shape only declared feature/channel counts can be compared.
    current = None
    for i, spec in enumerate(specs):
        if spec.kind in ("dense", "conv3x3", "layer_norm", "instance_norm"):
            if spec.in_dim is None or spec.in_dim < 1 or spec.out_dim is None or spec.out_dim < 1:
                raise ShapeError(f"layer {i} ({spec.kind}) needs positive dimensions")
            if current is not None and current != spec.in_dim:
                raise ShapeError(
                    f"layer {i} ({spec.kind}) expects {spec.in_dim} inputs, previous layer gives {current}"
                )
            current = spec.out_dim
        elif spec.kind == "flatten":
            current = None
        elif spec.kind == "avg_pool" and (spec.pool_target is None or spec.pool_target < 1):
            raise ShapeError(f"layer {i}: pool target must be a positive integer")


# --------------------------------------------------------------------------
# network and initialization


@dataclass(frozen=True)
class InitScheme:
    """Weight initialization.

    ``kaiming_uniform`` draws weights and biases from U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    the default of common frameworks. ``xavier`` uses the Glorot-uniform bound for
    weights and zero biases. ``uniform`` draws every weight and bias from U(-a, a).
    """

    kind: str = "kaiming_uniform"
    seed: int = 0
    a: float = 0.01

    def __post_init__(self):
        if self.kind not in ("kaiming_uniform", "xavier", "uniform"):
            raise ValueError(f"unknown init scheme {self.kind!r}")


class Network:
    """Ordered layer list with flat parameter storage."""

    def __init__(self, specs, dtype=np.float32, trainable=True, input_shape=None):
        self.specs = list(specs)
        self.dtype = np.dtype(dtype)
        self.trainable = trainable
        self.input_shape = None if input_shape is None else tuple(input_shape)
        shapes = [_param_shapes(s) for s in self.specs]
        total = sum(int(np.prod(sh)) for d in shapes for sh in d.values())
        self.flat = np.zeros(total, dtype=self.dtype)
        self.params = self.unflatten(self.flat)
        self.version = 0
        self._pool_mats: dict = {}
        self._views = (None, None)

    def unflatten(self, vec: np.ndarray) -> list[dict[str, np.ndarray]]:
        """Per-layer dicts of views into ``vec`` (parameter layout)."""
        out = []
        off = 0
        for spec in self.specs:
            d = {}
            for name, shape in _param_shapes(spec).items():
                n = int(np.prod(shape))
                d[name] = vec[off : off + n].reshape(shape)
                off += n
            out.append(d)
        return out

    def grad_views(self, vec: np.ndarray) -> list[dict[str, np.ndarray]]:
        # one-slot cache: training loops reuse the same gradient buffer
        if self._views[0] is not vec:
            self._views = (vec, self.unflatten(vec))
        return self._views[1]

    @property
    def num_params(self) -> int:
        return int(self.flat.size)

    def copy(self) -> Network:
        net = Network(self.specs, self.dtype, self.trainable, self.input_shape)
        net.flat[:] = self.flat
        return net

    def load_flat(self, vec) -> None:
        self.flat[:] = vec
        self.version += 1

    def output_shape(self, input_shape) -> tuple[int, ...]:
        shapes = infer_shapes(self.specs, input_shape)
        return shapes[-1] if shapes else tuple(input_shape)


def _fan_in(spec: LayerSpec) -> int:
    return spec.in_dim * (9 if spec.kind == "conv3x3" else 1)


def _fan_out(spec: LayerSpec) -> int:
    return spec.out_dim * (9 if spec.kind == "conv3x3" else 1)


def init_network(specs, scheme: InitScheme = InitScheme(), input_shape=None, dtype=np.float32, trainable=True) -> Network:
    """Build and initialize a network. Deterministic in ``(specs, scheme)``."""
    specs = list(specs)
    _check_chain(specs)
    if input_shape is not None:
        infer_shapes(specs, input_shape)
    net = Network(specs, dtype=dtype, trainable=trainable, input_shape=input_shape)
    rng = np.random.default_rng(scheme.seed)
    for spec, p in zip(net.specs, net.params):
        if spec.kind in ("dense", "conv3x3"):
            if scheme.kind == "kaiming_uniform":
                bound = 1.0 / math.sqrt(_fan_in(spec))
                p["W"][...] = rng.uniform(-bound, bound, p["W"].shape)
                p["b"][...] = rng.uniform(-bound, bound, p["b"].shape)
            elif scheme.kind == "xavier":
                bound = math.sqrt(6.0 / (_fan_in(spec) + _fan_out(spec)))
                p["W"][...] = rng.uniform(-bound, bound, p["W"].shape)
                p["b"][...] = 0.0
            else:
                p["W"][...] = rng.uniform(-scheme.a, scheme.a, p["W"].shape)
                p["b"][...] = rng.uniform(-scheme.a, scheme.a, p["b"].shape)
        elif spec.kind == "layer_norm":
            p["gamma"][...] = 1.0
            p["beta"][...] = 0.0
    return net


# --------------------------------------------------------------------------
# layer kernels


def _stats(x, axes):
    # float64 accumulation for the reductions
    mu = x.mean(axis=axes, keepdims=True, dtype=np.float64)
    xc = x - mu.astype(x.dtype)
    var = np.mean(np.square(xc), axis=axes, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + NORM_EPS)).astype(x.dtype)
    return xc * inv, inv


def _norm_backward(g, xh, inv, axes):
    gm = g.mean(axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype)
    gxm = (g * xh).mean(axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype)
    return inv * (g - gm - xh * gxm)


def _im2col(x):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    # (B, C, H, W, 3, 3) -> (B, C, 3, 3, H, W) -> (B, 9C, HW)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * 9, h * w)


def pool_matrix(h: int, w: int, r: int, dtype=np.float64) -> np.ndarray:
    """(r*r, h*w) averaging matrix for adaptive average pooling.

    Output cell (i, j) averages rows [floor(i*h/r), ceil((i+1)*h/r)) and the
    analogous column window.
    """
    P = np.zeros((r * r, h * w), dtype=dtype)
    for i in range(r):
        r0, r1 = (i * h) // r, -((-(i + 1) * h) // r)
        for j in range(r):
            c0, c1 = (j * w) // r, -((-(j + 1) * w) // r)
            cell = np.zeros((h, w), dtype=dtype)
            cell[r0:r1, c0:c1] = 1.0 / ((r1 - r0) * (c1 - c0))
            P[i * r + j] = cell.ravel()
    return P


def _layer_forward(net: Network, i: int, x: np.ndarray):
    spec, p = net.specs[i], net.params[i]
    k = spec.kind
    if k == "dense":
        return x @ p["W"] + p["b"], x
    if k == "conv3x3":
        b, _, h, w = x.shape
        cols = _im2col(x)
        W2 = p["W"].reshape(spec.out_dim, -1)
        y = np.matmul(W2, cols) + p["b"][:, None]
        return y.reshape(b, spec.out_dim, h, w), cols
    if k == "layer_norm":
        xh, inv = _stats(x, -1)
        return xh * p["gamma"] + p["beta"], (xh, inv)
    if k == "instance_norm":
        xh, inv = _stats(x, (2, 3))
        return xh, (xh, inv)
    if k == "gelu":
        cdf = 0.5 * (1.0 + erf(x * np.asarray(1 / math.sqrt(2), dtype=x.dtype)))
        return x * cdf, (x, cdf)
    if k == "relu":
        mask = x > 0
        return x * mask, mask
    if k == "avg_pool":
        b, c, h, w = x.shape
        r = spec.pool_target
        key = (h, w, r)
        if key not in net._pool_mats:
            net._pool_mats[key] = pool_matrix(h, w, r, dtype=x.dtype)
        P = net._pool_mats[key]
        return (x.reshape(b, c, h * w) @ P.T).reshape(b, c, r, r), (x.shape, P)
    if k == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    raise ShapeError(k)


def _layer_backward(net: Network, i: int, cache, g: np.ndarray, gp: dict, need_input_grad: bool):
    spec, p = net.specs[i], net.params[i]
    k = spec.kind
    if k == "dense":
        x = cache
        np.matmul(x.T, g, out=gp["W"])
        g.sum(axis=0, out=gp["b"])
        return g @ p["W"].T if need_input_grad else None
    if k == "conv3x3":
        cols = cache
        b, o, h, w = g.shape
        g2 = g.reshape(b, o, h * w)
        gp["W"][...] = np.einsum("boh,bkh->ok", g2, cols).reshape(gp["W"].shape)
        gp["b"][...] = g2.sum(axis=(0, 2))
        if not need_input_grad:
            return None
        W2 = p["W"].reshape(o, -1)
        dcols = np.matmul(W2.T, g2).reshape(b, spec.in_dim, 3, 3, h, w)
        gxp = np.zeros((b, spec.in_dim, h + 2, w + 2), dtype=g.dtype)
        for di in range(3):
            for dj in range(3):
                gxp[:, :, di : di + h, dj : dj + w] += dcols[:, :, di, dj]
        return gxp[:, :, 1:-1, 1:-1]
    if k == "layer_norm":
        xh, inv = cache
        np.sum(g * xh, axis=0, out=gp["gamma"])
        g.sum(axis=0, out=gp["beta"])
        return _norm_backward(g * p["gamma"], xh, inv, -1) if need_input_grad else None
    if k == "instance_norm":
        xh, inv = cache
        return _norm_backward(g, xh, inv, (2, 3)) if need_input_grad else None
    if k == "gelu":
        x, cdf = cache
        pdf = np.exp(-0.5 * x * x) * np.asarray(1 / math.sqrt(2 * math.pi), dtype=x.dtype)
        return g * (cdf + x * pdf)
    if k == "relu":
        return g * cache
    if k == "avg_pool":
        shape, P = cache
        b, c = shape[:2]
        return (g.reshape(b, c, -1) @ P).reshape(shape)
    if k == "flatten":
        return g.reshape(cache)
    raise ShapeError(k)


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class Cache:
    version: int
    layer_caches: list = field(default_factory=list)


def forward(net: Network, batch: np.ndarray, start: int = 0):
    """Run ``batch`` (leading batch axis) through layers ``start:``.

    Returns ``(output, cache)``; the cache is what ``backward`` needs.
    """
    x = np.asarray(batch, dtype=net.dtype)
    if start == 0 and net.input_shape is not None and tuple(x.shape[1:]) != net.input_shape:
        raise ShapeError(f"network expects per-sample shape {net.input_shape}, got {x.shape[1:]}")
    cache = Cache(net.version)
    try:
        for i in range(start, len(net.specs)):
            x, c = _layer_forward(net, i, x)
            cache.layer_caches.append(c)
    except ValueError as err:
        if isinstance(err, ShapeError):
            raise
        raise ShapeError(str(err)) from err
    return x, cache


def predict(net: Network, batch: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Forward pass without keeping caches, in chunks."""
    batch = np.asarray(batch)
    outs = [forward(net, batch[i : i + chunk])[0] for i in range(0, len(batch), chunk)]
    if not outs:
        return np.zeros((0,) + net.output_shape(batch.shape[1:]), dtype=net.dtype)
    return np.concatenate(outs)


def backward(net: Network, cache: Cache, grad_out: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Gradient of the loss w.r.t. all parameters, in the ``net.flat`` layout.

    ``grad_out`` is dLoss/dOutput for the batch that produced ``cache``.
    """
    if cache.version != net.version:
        raise StaleCacheError("parameters changed since this forward pass")
    if out is None:
        out = np.zeros_like(net.flat)
    grads = net.grad_views(out)
    g = np.asarray(grad_out, dtype=net.dtype)
    start = len(net.specs) - len(cache.layer_caches)
    for j in range(len(cache.layer_caches) - 1, -1, -1):
        i = start + j
        g = _layer_backward(net, i, cache.layer_caches[j], g, grads[i], need_input_grad=j > 0)
    return out


def input_gradient(net: Network, cache: Cache, grad_out: np.ndarray) -> np.ndarray:
    """dLoss/dInput, used for gradient checks through the whole chain."""
    scratch = np.zeros_like(net.flat)
    grads = net.unflatten(scratch)
    g = np.asarray(grad_out, dtype=net.dtype)
    for i in range(len(cache.layer_caches) - 1, -1, -1):
        g = _layer_backward(net, i, cache.layer_caches[i], g, grads[i], need_input_grad=True)
    return g


# --------------------------------------------------------------------------
# losses


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray, columns=None):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits.

    With ``columns`` the softmax only runs over those logit columns; the
    others get zero gradient. Labels must be inside ``columns``.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if columns is None:
        z = logits
        target = labels
    else:
        columns = np.asarray(columns)
        pos = {int(c): j for j, c in enumerate(columns)}
        try:
            target = np.array([pos[int(y)] for y in labels])
        except KeyError as err:
            raise ValueError(f"label {err.args[0]} not among the restricted columns") from None
        z = logits[:, columns]
    p = softmax(z)
    loss = float(-np.mean(np.log(p[np.arange(n), target] + 1e-30)))
    gz = p
    gz[np.arange(n), target] -= 1.0
    gz /= n
    if columns is None:
        return loss, gz
    g = np.zeros_like(logits)
    g[:, columns] = gz
    return loss, g


# --------------------------------------------------------------------------
# optimizer


FLUSH_EVERY = 64


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: np.ndarray, **kw) -> AdamState:
        return cls(np.zeros_like(params), np.zeros_like(params), **kw)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float) -> None:
    """In-place Adam update with bias correction (framework-standard form)."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError("params, grads and optimizer state must have the same shape")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    m, v = state.m, state.v
    m *= b1
    m += (1.0 - b1) * grads
    v *= b2
    v += (1.0 - b2) * np.square(grads)
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    denom = np.sqrt(v)
    denom /= math.sqrt(bc2)
    denom += state.eps
    params -= (lr / bc1) * m / denom
    if state.step % FLUSH_EVERY == 0:
        # moments of parameters with persistently zero gradient decay into the
        # subnormal range, where arithmetic is very slow; flush them to zero
        tiny = np.finfo(m.dtype).tiny
        np.copyto(m, 0, where=np.abs(m) < tiny)
        np.copyto(v, 0, where=v < tiny)


def lr_at(initial: float, step: int, total_steps: int, decay: bool) -> float:
    """Learning rate at ``step``; linear decay reaches zero at ``total_steps``."""
    if not decay:
        return initial
    if total_steps <= 0:
        raise ValueError("linear decay needs total_steps > 0")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return initial * (1.0 - step / total_steps)


# --------------------------------------------------------------------------
# accounting


def count_params(net: Network) -> int:
    """Trainable parameter count, normalization affine terms included."""
    return net.num_params


def count_macs(net: Network, input_shape, elementwise: bool = False) -> int:
    """Multiply-accumulates for one forward pass of a single sample.

    Dense layers cost in*out and convolutions 9*Cin*Cout*H*W. With
    ``elementwise=True`` the per-element work that profiling tools also
    report is added: one op per bias add, four per normalized element (five
    with an affine transform), one per activation element and one per pooled
    input element.
    """
    total = 0
    shape = tuple(input_shape)
    for spec in net.specs:
        out = layer_output_shape(spec, shape)
        n_out = int(np.prod(out))
        k = spec.kind
        if k == "dense":
            total += spec.in_dim * spec.out_dim + (n_out if elementwise else 0)
        elif k == "conv3x3":
            total += 9 * spec.in_dim * spec.out_dim * out[1] * out[2] + (n_out if elementwise else 0)
        elif elementwise:
            if k == "layer_norm":
                total += 5 * n_out
            elif k == "instance_norm":
                total += 4 * n_out
            elif k in ("gelu", "relu"):
                total += n_out
            elif k == "avg_pool":
                total += int(np.prod(shape))
        shape = out
    return total
