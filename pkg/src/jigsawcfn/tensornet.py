"""Minimal differentiable operators and a sequential graph, on numpy.

Just enough machinery to express one puzzle-branch and its head:
convolution, max-pooling, ReLU, linear, flatten, concatenation, softmax
cross-entropy and SGD. Every operator comes as a pure forward/backward
pair with an explicit cache so gradients can be verified against central
finite differences. Graphs store arrays in a configurable dtype (float32
by default); dense contractions run in that dtype while scalar reductions
(bias sums, losses) accumulate in float64, and gradient checks are meant
to run on float64 graphs.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, fields
from typing import Mapping, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .seeding import derive_rng

Array = np.ndarray


class GraphError(ValueError):
    """Inconsistent layer hyperparameters or an incompatible shape chain."""


class Tensor:
    """A parameter value with an accumulated same-shape gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data: Array):
        self.data = np.asarray(data)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


# ---------------------------------------------------------------------------
# functional operators


def _f64(a: Array) -> Array:
    return a.astype(np.float64, copy=False)


def conv2d_forward(
    x: Array, weight: Array, bias: Array, stride: int = 1, padding: int = 0, groups: int = 1
):
    """Cross-correlate NCHW input with OIHW weights; returns (y, cache).

    Output spatial size is floor((in + 2*pad - k)/stride) + 1 per axis.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise GraphError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if stride < 1 or padding < 0 or groups < 1:
        raise GraphError(f"bad conv hyperparameters: stride={stride} padding={padding} groups={groups}")
    if c % groups != 0 or o % groups != 0 or cg != c // groups:
        raise GraphError(f"channel counts ({c} in, {o} out) not divisible into {groups} groups of {cg}")
    if bias.shape != (o,):
        raise GraphError(f"bias shape {bias.shape} does not match {o} output channels")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise GraphError(f"spatial dims {h}x{w} (+pad {padding}) smaller than kernel {kh}x{kw}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = xp.strides
    # one output position per row, one group's receptive field per column
    patches = as_strided(
        xp,
        shape=(n, oh, ow, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
    )
    cols = patches.reshape(n * oh * ow, groups, cg * kh * kw)
    wmat = weight.reshape(groups, o // groups, cg * kh * kw)
    out = np.empty((n * oh * ow, groups, o // groups), dtype=x.dtype)
    for g in range(groups):
        out[:, g] = cols[:, g] @ wmat[g].T
    y = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2) + bias[None, :, None, None]
    cache = (x.shape, xp.shape, cols, weight, stride, padding, groups, oh, ow)
    return y, cache


def conv2d_backward(gy: Array, cache):
    """Gradients of conv2d w.r.t. (input, weight, bias)."""
    x_shape, xp_shape, cols, weight, stride, padding, groups, oh, ow = cache
    n, c, h, w = x_shape
    o, cg, kh, kw = weight.shape
    og = o // groups

    gym = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(n * oh * ow, groups, og)
    gb = gy.sum(axis=(0, 2, 3), dtype=np.float64).astype(weight.dtype)
    wmat = weight.reshape(groups, og, cg * kh * kw)
    gw = np.empty_like(wmat)
    gcols = np.empty_like(cols)
    for g in range(groups):
        gw[g] = gym[:, g].T @ cols[:, g]
        gcols[:, g] = gym[:, g] @ wmat[g]

    # kernel-offset-major layout so the scatter loop adds contiguous blocks
    gpatches = np.ascontiguousarray(gcols.reshape(n, oh, ow, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
    gxp = np.zeros(xp_shape, dtype=gy.dtype)
    for ki in range(kh):
        for kj in range(kw):
            gxp[:, :, ki : ki + (oh - 1) * stride + 1 : stride, kj : kj + (ow - 1) * stride + 1 : stride] += gpatches[
                ki, kj
            ]
    gx = gxp[:, :, padding : padding + h, padding : padding + w]
    return gx, gw.reshape(weight.shape), gb


def maxpool_forward(x: Array, window: int, stride: int):
    """Per-window maximum over NCHW input; returns (y, cache)."""
    if x.ndim != 4:
        raise GraphError(f"maxpool expects 4-d input, got {x.shape}")
    if window < 1 or stride < 1:
        raise GraphError(f"bad pool hyperparameters: window={window} stride={stride}")
    n, c, h, w = x.shape
    if h < window or w < window:
        raise GraphError(f"spatial dims {h}x{w} smaller than pool window {window}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    sn, sc, sh, sw = x.strides
    view = as_strided(
        x,
        shape=(n, c, oh, ow, window, window),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
    )
    flat = view.reshape(n, c, oh, ow, window * window)
    # argmax takes the first maximum in row-major window scan order
    amax = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, amax[..., None], axis=-1)[..., 0]
    cache = (x.shape, x.dtype, window, stride, amax)
    return y, cache


def maxpool_backward(gy: Array, cache):
    x_shape, x_dtype, window, stride, amax = cache
    n, c, h, w = x_shape
    ni, ci, ohi, owi = np.indices(amax.shape)
    hi = ohi * stride + amax // window
    wi = owi * stride + amax % window
    flat = (((ni * c + ci) * h + hi) * w + wi).ravel()
    # bincount accumulates overlapping-window contributions (in float64)
    gx = np.bincount(flat, weights=gy.ravel(), minlength=n * c * h * w)
    return gx.reshape(x_shape).astype(x_dtype)


def relu_forward(x: Array):
    return np.maximum(x, 0), x > 0


def relu_backward(gy: Array, mask: Array):
    return gy * mask


def linear_forward(x: Array, weight: Array, bias: Array):
    """Affine map y = x @ weight + bias with weight shaped (in, out)."""
    if x.ndim != 2:
        raise GraphError(f"linear expects 2-d input (batch, features), got {x.shape}")
    if x.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise GraphError(f"linear shapes do not chain: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    return x @ weight + bias, (x, weight)


def linear_backward(gy: Array, cache):
    x, weight = cache
    gw = x.T @ gy
    gb = gy.sum(axis=0, dtype=np.float64).astype(weight.dtype)
    gx = gy @ weight.T
    return gx, gw, gb


def flatten_forward(x: Array):
    return x.reshape(x.shape[0], -1), x.shape


def flatten_backward(gy: Array, orig_shape):
    return gy.reshape(orig_shape)


def concat_forward(parts: Sequence[Array]):
    """Join (batch, d_i) feature blocks along the feature axis, in list order."""
    if not parts:
        raise ValueError("concat of an empty list")
    n = parts[0].shape[0]
    for p in parts:
        if p.ndim != 2 or p.shape[0] != n:
            raise GraphError(f"concat expects 2-d blocks with equal batch, got {[q.shape for q in parts]}")
    widths = [p.shape[1] for p in parts]
    return np.concatenate(parts, axis=1), widths


def concat_backward(gy: Array, widths: Sequence[int]):
    return np.split(gy, np.cumsum(widths)[:-1], axis=1)


def softmax_cross_entropy(logits: Array, labels):
    """Mean negative log-softmax of the true class; returns (loss, probs).

    Accepts a single logit vector with an int label or a (batch, classes)
    matrix with a label per row. ``probs`` is float64 and row-normalized.
    """
    z = np.atleast_2d(_f64(logits))
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = z.shape
    if lab.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {lab.shape}")
    if lab.min() < 0 or lab.max() >= k:
        raise ValueError(f"label out of range for {k} classes: {lab.min()}..{lab.max()}")
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(n), lab].mean())
    return loss, np.exp(logp)


def softmax_cross_entropy_backward(probs: Array, labels) -> Array:
    """Gradient of the mean loss w.r.t. the logits, in float64."""
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n = probs.shape[0]
    g = probs.copy()
    g[np.arange(n), lab] -= 1.0
    return g / n


def sgd_update(param: Array, grad: Array, velocity: Array, lr: float, momentum: float = 0.0):
    """One momentum-SGD step: v <- momentum*v + g, p <- p - lr*v; pure."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, velocity {velocity.shape}")
    v = momentum * velocity + grad
    return param - lr * v, v


class SGD:
    """In-place momentum SGD over a named parameter store."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocities = {k: np.zeros_like(t.data) for k, t in self.params.items()}

    def step(self) -> None:
        for key, t in self.params.items():
            v = self.velocities[key]
            v *= self.momentum
            v += t.grad
            t.data -= self.lr * v

    def state_dict(self) -> dict[str, Array]:
        return {k: v.copy() for k, v in self.velocities.items()}

    def load_state_dict(self, state: Mapping[str, Array]) -> None:
        for key, v in self.velocities.items():
            if key not in state or state[key].shape != v.shape:
                raise ValueError(f"optimizer state missing or mismatched for {key}")
            v[...] = state[key]


# ---------------------------------------------------------------------------
# layer specs and the sequential graph


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.out_channels < 1 or self.kernel < 1 or self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise GraphError(f"inconsistent conv spec: {self}")


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise GraphError(f"inconsistent pool spec: {self}")


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Linear:
    out_features: int

    def __post_init__(self):
        if self.out_features < 1:
            raise GraphError(f"inconsistent linear spec: {self}")


LayerSpec = Union[Conv, MaxPool, Relu, Flatten, Linear]

_SPEC_KINDS = {"conv": Conv, "maxpool": MaxPool, "relu": Relu, "flatten": Flatten, "linear": Linear}


def spec_kind(spec: LayerSpec) -> str:
    return type(spec).__name__.lower()


def spec_to_dict(spec: LayerSpec) -> dict:
    d = {"kind": spec_kind(spec)}
    d.update({f.name: getattr(spec, f.name) for f in fields(spec)})
    return d


def spec_from_dict(d: Mapping) -> LayerSpec:
    d = dict(d)
    kind = d.pop("kind")
    if kind not in _SPEC_KINDS:
        raise GraphError(f"unknown layer kind {kind!r}")
    return _SPEC_KINDS[kind](**d)


def infer_shapes(input_shape: Sequence[int], specs: Sequence[LayerSpec]) -> list[tuple[int, ...]]:
    """Per-layer output shapes (excluding batch); raises GraphError on a break."""
    shape = tuple(int(v) for v in input_shape)
    out = []
    for i, spec in enumerate(specs):
        where = f"layer {i} ({spec_kind(spec)})"
        if isinstance(spec, Conv):
            if len(shape) != 3:
                raise GraphError(f"{where}: needs (C,H,W) input, has {shape}")
            c, h, w = shape
            if c % spec.groups or spec.out_channels % spec.groups:
                raise GraphError(f"{where}: {c}->{spec.out_channels} channels not divisible by groups={spec.groups}")
            hp, wp = h + 2 * spec.padding, w + 2 * spec.padding
            if hp < spec.kernel or wp < spec.kernel:
                raise GraphError(f"{where}: kernel {spec.kernel} larger than padded input {hp}x{wp}")
            shape = (
                spec.out_channels,
                (hp - spec.kernel) // spec.stride + 1,
                (wp - spec.kernel) // spec.stride + 1,
            )
        elif isinstance(spec, MaxPool):
            if len(shape) != 3:
                raise GraphError(f"{where}: needs (C,H,W) input, has {shape}")
            c, h, w = shape
            if h < spec.window or w < spec.window:
                raise GraphError(f"{where}: window {spec.window} larger than input {h}x{w}")
            shape = (c, (h - spec.window) // spec.stride + 1, (w - spec.window) // spec.stride + 1)
        elif isinstance(spec, Relu):
            pass
        elif isinstance(spec, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(spec, Linear):
            if len(shape) != 1:
                raise GraphError(f"{where}: needs flat input, has {shape} (missing Flatten?)")
            shape = (spec.out_features,)
        else:
            raise GraphError(f"{where}: unknown spec type {type(spec)}")
        out.append(shape)
    return out


def count_parameters(input_shape: Sequence[int], specs: Sequence[LayerSpec]):
    """Per-layer parameter counts without allocating anything.

    Returns (OrderedDict label -> count, total); labels are '<idx>.<kind>'.
    """
    shapes = [tuple(input_shape)] + infer_shapes(input_shape, specs)
    table: OrderedDict[str, int] = OrderedDict()
    for i, spec in enumerate(specs):
        if isinstance(spec, Conv):
            cin = shapes[i][0]
            n = spec.out_channels * (cin // spec.groups) * spec.kernel * spec.kernel + spec.out_channels
        elif isinstance(spec, Linear):
            n = shapes[i][0] * spec.out_features + spec.out_features
        else:
            continue
        table[f"{i:02d}.{spec_kind(spec)}"] = n
    return table, sum(table.values())


class NetworkGraph:
    """An ordered layer stack with a parameter store keyed by layer index.

    ``forward`` returns the output plus an explicit cache list; ``backward``
    consumes that cache and accumulates (+=) into each Tensor's ``grad``, so
    several forward passes through shared weights naturally sum their
    contributions.
    """

    def __init__(
        self,
        input_shape: Sequence[int],
        specs: Sequence[LayerSpec],
        rng: np.random.Generator | None = None,
        dtype=np.float32,
        init_std: float | None = None,
        output_init_std: float | None = None,
    ):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.specs = tuple(specs)
        self.dtype = np.dtype(dtype)
        self.shapes = infer_shapes(self.input_shape, self.specs)
        self.output_shape = self.shapes[-1] if self.shapes else self.input_shape
        if rng is None:
            rng = derive_rng(0)
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        in_shapes = [self.input_shape] + self.shapes
        last_weighted = max(
            (i for i, s in enumerate(self.specs) if isinstance(s, (Conv, Linear))), default=-1
        )
        # weights draw from the rng in layer order; biases start at zero.
        # init_std None means fan-in-scaled Gaussians, sqrt(2/fan_in);
        # output_init_std overrides the last weighted layer (a near-zero
        # output layer makes a fresh classifier predict uniformly).
        for i, spec in enumerate(self.specs):
            if isinstance(spec, Conv):
                cin = in_shapes[i][0]
                wshape = (spec.out_channels, cin // spec.groups, spec.kernel, spec.kernel)
                fan_in = (cin // spec.groups) * spec.kernel * spec.kernel
                nbias = spec.out_channels
            elif isinstance(spec, Linear):
                wshape = (in_shapes[i][0], spec.out_features)
                fan_in = in_shapes[i][0]
                nbias = spec.out_features
            else:
                continue
            std = init_std if init_std is not None else float(np.sqrt(2.0 / fan_in))
            if i == last_weighted and output_init_std is not None:
                std = output_init_std
            self.params[f"{i}.weight"] = Tensor(rng.normal(0.0, std, wshape).astype(self.dtype))
            self.params[f"{i}.bias"] = Tensor(np.zeros(nbias, dtype=self.dtype))

    def parameters(self) -> OrderedDict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def forward(self, x: Array, upto: int | None = None):
        """Run layers [0, upto); returns (activation, caches)."""
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise GraphError(f"input shape {x.shape[1:]} does not match graph input {self.input_shape}")
        end = len(self.specs) if upto is None else upto
        caches = []
        for i, spec in enumerate(self.specs[:end]):
            if isinstance(spec, Conv):
                x, cache = conv2d_forward(
                    x,
                    self.params[f"{i}.weight"].data,
                    self.params[f"{i}.bias"].data,
                    spec.stride,
                    spec.padding,
                    spec.groups,
                )
            elif isinstance(spec, MaxPool):
                x, cache = maxpool_forward(x, spec.window, spec.stride)
            elif isinstance(spec, Relu):
                x, cache = relu_forward(x)
            elif isinstance(spec, Flatten):
                x, cache = flatten_forward(x)
            elif isinstance(spec, Linear):
                x, cache = linear_forward(x, self.params[f"{i}.weight"].data, self.params[f"{i}.bias"].data)
            caches.append(cache)
        return x, caches

    def backward(self, gy: Array, caches) -> Array:
        """Backpropagate through the layers recorded in ``caches``."""
        g = np.asarray(gy, dtype=self.dtype)
        for i in reversed(range(len(caches))):
            spec, cache = self.specs[i], caches[i]
            if isinstance(spec, Conv):
                g, gw, gb = conv2d_backward(g, cache)
                self.params[f"{i}.weight"].grad += gw
                self.params[f"{i}.bias"].grad += gb
            elif isinstance(spec, MaxPool):
                g = maxpool_backward(g, cache)
            elif isinstance(spec, Relu):
                g = relu_backward(g, cache)
            elif isinstance(spec, Flatten):
                g = flatten_backward(g, cache)
            elif isinstance(spec, Linear):
                g, gw, gb = linear_backward(g, cache)
                self.params[f"{i}.weight"].grad += gw
                self.params[f"{i}.bias"].grad += gb
        return g

    def conv_layer_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.specs) if isinstance(s, Conv)]

    def param_count(self):
        return count_parameters(self.input_shape, self.specs)


def gradient_check(
    graph: NetworkGraph,
    x: Array,
    label,
    epsilon: float = 1e-5,
    max_entries_per_param: int = 20,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference parameter grads.

    Perturbs a random subsample of entries of every parameter tensor. Build
    the graph with dtype float64 for meaningful tolerances.
    """
    y, caches = graph.forward(x)
    loss, probs = softmax_cross_entropy(y, label)
    graph.zero_grad()
    graph.backward(softmax_cross_entropy_backward(probs, label), caches)

    def loss_only() -> float:
        out, _ = graph.forward(x)
        return softmax_cross_entropy(out, label)[0]

    rng = derive_rng(seed)
    worst = 0.0
    for t in graph.params.values():
        size = t.data.size
        idxs = np.arange(size) if size <= max_entries_per_param else rng.choice(size, max_entries_per_param, replace=False)
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        for idx in idxs:
            orig = flat[idx]
            flat[idx] = orig + epsilon
            lp = loss_only()
            flat[idx] = orig - epsilon
            lm = loss_only()
            flat[idx] = orig
            numeric = (lp - lm) / (2 * epsilon)
            analytic = float(gflat[idx])
            rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-6)
            worst = max(worst, rel)
    return worst
