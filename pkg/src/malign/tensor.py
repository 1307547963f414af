"""Dense tensors and layer-wise reverse-mode differentiation.

Tensors are plain float64 numpy arrays. A :class:`Model` is an ordered stack of
:class:`LayerSpec` entries plus named parameters; ``forward`` records a per-layer
cache and ``backward`` walks the stack in reverse applying each layer's
vector-Jacobian product. Gradients with respect to the input are first class,
which is what every attack and smoothness measurement needs.

Hidden representations follow the usual indexing: ``z[0]`` is the input and
``z[i]`` is the output of layer ``i`` (1-based), so ``z[l]`` is the probability
vector and ``z[l-1]`` the logits.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DivergenceError, ShapeError

Tensor = np.ndarray
LossFn = Callable[[np.ndarray], tuple]

# Floor applied to probabilities before taking a log. Fixed, not configurable.
LOG_FLOOR = 1e-12

LAYER_KINDS = ("dense", "conv2d", "relu", "maxpool2d", "avgpool2d", "flatten", "softmax")
PARAM_KINDS = ("dense", "conv2d")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and (self.in_features < 1 or self.out_features < 1):
            raise ConfigError("dense layer needs positive in/out features")
        if self.kind == "conv2d" and min(self.in_channels, self.out_channels, self.kernel_size) < 1:
            raise ConfigError("conv2d layer needs positive channels and kernel size")
        if self.kind in ("maxpool2d", "avgpool2d") and self.kernel_size < 1:
            raise ConfigError(f"{self.kind} needs a positive kernel size")
        if self.stride < 1 or self.padding < 0:
            raise ConfigError("stride must be >= 1 and padding >= 0")

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        for f in dataclasses.fields(self):
            if f.name != "kind" and getattr(self, f.name) != f.default:
                out[f.name] = getattr(self, f.name)
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSpec":
        return cls(**dict(d))

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "dense":
            return {"weight": (self.out_features, self.in_features), "bias": (self.out_features,)}
        if self.kind == "conv2d":
            k = self.kernel_size
            return {
                "weight": (self.out_channels, self.in_channels, k, k),
                "bias": (self.out_channels,),
            }
        return {}

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape; raises ShapeError if ``in_shape`` is not accepted."""
        k = self.kind
        if k == "dense":
            if in_shape != (self.in_features,):
                raise ShapeError(f"expects input ({self.in_features},), got {in_shape}")
            return (self.out_features,)
        if k in ("relu", "softmax"):
            if k == "softmax" and len(in_shape) != 1:
                raise ShapeError(f"softmax expects a flat vector, got {in_shape}")
            return in_shape
        if k == "flatten":
            return (int(np.prod(in_shape)),)
        if len(in_shape) != 3:
            raise ShapeError(f"expects (channels, height, width), got {in_shape}")
        c, h, w = in_shape
        if k == "conv2d":
            if c != self.in_channels:
                raise ShapeError(f"expects {self.in_channels} input channels, got {c}")
            c = self.out_channels
            pad = self.padding
        else:
            pad = 0
        ho = (h + 2 * pad - self.kernel_size) // self.stride + 1
        wo = (w + 2 * pad - self.kernel_size) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"kernel {self.kernel_size} does not fit spatial size {(h, w)}")
        return (c, ho, wo)


def dense(in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec("dense", in_features=in_features, out_features=out_features)


def conv2d(in_channels: int, out_channels: int, kernel_size: int, stride: int = 1, padding: int = 0) -> LayerSpec:
    return LayerSpec(
        "conv2d",
        in_channels=in_channels,
        out_channels=out_channels,
        kernel_size=kernel_size,
        stride=stride,
        padding=padding,
    )


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool2d(kernel_size: int, stride: int | None = None) -> LayerSpec:
    return LayerSpec("maxpool2d", kernel_size=kernel_size, stride=stride or kernel_size)


def avgpool2d(kernel_size: int, stride: int | None = None) -> LayerSpec:
    return LayerSpec("avgpool2d", kernel_size=kernel_size, stride=stride or kernel_size)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def softmax() -> LayerSpec:
    return LayerSpec("softmax")


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Model:
    """Immutable feed-forward model. ``params`` keys are ``"<layer>.<weight|bias>"``
    with 1-based layer indices."""

    layers: tuple[LayerSpec, ...]
    params: Mapping[str, np.ndarray]
    input_shape: tuple[int, ...]
    arch_id: str = "custom"
    init_seed: int = 0
    shapes: tuple[tuple[int, ...], ...] = field(init=False, repr=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if not layers or layers[-1].kind != "softmax":
            raise ShapeError("the last layer must be softmax")
        if sum(s.kind == "softmax" for s in layers) != 1:
            raise ShapeError("exactly one softmax layer is allowed")
        shapes = [self.input_shape]
        for i, spec in enumerate(layers, start=1):
            try:
                shapes.append(spec.output_shape(shapes[-1]))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({spec.kind}): {exc}") from None
        object.__setattr__(self, "shapes", tuple(shapes))
        expected = {}
        for i, spec in enumerate(layers, start=1):
            for suffix, shp in spec.param_shapes().items():
                expected[f"{i}.{suffix}"] = shp
        if set(expected) != set(self.params):
            raise ShapeError(f"parameter names {sorted(self.params)} do not match layers {sorted(expected)}")
        params = {}
        for name, shp in expected.items():
            arr = _frozen(self.params[name])
            if arr.shape != shp:
                raise ShapeError(f"parameter {name} has shape {arr.shape}, layer expects {shp}")
            params[name] = arr
        object.__setattr__(self, "params", params)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    @property
    def embedding_layer(self) -> int:
        """Index of the representation fed to the final dense layer."""
        dense_ids = [i for i, s in enumerate(self.layers, start=1) if s.kind == "dense"]
        if not dense_ids:
            raise ShapeError("model has no dense layer")
        return dense_ids[-1] - 1

    @property
    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def layer_params(self, i: int) -> dict[str, np.ndarray]:
        prefix = f"{i}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def with_params(self, params: Mapping[str, np.ndarray], arch_id: str | None = None) -> "Model":
        return Model(self.layers, dict(params), self.input_shape, arch_id or self.arch_id, self.init_seed)


@dataclass
class GradientBundle:
    param_grads: dict[str, np.ndarray]
    input_grad: np.ndarray
    loss_value: float


# -- per-layer kernels -------------------------------------------------------


def _windows(x: np.ndarray, k: int, s: int) -> np.ndarray:
    # (B, C, Ho, Wo, k, k) strided view
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]


def _scatter_windows(dx: np.ndarray, cols: np.ndarray, k: int, s: int, ho: int, wo: int) -> None:
    # adjoint of _windows: cols is (B, C, Ho, Wo, k, k)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += cols[..., i, j]


def _layer_forward(spec: LayerSpec, p: dict, x: np.ndarray):
    k = spec.kind
    if k == "dense":
        return x @ p["weight"].T + p["bias"], x
    if k == "relu":
        return np.maximum(x, 0.0), x
    if k == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    if k == "softmax":
        out = softmax_t(x, 1.0)
        return out, out
    if k == "conv2d":
        pad = spec.padding
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        cols = _windows(xp, spec.kernel_size, spec.stride)
        out = np.tensordot(cols, p["weight"], axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
        out = out.transpose(0, 3, 1, 2) + p["bias"][None, :, None, None]
        return np.ascontiguousarray(out), (xp.shape, cols)
    ks, s = spec.kernel_size, spec.stride
    win = _windows(x, ks, s)
    if k == "maxpool2d":
        flat = win.reshape(win.shape[:4] + (ks * ks,))
        arg = np.argmax(flat, axis=-1)  # first maximal element on ties
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg)
    out = win.mean(axis=(4, 5))
    return out, x.shape


def _layer_backward(spec: LayerSpec, p: dict, cache, g: np.ndarray, need_params: bool):
    k = spec.kind
    grads = {}
    if k == "dense":
        x = cache
        if need_params:
            grads = {"weight": g.T @ x, "bias": g.sum(axis=0)}
        return g @ p["weight"], grads
    if k == "relu":
        return g * (cache > 0), grads
    if k == "flatten":
        return g.reshape(cache), grads
    if k == "softmax":
        return softmax_t_vjp(cache, g, 1.0), grads
    if k == "conv2d":
        xp_shape, cols = cache
        ks, s, pad = spec.kernel_size, spec.stride, spec.padding
        ho, wo = g.shape[2], g.shape[3]
        if need_params:
            grads = {
                "weight": np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])),
                "bias": g.sum(axis=(0, 2, 3)),
            }
        dcols = np.tensordot(g, p["weight"], axes=([1], [0]))  # (B, Ho, Wo, C, k, k)
        dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros(xp_shape)
        _scatter_windows(dxp, dcols, ks, s, ho, wo)
        if pad:
            dxp = dxp[:, :, pad:-pad, pad:-pad]
        return dxp, grads
    ks, s = spec.kernel_size, spec.stride
    ho, wo = g.shape[2], g.shape[3]
    if k == "maxpool2d":
        x_shape, arg = cache
        dx = np.zeros(x_shape)
        for idx in range(ks * ks):
            i, j = divmod(idx, ks)
            dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += np.where(arg == idx, g, 0.0)
        return dx, grads
    dx = np.zeros(cache)
    share = g / (ks * ks)
    for i in range(ks):
        for j in range(ks):
            dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += share
    return dx, grads


# -- forward / backward ------------------------------------------------------


def _as_batch(model: Model, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == model.input_shape:
        return x[None], False
    if x.shape[1:] == model.input_shape:
        return x, True
    raise ShapeError(
        f"layer 1 ({model.layers[0].kind}): expects input {model.input_shape} "
        f"(optionally with a leading batch axis), got {x.shape}"
    )


def _check_layer(model: Model, q: int | None) -> int:
    if q is None:
        return model.depth
    if not 0 <= q <= model.depth:
        raise ShapeError(f"layer index {q} outside [0, {model.depth}]")
    return int(q)


def _run(model: Model, xb: np.ndarray, q: int):
    zs = [xb]
    caches = []
    for i in range(1, q + 1):
        out, cache = _layer_forward(model.layers[i - 1], model.layer_params(i), zs[-1])
        zs.append(out)
        caches.append(cache)
    return zs, caches


def forward(model: Model, x, upto_layer: int | None = None) -> np.ndarray:
    """Return ``z[q]`` for ``q = upto_layer`` (default: the probability output)."""
    q = _check_layer(model, upto_layer)
    xb, batched = _as_batch(model, x)
    out = _run(model, xb, q)[0][-1]
    if not np.all(np.isfinite(out)):
        raise DivergenceError(f"non-finite values in forward output at layer {q}")
    return out if batched else out[0]


def forward_many(model: Model, x, layers: Sequence[int]) -> dict[int, np.ndarray]:
    """Several hidden representations from one forward pass (batched input)."""
    xb, _ = _as_batch(model, x)
    top = max(_check_layer(model, q) for q in layers)
    zs, _ = _run(model, xb, top)
    return {q: zs[q] for q in layers}


def _backprop(model: Model, caches, injections: Mapping[int, np.ndarray], need_params: bool):
    top = max(injections)
    g = None
    param_grads = {}
    for i in range(top, 0, -1):
        if i in injections:
            g = injections[i] if g is None else g + injections[i]
        if g is None:
            continue
        g, grads = _layer_backward(model.layers[i - 1], model.layer_params(i), caches[i - 1], g, need_params)
        for suffix, val in grads.items():
            param_grads[f"{i}.{suffix}"] = val
    if 0 in injections:
        g = injections[0] if g is None else g + injections[0]
    if need_params:
        for name, p in model.params.items():
            if name not in param_grads:
                param_grads[name] = np.zeros_like(p)
    return param_grads, g


def vjp(model: Model, x, layers: Sequence[int], need_params: bool = False):
    """Forward to the listed layers and return ``({q: z[q]}, pullback)``.

    ``pullback({q: g_q})`` returns ``(param_grads, input_grad)``. Batched input only.
    """
    xb, batched = _as_batch(model, x)
    if not batched:
        raise ShapeError("vjp expects a leading batch axis")
    top = max(_check_layer(model, q) for q in layers)
    zs, caches = _run(model, xb, top)

    def pullback(injections: Mapping[int, np.ndarray]):
        if not injections or max(injections) == 0:
            g = injections.get(0, np.zeros_like(xb))
            return ({n: np.zeros_like(p) for n, p in model.params.items()} if need_params else {}), g
        param_grads, gx = _backprop(model, caches, injections, need_params)
        _check_finite(param_grads, gx)
        return param_grads, gx

    return {q: zs[q] for q in layers}, pullback


def tree_sum(items: Sequence):
    """Pairwise sum; for 2**k identical terms the result is exactly 2**k times one term."""
    items = list(items)
    if not items:
        raise ValueError("nothing to sum")
    while len(items) > 1:
        nxt = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


def tree_mean(items: Sequence):
    items = list(items)
    if len(items) == 1:
        return items[0]
    return tree_sum(items) * (1.0 / len(items)) if _pow2(len(items)) else tree_sum(items) / len(items)


def _pow2(n: int) -> bool:
    return n & (n - 1) == 0


def backward_injected(
    model: Model, x, loss_fn: Callable[[dict[int, np.ndarray]], tuple], layers: Sequence[int], need_params: bool = True
) -> GradientBundle:
    """Reverse pass for losses that read several hidden representations.

    ``loss_fn`` receives ``{q: z[q]}`` (batched) and returns ``(value, {q: dvalue/dz[q]})``.
    """
    xb, batched = _as_batch(model, x)
    top = max(_check_layer(model, q) for q in layers)
    zs, caches = _run(model, xb, top)
    value, gz = loss_fn({q: zs[q] for q in layers})
    value = _scalar(value)
    param_grads, gx = _backprop(model, caches, gz, need_params)
    _check_finite(param_grads, gx)
    return GradientBundle(param_grads, gx if batched else gx[0], value)


def backward(model: Model, x, loss_fn: LossFn, upto_layer: int | None = None, need_params: bool = True) -> GradientBundle:
    """Exact reverse-mode derivatives of ``loss_fn(z[q])``.

    ``loss_fn`` maps the representation at ``upto_layer`` to ``(value, gradient)``.
    """
    q = _check_layer(model, upto_layer)
    xb, batched = _as_batch(model, x)
    zs, caches = _run(model, xb, q)
    z = zs[q] if batched else zs[q][0]
    value, gz = loss_fn(z)
    value = _scalar(value)
    gz = np.asarray(gz, dtype=np.float64)
    if not batched:
        gz = gz[None]
    if q == 0:
        param_grads = {n: np.zeros_like(p) for n, p in model.params.items()} if need_params else {}
        gx = gz
    else:
        param_grads, gx = _backprop(model, caches, {q: gz}, need_params)
    _check_finite(param_grads, gx)
    return GradientBundle(param_grads, gx if batched else gx[0], value)


def _scalar(value) -> float:
    arr = np.asarray(value)
    if arr.ndim != 0:
        raise ShapeError(f"loss must be a scalar, got shape {arr.shape}")
    out = float(arr)
    if not math.isfinite(out):
        raise DivergenceError(f"non-finite loss value {out}")
    return out


def _check_finite(param_grads, gx) -> None:
    if not np.all(np.isfinite(gx)):
        raise DivergenceError("non-finite input gradient")
    for name, g in param_grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name}")


# -- softmax and losses ------------------------------------------------------


def softmax_t(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax over the last axis, stabilised by max-subtraction."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_t_vjp(probs: np.ndarray, g: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    return probs * (g - np.sum(g * probs, axis=-1, keepdims=True)) / temperature


def log_softmax_t(logits, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def smoothed_targets(labels, num_classes: int, label_smoothing: float = 0.0) -> np.ndarray:
    if not 0.0 <= label_smoothing < 1.0:
        raise ConfigError(f"label_smoothing must be in [0, 1), got {label_smoothing}")
    labels = np.atleast_1d(np.asarray(labels))
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ConfigError(f"labels must lie in [0, {num_classes})")
    t = np.zeros((labels.size, num_classes))
    t[np.arange(labels.size), labels.astype(np.int64)] = 1.0
    if label_smoothing:
        t = (1.0 - label_smoothing) * t + label_smoothing / num_classes
    return t


def cross_entropy(probs, labels, label_smoothing: float = 0.0) -> float:
    """Mean negative log-likelihood of (smoothed) one-hot targets under ``probs``."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, atol=1e-6):
        raise ConfigError("probs rows must be probability distributions")
    t = smoothed_targets(labels, p.shape[-1], label_smoothing)
    if t.shape[0] != p.shape[0]:
        raise ShapeError(f"{t.shape[0]} labels for {p.shape[0]} rows")
    return float(-np.sum(t * np.log(np.maximum(p, LOG_FLOOR))) / p.shape[0])


def ce_loss(labels, label_smoothing: float = 0.0, reduction: str = "mean") -> LossFn:
    """Loss closure on probabilities (model output ``z[l]``)."""

    def fn(probs):
        p = np.atleast_2d(probs)
        t = smoothed_targets(labels, p.shape[-1], label_smoothing)
        scale = 1.0 / p.shape[0] if reduction == "mean" else 1.0
        clamped = np.maximum(p, LOG_FLOOR)
        value = -np.sum(t * np.log(clamped)) * scale
        grad = np.where(p >= LOG_FLOOR, -t / clamped, 0.0) * scale
        return value, grad.reshape(np.shape(probs))

    return fn


def softmax_cross_entropy(logits, labels, label_smoothing: float = 0.0, reduction: str = "mean"):
    """Cross-entropy of ``softmax(logits)`` and its gradient with respect to the logits.

    Fused so that very confident rows keep an accurate gradient.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    t = smoothed_targets(labels, z.shape[-1], label_smoothing)
    scale = 1.0 / z.shape[0] if reduction == "mean" else 1.0
    logp = log_softmax_t(z)
    value = -np.sum(t * logp) * scale
    grad = (np.exp(logp) - t) * scale
    return value, grad.reshape(np.shape(logits))


def logits_ce_loss(labels, label_smoothing: float = 0.0, reduction: str = "mean") -> LossFn:
    """Loss closure on logits (``z[l-1]``)."""
    return lambda z: softmax_cross_entropy(z, labels, label_smoothing, reduction)


def input_gradient(model: Model, x, labels, reduction: str = "sum") -> np.ndarray:
    """``d CE / dx``; with ``reduction='sum'`` each row is that sample's own gradient."""
    return backward(model, x, logits_ce_loss(labels, reduction=reduction), model.depth - 1, need_params=False).input_grad


# -- second order --------------------------------------------------------------


def hvp_input(model: Model, x, y, v, loss_fn: LossFn | None = None, upto_layer: int | None = None) -> np.ndarray:
    """Input-Hessian-vector product by central differences of exact gradients.

    The default loss is the summed per-sample cross-entropy, so for a batch the
    Hessian is block diagonal and each row of the result is that sample's own
    product. The difference is taken along ``v / ||v||`` with step
    ``h = 1e-4 * (1 + ||x||_inf)`` and rescaled by ``||v||``.
    """
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != x.shape:
        raise ShapeError(f"direction shape {v.shape} does not match input {x.shape}")
    vnorm = float(np.linalg.norm(v))
    if vnorm == 0.0:
        return np.zeros_like(x)
    if loss_fn is None:
        loss_fn, upto_layer = logits_ce_loss(y, reduction="sum"), model.depth - 1
    h = 1e-4 * (1.0 + float(np.max(np.abs(x))))
    u = v / vnorm
    gp = backward(model, x + h * u, loss_fn, upto_layer, need_params=False).input_grad
    gm = backward(model, x - h * u, loss_fn, upto_layer, need_params=False).input_grad
    return (gp - gm) / (2.0 * h) * vnorm


# -- optimisation -------------------------------------------------------------


@dataclass(frozen=True)
class LRSchedule:
    """Linear warmup then cosine decay; constant after warmup if ``total_steps`` is None."""

    base_lr: float
    warmup_steps: int = 0
    total_steps: int | None = None

    def lr_at(self, step: int) -> float:
        if step <= 0:
            return 0.0
        if self.warmup_steps and step < self.warmup_steps:
            return self.base_lr * step / self.warmup_steps
        if self.total_steps is None:
            return self.base_lr
        span = self.total_steps - self.warmup_steps
        if span <= 0:
            return self.base_lr
        progress = min(1.0, (step - self.warmup_steps) / span)
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    momentum_buffers: dict[str, np.ndarray]
    schedule: LRSchedule
    step_index: int = 0
    momentum_coeff: float = 0.9
    clip_global_norm: float | None = None

    @classmethod
    def create(cls, params: Mapping[str, np.ndarray], schedule: LRSchedule, momentum: float = 0.9,
               clip_global_norm: float | None = None) -> "OptimizerState":
        bufs = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(bufs, schedule, 0, momentum, clip_global_norm)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimizerState):
    """One heavy-ball SGD step. Returns ``(new_params, new_state)``; inputs are not mutated."""
    if set(params) != set(grads):
        raise ShapeError("gradient names do not match parameter names")
    for k in params:
        if np.shape(params[k]) != np.shape(grads[k]):
            raise ShapeError(f"gradient for {k} has shape {np.shape(grads[k])}, expected {np.shape(params[k])}")
    if state.clip_global_norm is not None:
        grads = clip_by_global_norm(grads, state.clip_global_norm)
    step = state.step_index + 1
    lr = state.schedule.lr_at(step)
    mu = state.momentum_coeff
    new_bufs, new_params = {}, {}
    for k, p in params.items():
        buf = mu * state.momentum_buffers[k] + grads[k]
        new_bufs[k] = buf
        new_params[k] = p - lr * buf
    return new_params, dataclasses.replace(state, momentum_buffers=new_bufs, step_index=step)
