"""Model zoo of graded capacity and the standard supervised training loop."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset, batches
from .errors import ConfigError, DivergenceError
from .tensor import LRSchedule, Model, OptimizerState

FAMILIES = ("mlp", "cnn")
SIZE_TAGS = ("S", "M", "L")

# hidden widths for mlp; (conv channels, hidden dense widths) for cnn
_MLP_WIDTHS = {"S": (32,), "M": (64, 32), "L": (128, 64)}
_CNN_WIDTHS = {"S": ((6, 12), ()), "M": ((8, 16), (32,)), "L": ((16, 32), (64,))}


@dataclass(frozen=True)
class ArchFamily:
    family: str
    size_tag: str
    num_classes: int = 10
    input_shape: tuple[int, ...] = (1, 12, 12)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.size_tag not in SIZE_TAGS:
            raise ConfigError(f"unknown size tag {self.size_tag!r}; choose from {SIZE_TAGS}")
        object.__setattr__(self, "input_shape", tuple(self.input_shape))

    @classmethod
    def parse(cls, arch: str, num_classes: int = 10, input_shape=(1, 12, 12)) -> "ArchFamily":
        family, _, tag = arch.partition("-")
        return cls(family, tag, num_classes, tuple(input_shape))

    @property
    def arch_id(self) -> str:
        return f"{self.family}-{self.size_tag}"

    def layers(self) -> list[T.LayerSpec]:
        k = self.num_classes
        if self.family == "mlp":
            d = int(np.prod(self.input_shape))
            layers = [T.flatten()]
            for w in _MLP_WIDTHS[self.size_tag]:
                layers += [T.dense(d, w), T.relu()]
                d = w
            return layers + [T.dense(d, k), T.softmax()]
        if len(self.input_shape) != 3:
            raise ConfigError(f"cnn needs (C, H, W) inputs, got {self.input_shape}")
        c, h, w = self.input_shape
        chans, hidden = _CNN_WIDTHS[self.size_tag]
        layers = []
        for co in chans:
            layers += [T.conv2d(c, co, 3, padding=1), T.relu(), T.maxpool2d(2)]
            c, h, w = co, h // 2, w // 2
        if h < 1 or w < 1:
            raise ConfigError(f"input {self.input_shape} too small for {self.arch_id}")
        d = c * h * w
        layers.append(T.flatten())
        for width in hidden:
            layers += [T.dense(d, width), T.relu()]
            d = width
        return layers + [T.dense(d, k), T.softmax()]


def init_params(layers: list[T.LayerSpec], seed: int) -> dict[str, np.ndarray]:
    """He-normal weights for layers feeding a ReLU, uniform fan-in scaling otherwise.

    Biases are uniform in +-1/sqrt(fan_in).
    """
    rng = np.random.default_rng(seed)
    params = {}
    for i, spec in enumerate(layers, start=1):
        if spec.kind not in T.PARAM_KINDS:
            continue
        shapes = spec.param_shapes()
        fan_in = int(np.prod(shapes["weight"][1:]))
        feeds_relu = i < len(layers) and layers[i].kind == "relu"
        bound = 1.0 / math.sqrt(fan_in)
        if feeds_relu:
            w = rng.standard_normal(shapes["weight"]) * math.sqrt(2.0 / fan_in)
        else:
            w = rng.uniform(-bound, bound, size=shapes["weight"])
        params[f"{i}.weight"] = w
        params[f"{i}.bias"] = rng.uniform(-bound, bound, size=shapes["bias"])
    return params


def build_model(family: ArchFamily | str, init_seed: int, num_classes: int = 10, input_shape=(1, 12, 12)) -> Model:
    if isinstance(family, str):
        family = ArchFamily.parse(family, num_classes, input_shape)
    layers = family.layers()
    return Model(tuple(layers), init_params(layers, init_seed), family.input_shape, family.arch_id, int(init_seed))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    base_lr: float = 0.05
    warmup_fraction: float = 0.1
    momentum: float = 0.9
    label_smoothing: float = 0.0
    seed: int = 0
    clip_global_norm: float | None = None
    loss: str = "ce"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.base_lr < 0 or not 0 <= self.warmup_fraction <= 1:
            raise ConfigError("base_lr must be >= 0 and warmup_fraction in [0, 1]")
        if self.loss not in ("ce", "mse"):
            raise ConfigError(f"unknown loss {self.loss!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def _mse_loss(labels, num_classes):
    def fn(z):
        t = T.smoothed_targets(labels, num_classes)
        r = z - t
        return np.sum(r * r) / z.shape[0], 2.0 * r / z.shape[0]

    return fn


def train(model: Model, data: Dataset, cfg: TrainConfig) -> tuple[Model, TrainHistory]:
    """SGD with momentum, linear warmup and cosine decay. Returns a new model."""
    if len(data) == 0:
        raise ConfigError("training data is empty")
    total = cfg.epochs * steps_per_epoch(len(data), cfg.batch_size)
    schedule = LRSchedule(cfg.base_lr, int(round(cfg.warmup_fraction * total)), total)
    state = OptimizerState.create(model.params, schedule, cfg.momentum, cfg.clip_global_norm)
    rng = np.random.default_rng(cfg.seed)
    params = dict(model.params)
    history = TrainHistory()
    logits_layer = model.depth - 1
    for epoch in range(cfg.epochs):
        loss_sum = correct = seen = 0
        for idx in batches(len(data), cfg.batch_size, rng):
            current = model.with_params(params)
            x, y = data.inputs[idx], data.labels[idx]
            if cfg.loss == "ce":
                loss_fn = T.logits_ce_loss(y, cfg.label_smoothing)
            else:
                loss_fn = _mse_loss(y, model.num_classes)
            captured = {}

            def wrapped(z, loss_fn=loss_fn):
                captured["z"] = z
                return loss_fn(z)

            try:
                bundle = T.backward(current, x, wrapped, logits_layer)
            except DivergenceError as exc:
                raise DivergenceError(f"training diverged at epoch {epoch}, step {state.step_index + 1}: {exc}") from None
            params, state = T.sgd_step(params, bundle.param_grads, state)
            loss_sum += bundle.loss_value * len(idx)
            correct += int(np.sum(np.argmax(captured["z"], axis=1) == y))
            seen += len(idx)
        history.epochs.append(
            {"epoch": epoch + 1, "loss": loss_sum / seen, "accuracy": correct / seen, "lr": schedule.lr_at(state.step_index)}
        )
    return model.with_params(params), history


def predict(model: Model, x, batch_size: int = 1024) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = [np.argmax(T.forward(model, x[i : i + batch_size], model.depth - 1), axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: Model, data: Dataset) -> float:
    return float(np.mean(predict(model, data.inputs) == data.labels))
