"""L-infinity bounded, untargeted attacks: PGD and the composable FGSM family.

All attacks maximise the cross-entropy of the softmax of the (averaged) logits.
Randomness comes from independent per-component streams derived from the
config seed, so switching one component off never shifts another's draws.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import tensor as T
from .errors import ConfigError, DivergenceError, ShapeError
from .tensor import Model

METHODS = ("pgd", "mi", "ni", "sini", "vmi", "vni", "ti", "di")


def parse_fraction(text) -> float:
    """Parse ``"4/255"``, ``"0.5"`` or a number into a float."""
    if isinstance(text, (int, float)):
        return float(text)
    try:
        return float(Fraction(str(text).strip()))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"invalid number or fraction {text!r}") from None


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 4 / 255
    alpha: float = 1 / 255
    iterations: int = 20
    momentum: float = 0.0
    nesterov: bool = False
    scale_copies: int = 1
    variance_samples: int = 0
    variance_beta: float = 1.5
    ti_kernel_size: int = 1
    ti_sigma: float = 1.0
    di_probability: float = 0.0
    di_resize_low: int | None = None
    di_resize_high: int | None = None
    random_start: bool = False
    seed: int = 0
    method: str = "custom"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.scale_copies < 1:
            raise ConfigError("scale_copies must be >= 1")
        if self.variance_samples < 0 or self.variance_beta < 0:
            raise ConfigError("variance_samples and variance_beta must be nonnegative")
        if self.ti_kernel_size < 1 or self.ti_kernel_size % 2 == 0:
            raise ConfigError("ti_kernel_size must be odd and >= 1")
        if not self.ti_sigma > 0:
            raise ConfigError("ti_sigma must be positive")
        if not 0.0 <= self.di_probability <= 1.0:
            raise ConfigError("di_probability must lie in [0, 1]")
        if self.momentum < 0:
            raise ConfigError("momentum must be nonnegative")

    @classmethod
    def for_method(cls, method: str, epsilon=4 / 255, alpha=1 / 255, iterations: int = 20, seed: int = 0, **overrides):
        """Standard presets: MI uses decay 1; SI uses 5 scale copies; V* use N=5, beta=1.5."""
        presets = {
            "pgd": {},
            "mi": {"momentum": 1.0},
            "ni": {"momentum": 1.0, "nesterov": True},
            "sini": {"momentum": 1.0, "nesterov": True, "scale_copies": 5},
            "vmi": {"momentum": 1.0, "variance_samples": 5, "variance_beta": 1.5},
            "vni": {"momentum": 1.0, "nesterov": True, "variance_samples": 5, "variance_beta": 1.5},
            "ti": {"ti_kernel_size": 5, "ti_sigma": 1.0},
            "di": {"di_probability": 0.5},
        }
        if method not in presets:
            raise ConfigError(f"unknown attack method {method!r}; choose from {METHODS}")
        kw = dict(presets[method], **overrides)
        return cls(epsilon=parse_fraction(epsilon), alpha=parse_fraction(alpha), iterations=iterations, seed=seed,
                   method=method, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class PerturbationRecord:
    delta: np.ndarray
    source_model_id: str
    fingerprint: str
    whitebox_success: np.ndarray
    config: dict = field(default_factory=dict)
    sample_ids: np.ndarray | None = None

    def adversarial(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) + self.delta


def _as_list(models) -> list[Model]:
    if isinstance(models, Model):
        return [models]
    models = list(models)
    if not models:
        raise ConfigError("at least one model is required")
    return models


def ensemble_logits(models, x) -> np.ndarray:
    """Arithmetic mean of the models' logits."""
    models = _as_list(models)
    shapes = {(m.input_shape, m.num_classes) for m in models}
    if len(shapes) != 1:
        raise ShapeError("ensemble members must share input and output shapes")
    return T.tree_mean([T.forward(m, x, m.depth - 1) for m in models])


def _loss_grad(models: list[Model], x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample input gradient of CE(softmax(mean logits), y)."""
    outs = [T.vjp(m, x, [m.depth - 1]) for m in models]
    logits = T.tree_mean([z[m.depth - 1] for (z, _), m in zip(outs, models)])
    _, gz = T.softmax_cross_entropy(logits, y, reduction="sum")
    share = gz * (1.0 / len(models))
    grads = [pull({m.depth - 1: share})[1] for (_, pull), m in zip(outs, models)]
    g = T.tree_sum(grads)
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite attack gradient")
    return g


def _project(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def _prepare(models, x, y):
    models = _as_list(models)
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == models[0].input_shape
    if single:
        x = x[None]
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if len(y) != len(x):
        raise ShapeError(f"{len(y)} labels for {len(x)} inputs")
    return models, x, y, single


def _start(x, cfg: AttackConfig):
    if not cfg.random_start:
        return x.copy()
    rng = np.random.default_rng([cfg.seed, 3])
    return _project(x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), x, cfg.epsilon)


def _record(models, x, x_adv, y, cfg, single) -> PerturbationRecord:
    delta = x_adv - x
    pred = np.argmax(ensemble_logits(models, x_adv), axis=1)
    rec = PerturbationRecord(
        delta=delta[0] if single else delta,
        source_model_id="+".join(f"{m.arch_id}@{m.init_seed}" for m in models),
        fingerprint=cfg.fingerprint(),
        whitebox_success=pred != y,
        config=cfg.to_dict(),
    )
    return rec


def pgd(models, x, y, cfg: AttackConfig) -> PerturbationRecord:
    """Iterated signed-gradient ascent projected onto the epsilon ball and [0, 1]."""
    models, x, y, single = _prepare(models, x, y)
    x_adv = _start(x, cfg)
    for _ in range(cfg.iterations):
        g = _loss_grad(models, x_adv, y)
        x_adv = _project(x_adv + cfg.alpha * np.sign(g), x, cfg.epsilon)
    return _record(models, x, x_adv, y, cfg, single)


# -- transforms ---------------------------------------------------------------


def ti_kernel(size: int, sigma: float) -> np.ndarray:
    """Sampled 2-D Gaussian on an odd ``size`` grid, normalised to sum 1."""
    if size < 1 or size % 2 == 0:
        raise ConfigError(f"kernel size must be odd and >= 1, got {size}")
    if not sigma > 0:
        raise ConfigError("sigma must be positive")
    ax = np.arange(size) - (size - 1) / 2
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
    return k / k.sum()


def _smooth(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 'same' correlation with zero padding."""
    if g.ndim != 4:
        raise ShapeError("translation smoothing needs (batch, channels, height, width) inputs")
    s = kernel.shape[0]
    r = s // 2
    h, w = g.shape[2], g.shape[3]
    gp = np.pad(g, ((0, 0), (0, 0), (r, r), (r, r)))
    out = np.zeros_like(g)
    for i in range(s):
        for j in range(s):
            out += kernel[i, j] * gp[:, :, i : i + h, j : j + w]
    return out


@dataclass(frozen=True)
class _DIDraw:
    height: int
    width: int
    top: int
    left: int


def _di_range(cfg_low, cfg_high, h: int) -> tuple[int, int]:
    low = cfg_low if cfg_low is not None else int(math.ceil(0.8 * h))
    high = cfg_high if cfg_high is not None else h
    if not 0 < low <= high <= h:
        raise ConfigError(f"resize range [{low}, {high}] must lie within (0, {h}]")
    return low, high


def _draw_di(rng: np.random.Generator, p: float, low: int, high: int, h: int, w: int) -> _DIDraw | None:
    if rng.random() >= p:
        return None
    rh = int(rng.integers(low, high + 1))
    rw = max(1, min(w, int(round(rh * w / h))))
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    return _DIDraw(rh, rw, top, left)


def _di_index(d: _DIDraw, h: int, w: int):
    rows = (np.arange(d.height) * h) // d.height
    cols = (np.arange(d.width) * w) // d.width
    return rows, cols


def _di_apply(x: np.ndarray, d: _DIDraw | None) -> np.ndarray:
    if d is None:
        return x
    h, w = x.shape[-2:]
    rows, cols = _di_index(d, h, w)
    out = np.zeros_like(x)
    out[..., d.top : d.top + d.height, d.left : d.left + d.width] = x[..., rows[:, None], cols[None, :]]
    return out


def _di_adjoint(g: np.ndarray, d: _DIDraw | None) -> np.ndarray:
    if d is None:
        return g
    h, w = g.shape[-2:]
    rows, cols = _di_index(d, h, w)
    out = np.zeros_like(g)
    # nearest-neighbour downsampling picks distinct source pixels, so plain assignment is the adjoint
    out[..., rows[:, None], cols[None, :]] = g[..., d.top : d.top + d.height, d.left : d.left + d.width]
    return out


def di_transform(x, p: float, resize_low: int | None = None, resize_high: int | None = None, seed: int = 0) -> np.ndarray:
    """With probability ``p``: nearest-neighbour shrink then zero-pad back at a random offset."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError("p must lie in [0, 1]")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeError("diverse-input transform needs spatial axes")
    h, w = x.shape[-2:]
    low, high = _di_range(resize_low, resize_high, h)
    return _di_apply(x, _draw_di(np.random.default_rng(seed), p, low, high, h, w))


def gaussian_perturb(x, variance: float, seed: int = 0, clip: bool = True) -> np.ndarray:
    if variance < 0:
        raise ConfigError("variance must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    if variance == 0:
        return x.copy()
    out = x + math.sqrt(variance) * np.random.default_rng(seed).standard_normal(x.shape)
    return np.clip(out, 0.0, 1.0) if clip else out


# -- FGSM family -----------------------------------------------------------------


def _l1_normalise(g: np.ndarray) -> np.ndarray:
    norm = np.abs(g).reshape(len(g), -1).sum(axis=1)
    norm = np.maximum(norm, np.finfo(np.float64).tiny)
    return g / norm.reshape((-1,) + (1,) * (g.ndim - 1))


def fgsm_family(models, x, y, cfg: AttackConfig) -> PerturbationRecord:
    """Iterative FGSM with optional MI / NI / SI / VT / TI / DI components.

    Per iteration: draw the DI transform, take the (Nesterov look-ahead) gradient
    averaged over ``x / 2**i`` scale copies, add the variance-tuning term, smooth
    with the TI kernel, accumulate L1-normalised momentum, and take a signed step.
    """
    models, x, y, single = _prepare(models, x, y)
    use_di = cfg.di_probability > 0
    use_ti = cfg.ti_kernel_size > 1
    if (use_di or use_ti) and x.ndim != 4:
        raise ShapeError("TI and DI need image-shaped inputs (channels, height, width)")
    if use_di:
        h, w = x.shape[-2:]
        di_low, di_high = _di_range(cfg.di_resize_low, cfg.di_resize_high, h)
    kernel = ti_kernel(cfg.ti_kernel_size, cfg.ti_sigma)
    rng_di = np.random.default_rng([cfg.seed, 1])
    rng_var = np.random.default_rng([cfg.seed, 2])

    def grad_at(point, draw):
        total = None
        for i in range(cfg.scale_copies):
            scale = 1.0 / 2**i
            g = _di_adjoint(_loss_grad(models, _di_apply(point * scale, draw), y), draw) * scale
            total = g if total is None else total + g
        return total / cfg.scale_copies

    x_adv = _start(x, cfg)
    mom = np.zeros_like(x)
    variance = np.zeros_like(x)
    radius = cfg.variance_beta * cfg.epsilon
    for _ in range(cfg.iterations):
        draw = _draw_di(rng_di, cfg.di_probability, di_low, di_high, h, w) if use_di else None
        point = x_adv + cfg.alpha * cfg.momentum * mom if cfg.nesterov else x_adv
        g = grad_at(point, draw)
        if cfg.variance_samples > 0:
            current = g + variance
            neigh = [grad_at(x_adv + rng_var.uniform(-radius, radius, size=x.shape), draw)
                     for _ in range(cfg.variance_samples)]
            variance = T.tree_sum(neigh) / cfg.variance_samples - g
            g = current
        if use_ti:
            g = _smooth(g, kernel)
        mom = cfg.momentum * mom + _l1_normalise(g)
        x_adv = _project(x_adv + cfg.alpha * np.sign(mom), x, cfg.epsilon)
    return _record(models, x, x_adv, y, cfg, single)


def attack(models, x, y, cfg: AttackConfig) -> PerturbationRecord:
    """Dispatch on ``cfg.method``: plain PGD for ``pgd``, the FGSM family otherwise."""
    if cfg.method == "pgd":
        return pgd(models, x, y, cfg)
    return fgsm_family(models, x, y, cfg)


def attack_batched(models, x, y, cfg: AttackConfig, batch_size: int = 256) -> PerturbationRecord:
    """Run :func:`attack` over chunks; chunk ``k`` uses seed ``cfg.seed + k``."""
    models = _as_list(models)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    parts = []
    for k, start in enumerate(range(0, len(x), batch_size)):
        sub = replace(cfg, seed=cfg.seed + k)
        parts.append(attack(models, x[start : start + batch_size], y[start : start + batch_size], sub))
    if not parts:
        raise ConfigError("nothing to attack")
    return PerturbationRecord(
        delta=np.concatenate([p.delta for p in parts]),
        source_model_id=parts[0].source_model_id,
        fingerprint=cfg.fingerprint(),
        whitebox_success=np.concatenate([p.whitebox_success for p in parts]),
        config=cfg.to_dict(),
    )
