"""Model alignment: fine-tune a source model towards one or more frozen witnesses.

The per-sample loss compares source and witness representations at a chosen
layer. Output-space distances (``kl``, ``tv``) act on temperature-scaled
probabilities, ``hint`` is a mean squared error between (projected) embeddings,
and ``combined`` adds ``lam`` times the embedding term to the KL term. One SGD
step averages the loss gradient over the mini-batch and over the witness set.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset, batches
from .errors import ConfigError, DivergenceError, ShapeError
from .models import steps_per_epoch
from .tensor import LOG_FLOOR, LRSchedule, Model, OptimizerState

DISTANCES = ("kl", "tv", "hint", "combined")


def _check_distribution(p: np.ndarray, name: str) -> np.ndarray:
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, atol=1e-6):
        raise ConfigError(f"{name} is not a probability distribution")
    return p


def distance_kl(p_s, p_w) -> float:
    """KL(p_w || p_s), witness as target; rows averaged."""
    ps = _check_distribution(p_s, "p_s")
    pw = _check_distribution(p_w, "p_w")
    terms = pw * (np.log(np.maximum(pw, LOG_FLOOR)) - np.log(np.maximum(ps, LOG_FLOOR)))
    return float(np.mean(np.maximum(terms.sum(axis=-1), 0.0)))


def distance_tv(p_s, p_w) -> float:
    ps = _check_distribution(p_s, "p_s")
    pw = _check_distribution(p_w, "p_w")
    return float(np.mean(0.5 * np.abs(ps - pw).sum(axis=-1)))


@dataclass
class EmbeddingProjection:
    """Linear map from source embedding dim to witness embedding dim."""

    weight: np.ndarray
    trainable: bool = True

    @classmethod
    def create(cls, source_dim: int, witness_dim: int, seed: int = 0, trainable: bool = True) -> "EmbeddingProjection":
        if source_dim == witness_dim:
            return cls(np.eye(witness_dim), trainable)
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((max(source_dim, witness_dim), min(source_dim, witness_dim)))
        q, _ = np.linalg.qr(a)
        w = q.T if witness_dim < source_dim else q
        return cls(np.ascontiguousarray(w), trainable)

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return z @ self.weight.T


def distance_hint(z_s, z_w, proj: EmbeddingProjection | None = None) -> float:
    zs = np.atleast_2d(np.asarray(z_s, dtype=np.float64))
    zw = np.atleast_2d(np.asarray(z_w, dtype=np.float64))
    zs, zw = zs.reshape(len(zs), -1), zw.reshape(len(zw), -1)
    mapped = proj(zs) if proj is not None else zs
    if mapped.shape != zw.shape:
        raise ShapeError(f"projected source embedding {mapped.shape} does not match witness {zw.shape}")
    return float(np.mean((mapped - zw) ** 2))


@dataclass(frozen=True, eq=False)
class AlignmentConfig:
    witnesses: tuple[Model, ...]
    distance: str = "kl"
    align_layer: int | None = None
    temperature: float | None = 1.0
    lam: float = 1.0
    epochs: int = 1
    batch_size: int = 64
    base_lr: float = 0.01
    warmup_fraction: float = 0.1
    momentum: float = 0.9
    clip_global_norm: float | None = None
    early_stop: int | None = None
    seed: int = 0
    kl_direction: str = "witness"
    projection_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "witnesses", tuple(self.witnesses))
        if not self.witnesses:
            raise ConfigError("the witness set must not be empty")
        if self.distance not in DISTANCES:
            raise ConfigError(f"unknown distance {self.distance!r}; choose from {DISTANCES}")
        if self.temperature is not None and not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if self.lam < 0:
            raise ConfigError("lam must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.early_stop is not None and self.early_stop < 1:
            raise ConfigError("early_stop must be a positive step count")
        if self.kl_direction not in ("witness", "source"):
            raise ConfigError("kl_direction must be 'witness' or 'source'")

    @property
    def tau(self) -> float:
        return 1.0 if self.temperature is None else float(self.temperature)

    def describe(self) -> dict:
        """JSON-friendly description (witnesses by arch id and seed)."""
        return {
            "witnesses": [f"{w.arch_id}@{w.init_seed}" for w in self.witnesses],
            "distance": self.distance,
            "align_layer": self.align_layer,
            "temperature": self.temperature,
            "lam": self.lam,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "base_lr": self.base_lr,
            "warmup_fraction": self.warmup_fraction,
            "momentum": self.momentum,
            "clip_global_norm": self.clip_global_norm,
            "early_stop": self.early_stop,
            "seed": self.seed,
            "kl_direction": self.kl_direction,
        }


def _layers_for(source: Model, witness: Model, cfg: AlignmentConfig):
    """(source output layer, witness output layer, source emb layer, witness emb layer)."""
    ls, lw = source.depth, witness.depth
    if cfg.distance in ("kl", "tv"):
        q = ls if cfg.align_layer is None else cfg.align_layer
        if q != ls:
            raise ShapeError(f"{cfg.distance} compares output distributions; align_layer must be {ls}")
        return ls - 1, lw - 1, None, None
    if cfg.align_layer is not None:
        if not 0 < cfg.align_layer < ls:
            raise ShapeError(f"embedding alignment needs 0 < align_layer < {ls}")
        qs = cfg.align_layer
        qw = cfg.align_layer if witness.layers == source.layers else witness.embedding_layer
    else:
        qs, qw = source.embedding_layer, witness.embedding_layer
    if cfg.distance == "hint":
        return None, None, qs, qw
    return ls - 1, lw - 1, qs, qw


def make_projection(source: Model, witness: Model, cfg: AlignmentConfig) -> EmbeddingProjection | None:
    if cfg.distance not in ("hint", "combined"):
        return None
    _, _, qs, qw = _layers_for(source, witness, cfg)
    ds = int(np.prod(source.shapes[qs]))
    dw = int(np.prod(witness.shapes[qw]))
    return EmbeddingProjection.create(ds, dw, cfg.projection_seed)


def _output_term(zs, zw, cfg: AlignmentConfig):
    """Value and d/d(source logits) of the output-space distance, batch-averaged."""
    tau = cfg.tau
    b = zs.shape[0]
    if cfg.distance == "tv":
        ps, pw = T.softmax_t(zs, tau), T.softmax_t(zw, tau)
        diff = ps - pw
        value = 0.5 * np.abs(diff).sum() / b
        return value, T.softmax_t_vjp(ps, 0.5 * np.sign(diff) / b, tau)
    logps, logpw = T.log_softmax_t(zs, tau), T.log_softmax_t(zw, tau)
    ps, pw = np.exp(logps), np.exp(logpw)
    # log(max(p, floor)) taken in log space, so identical logits give exactly zero
    floor = math.log(LOG_FLOOR)
    if cfg.kl_direction == "witness":
        value = np.sum(pw * (np.maximum(logpw, floor) - np.maximum(logps, floor))) / b
        return value, (ps - pw) / (tau * b)
    a = logps - logpw
    value = np.sum(ps * (np.maximum(logps, floor) - np.maximum(logpw, floor))) / b
    return value, ps * (a - np.sum(ps * a, axis=-1, keepdims=True)) / (tau * b)


def _hint_term(es, ew, proj: EmbeddingProjection):
    shape = es.shape
    es2, ew2 = es.reshape(len(es), -1), ew.reshape(len(ew), -1)
    r = proj(es2) - ew2
    if r.shape != ew2.shape:
        raise ShapeError(f"projected source embedding {r.shape} does not match witness {ew2.shape}")
    scale = 2.0 / r.size
    value = np.sum(r * r) / r.size
    g_es = (scale * r) @ proj.weight
    g_proj = (scale * r).T @ es2
    return value, g_es.reshape(shape), g_proj


@dataclass
class AlignmentLoss:
    value: float
    param_grads: dict[str, np.ndarray]
    projection_grad: np.ndarray | None = None


def alignment_loss(x, source: Model, witness: Model, cfg: AlignmentConfig,
                   projection: EmbeddingProjection | None = None) -> AlignmentLoss:
    """Batch-mean alignment loss against one witness and its gradient w.r.t. the source.

    The witness is only evaluated; no gradient is formed for its parameters.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape == source.input_shape:
        x = x[None]
    if witness.input_shape != source.input_shape:
        raise ShapeError(f"witness input {witness.input_shape} differs from source input {source.input_shape}")
    qs_out, qw_out, qs_emb, qw_emb = _layers_for(source, witness, cfg)
    if projection is None and qs_emb is not None:
        projection = make_projection(source, witness, cfg)
    src_layers = [q for q in (qs_out, qs_emb) if q is not None]
    wit_layers = [q for q in (qw_out, qw_emb) if q is not None]
    wz = T.forward_many(witness, x, wit_layers)
    sz, pullback = T.vjp(source, x, src_layers, need_params=True)
    value = 0.0
    injections = {}
    proj_grad = None
    if qs_out is not None:
        v, g = _output_term(sz[qs_out], wz[qw_out], cfg)
        value += v
        injections[qs_out] = g
    if qs_emb is not None:
        weight = 1.0 if cfg.distance == "hint" else cfg.lam
        v, g_es, g_proj = _hint_term(sz[qs_emb], wz[qw_emb], projection)
        value += weight * v
        injections[qs_emb] = weight * g_es if qs_emb not in injections else injections[qs_emb] + weight * g_es
        proj_grad = weight * g_proj
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite alignment loss {value}")
    param_grads, _ = pullback(injections)
    return AlignmentLoss(float(value), param_grads, proj_grad)


@dataclass
class AlignResult:
    model: Model
    history: list[dict] = field(default_factory=list)
    projections: list[EmbeddingProjection | None] = field(default_factory=list)


def align(source: Model, cfg: AlignmentConfig, data: Dataset) -> AlignResult:
    """Fine-tune ``source`` on ``data`` to minimise the mean alignment loss over ``cfg.witnesses``.

    Returns a new model; ``source`` and the witnesses are left untouched.
    """
    if len(data) == 0:
        raise ConfigError("alignment data is empty")
    for w in cfg.witnesses:
        if w.input_shape != source.input_shape:
            raise ShapeError(f"witness {w.arch_id} input {w.input_shape} differs from source {source.input_shape}")
    projections = [make_projection(source, w, cfg) for w in cfg.witnesses]
    total = cfg.epochs * steps_per_epoch(len(data), cfg.batch_size)
    if cfg.early_stop is not None:
        total = min(total, cfg.early_stop)
    schedule = LRSchedule(cfg.base_lr, int(round(cfg.warmup_fraction * total)), total)

    params = dict(source.params)
    for k, p in enumerate(projections):
        if p is not None and p.trainable:
            params[f"proj{k}.weight"] = p.weight
    state = OptimizerState.create(params, schedule, cfg.momentum, cfg.clip_global_norm)
    rng = np.random.default_rng(cfg.seed)
    history = []
    step = 0
    for _ in range(cfg.epochs):
        for idx in batches(len(data), cfg.batch_size, rng):
            if step >= total:
                break
            current = source.with_params({k: v for k, v in params.items() if not k.startswith("proj")})
            x = data.inputs[idx]
            losses = []
            for k, w in enumerate(cfg.witnesses):
                proj = projections[k]
                if proj is not None and f"proj{k}.weight" in params:
                    proj = EmbeddingProjection(params[f"proj{k}.weight"], proj.trainable)
                losses.append(alignment_loss(x, current, w, cfg, proj))
            value = T.tree_mean([l.value for l in losses])
            if not math.isfinite(value):
                raise DivergenceError(f"alignment diverged at step {step + 1}")
            grads = {name: T.tree_mean([l.param_grads[name] for l in losses]) for name in source.params}
            n_w = len(cfg.witnesses)
            for k, l in enumerate(losses):
                if f"proj{k}.weight" in params:
                    # each projection only sees its own witness term
                    grads[f"proj{k}.weight"] = l.projection_grad / n_w if n_w > 1 else l.projection_grad
            params, state = T.sgd_step(params, grads, state)
            step = state.step_index
            history.append({"step": step, "lr": schedule.lr_at(step), "loss": value})
    aligned = source.with_params({k: v for k, v in params.items() if not k.startswith("proj")})
    final_proj = []
    for k, p in enumerate(projections):
        if p is not None and f"proj{k}.weight" in params:
            p = EmbeddingProjection(np.array(params[f"proj{k}.weight"]), p.trainable)
        final_proj.append(p)
    return AlignResult(aligned, history, final_proj)


def write_loss_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "loss"])
        for row in history:
            w.writerow([row["step"], repr(float(row["lr"])), repr(float(row["loss"]))])
