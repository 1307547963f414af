"""Measurement instruments: DCT spectra, loss surfaces, smoothness, similarity."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dctn, idctn

from . import tensor as T
from .attacks import AttackConfig, gaussian_perturb, pgd
from .errors import ConfigError, ShapeError
from .tensor import Model

# -- reports on disk ----------------------------------------------------------


def write_report(path, meta: dict, header: list[str], rows) -> None:
    """CSV preceded by one ``# {json}`` metadata line. Floats use ``repr`` so
    identical inputs give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(meta, sort_keys=True, separators=(",", ":")) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def read_report(path) -> tuple[dict, list[dict]]:
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise ConfigError(f"{path}: missing metadata line")
        meta = json.loads(first[2:])
        return meta, list(csv.DictReader(fh))


# -- frequency domain ---------------------------------------------------------


def dct2(image) -> np.ndarray:
    """Orthonormal type-II DCT over the last two axes."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim < 2 or a.size == 0:
        raise ShapeError("dct2 needs a nonempty array with at least two dimensions")
    return dctn(a, type=2, norm="ortho", axes=(-2, -1))


def idct2(coeffs) -> np.ndarray:
    return idctn(np.asarray(coeffs, dtype=np.float64), type=2, norm="ortho", axes=(-2, -1))


@dataclass
class SpectrumDiff:
    matrix: np.ndarray
    sample_count: int
    channel_handling: str = "per-channel-dct-mean-magnitude"

    @property
    def low_frequency_fraction(self) -> float:
        """Share of positive mass that sits in the lowest quarter of both frequency axes."""
        pos = np.clip(self.matrix, 0.0, None)
        total = float(pos.sum())
        if total == 0.0:
            return 0.0
        h, w = self.matrix.shape
        return float(pos[: max(1, h // 4), : max(1, w // 4)].sum()) / total

    def write_csv(self, path, meta: dict | None = None) -> None:
        h, w = self.matrix.shape
        rows = ([u, v, self.matrix[u, v]] for u in range(h) for v in range(w))
        info = dict(meta or {}, samples=self.sample_count, channels=self.channel_handling,
                    low_frequency_fraction=self.low_frequency_fraction)
        write_report(path, info, ["row_freq", "col_freq", "diff"], rows)


def _mean_magnitude(deltas: np.ndarray) -> np.ndarray:
    d = np.asarray(deltas, dtype=np.float64)
    if d.ndim == 2:
        d = d[None, None]
    elif d.ndim == 3:
        d = d[:, None]
    if d.ndim != 4:
        raise ShapeError(f"perturbations must be (N, C, H, W), got {d.shape}")
    return np.abs(dct2(d)).mean(axis=(0, 1))


def spectrum_diff(deltas_aligned, deltas_source, ids_aligned=None, ids_source=None) -> SpectrumDiff:
    """Mean |DCT| of aligned-source perturbations minus that of original-source ones."""
    a = np.asarray(deltas_aligned, dtype=np.float64)
    s = np.asarray(deltas_source, dtype=np.float64)
    if ids_aligned is not None or ids_source is not None:
        if ids_aligned is None or ids_source is None or list(ids_aligned) != list(ids_source):
            raise ConfigError("perturbation sets must cover the same sample ids in the same order")
    if a.shape != s.shape:
        raise ShapeError(f"perturbation sets differ in shape: {a.shape} vs {s.shape}")
    n = a.shape[0] if a.ndim == 4 else 1
    return SpectrumDiff(_mean_magnitude(a) - _mean_magnitude(s), n)


# -- loss surface -------------------------------------------------------------


@dataclass
class OrthogonalDirection:
    direction: np.ndarray
    residual: float  # |<out, delta>| / (||out|| ||delta||) after the final rescale


def _remove_component(r: np.ndarray, d: np.ndarray) -> np.ndarray:
    return r - (np.vdot(r, d) / np.vdot(d, d)) * d


def orthogonal_direction(delta, epsilon: float, seed: int = 0) -> OrthogonalDirection:
    d = np.asarray(delta, dtype=np.float64)
    if not np.any(d):
        raise ConfigError("cannot build a direction orthogonal to a zero perturbation")
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    r = np.random.default_rng(seed).standard_normal(d.shape)
    for _ in range(2):
        r = _remove_component(r, d)
        r = r * (epsilon / np.max(np.abs(r)))
    residual = abs(float(np.vdot(r, d))) / (float(np.linalg.norm(r)) * float(np.linalg.norm(d)))
    return OrthogonalDirection(r, residual)


@dataclass
class SurfaceGrid:
    values: np.ndarray  # values[i + k, j + k] is the loss at offset (i, j)
    dir1: np.ndarray
    dir2: np.ndarray
    scale: float
    center_id: int = -1

    @property
    def half_extent(self) -> int:
        return (self.values.shape[0] - 1) // 2

    def at(self, i: int, j: int) -> float:
        k = self.half_extent
        if abs(i) > k or abs(j) > k:
            raise IndexError(f"offset ({i}, {j}) outside a grid of half extent {k}")
        return float(self.values[i + k, j + k])

    def write_csv(self, path, meta: dict | None = None) -> None:
        k = self.half_extent
        rows = ([i, j, self.at(i, j)] for i in range(-k, k + 1) for j in range(-k, k + 1))
        write_report(path, dict(meta or {}, half_extent=k, scale=self.scale, center_id=self.center_id),
                     ["i", "j", "loss"], rows)


def loss_surface(model: Model, x, y: int, dir1, dir2, half_extent: int = 20, scale: float = 1.0,
                 center_id: int = -1) -> SurfaceGrid:
    """Cross-entropy on the plane ``x + a*dir1 + b*dir2`` (clipped to [0, 1]),
    sampled at ``a, b = (i/k)*scale`` for ``i in [-k, k]``."""
    k = int(half_extent)
    if k < 1:
        raise ConfigError("half extent must be at least 1")
    x = np.asarray(x, dtype=np.float64)
    d1 = np.asarray(dir1, dtype=np.float64)
    d2 = np.asarray(dir2, dtype=np.float64)
    if d1.shape != x.shape or d2.shape != x.shape:
        raise ShapeError("directions must match the input shape")
    steps = np.arange(-k, k + 1) / k * scale
    pad = (1,) * x.ndim
    a = steps.reshape((-1, 1) + pad)
    b = steps.reshape((1, -1) + pad)
    pts = np.clip(x + a * d1 + b * d2, 0.0, 1.0).reshape((-1,) + x.shape)
    logits = T.forward(model, pts, model.depth - 1)
    labels = np.full(len(pts), int(y))
    logp = T.log_softmax_t(logits)
    losses = -logp[np.arange(len(pts)), labels]
    return SurfaceGrid(losses.reshape(2 * k + 1, 2 * k + 1), d1, d2, float(scale), center_id)


# -- smoothness ---------------------------------------------------------------


def grad_norms(model: Model, x, y) -> np.ndarray:
    g = T.input_gradient(model, x, y)
    return np.linalg.norm(g.reshape(len(g), -1), axis=1)


POINT_KINDS = ("clean", "gaussian", "pgd")


@dataclass
class SmoothnessReport:
    grad_norm: dict  # {(point_kind, model_name): mean norm}
    sample_count: int
    lambda_max: dict = field(default_factory=dict)  # {model_name: mean lambda at clean points}

    def write_csv(self, path, meta: dict | None = None) -> None:
        names = sorted({m for _, m in self.grad_norm})
        rows = [[kind, m, self.grad_norm[(kind, m)]] for kind in POINT_KINDS for m in names]
        rows += [["lambda_max_clean", m, v] for m, v in sorted(self.lambda_max.items())]
        write_report(path, dict(meta or {}, samples=self.sample_count), ["point", "model", "value"], rows)


def grad_norm_report(models: dict[str, Model], x, y, sigma2: float = 0.01, attack: AttackConfig | None = None,
                     seed: int = 0, pgd_against: str = "measured", lambda_iters: int = 0) -> SmoothnessReport:
    """Mean input-gradient norm at clean, Gaussian-noised and PGD points for each model.

    ``pgd_against='measured'`` attacks the model being measured; ``'original'``
    reuses the points crafted on ``models['original']`` for every model.
    ``lambda_iters > 0`` also records the mean largest input-Hessian eigenvalue.
    """
    if pgd_against not in ("measured", "original"):
        raise ConfigError("pgd_against must be 'measured' or 'original'")
    attack = attack or AttackConfig(epsilon=8 / 255, alpha=2 / 255, iterations=20)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    noisy = gaussian_perturb(x, sigma2, seed=seed)
    shared = None
    if pgd_against == "original":
        shared = x + pgd(models["original"], x, y, attack).delta
    out, lam = {}, {}
    for name, m in models.items():
        adv = shared if shared is not None else x + pgd(m, x, y, attack).delta
        for kind, pts in zip(POINT_KINDS, (x, noisy, adv)):
            out[(kind, name)] = float(np.mean(grad_norms(m, pts, y)))
        if lambda_iters:
            lam[name] = float(np.mean(hessian_lambda_max(m, x, y, max_iters=lambda_iters, seed=seed).values))
    return SmoothnessReport(out, len(x), lam)


@dataclass
class LambdaMax:
    values: np.ndarray  # per sample, sign from the Rayleigh quotient
    iterations: int
    converged: np.ndarray

    @property
    def value(self) -> float:
        return float(self.values[0])


def hessian_lambda_max(model: Model, x, y, max_iters: int = 100, tol: float = 1e-6, seed: int = 0,
                       loss_fn=None, upto_layer: int | None = None) -> LambdaMax:
    """Dominant-magnitude eigenvalue of each sample's input Hessian by power iteration.

    A single input (shape ``model.input_shape``) is treated as a batch of one.
    Rows stop updating once ``|l_t+1 - l_t| <= tol * |l_t|``.
    """
    if max_iters < 1:
        raise ConfigError("max_iters must be at least 1")
    x = np.asarray(x, dtype=np.float64)
    if x.shape == tuple(model.input_shape):
        x = x[None]
    y = np.atleast_1d(np.asarray(y))
    n = len(x)
    axes = tuple(range(1, x.ndim))
    v = np.random.default_rng(seed).standard_normal(x.shape)
    v /= np.sqrt(np.sum(v * v, axis=axes, keepdims=True))
    lam = np.zeros(n)
    done = np.zeros(n, dtype=bool)
    it = 0
    for it in range(1, max_iters + 1):
        # rows are independent under a summed loss, so one batched product serves all
        hv = T.hvp_input(model, x, y, v, loss_fn, upto_layer)
        new = np.sum(v * hv, axis=axes)
        if it > 1:
            done |= np.abs(new - lam) <= tol * np.abs(lam)
        lam = np.where(done, lam, new)
        norms = np.sqrt(np.sum(hv * hv, axis=axes, keepdims=True))
        live = (~done).reshape((n,) + (1,) * (x.ndim - 1)) & (norms > 0)
        v = np.where(live, hv / np.where(norms > 0, norms, 1.0), v)
        if done.all():
            break
    return LambdaMax(lam, it, done)


# -- similarity ---------------------------------------------------------------


@dataclass
class SimilarityReport:
    kl: dict  # stage -> mean KL(witness || source)
    agreement: dict
    cosine: dict
    sample_count: int

    def write_csv(self, path, meta: dict | None = None) -> None:
        rows = [[s, self.kl[s], self.agreement[s], self.cosine[s]] for s in self.kl]
        write_report(path, dict(meta or {}, samples=self.sample_count), ["stage", "kl", "agreement", "cosine"], rows)


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    return np.where(denom > 0, np.sum(a * b, axis=1) / np.where(denom > 0, denom, 1.0), 0.0)


def similarity(model_a: Model, model_b: Model, x, y) -> tuple[float, float, float]:
    """``(mean KL(p_b || p_a), argmax agreement, mean input-gradient cosine)``."""
    if model_a.input_shape != model_b.input_shape or model_a.num_classes != model_b.num_classes:
        raise ShapeError("models must share input and output shapes")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    la = T.forward(model_a, x, model_a.depth - 1)
    lb = T.forward(model_b, x, model_b.depth - 1)
    pb = T.softmax_t(lb)
    kl_rows = np.sum(pb * (T.log_softmax_t(lb) - T.log_softmax_t(la)), axis=1)
    kl = float(np.mean(np.maximum(kl_rows, 0.0)))
    agree = float(np.mean(np.argmax(la, axis=1) == np.argmax(lb, axis=1)))
    cos = float(np.mean(_cosine_rows(T.input_gradient(model_a, x, y), T.input_gradient(model_b, x, y))))
    return kl, agree, cos


def similarity_report(source: Model, witness: Model, x, y, aligned: Model | None = None) -> SimilarityReport:
    """Source-to-witness similarity, before and (when given) after alignment."""
    stages = {"before": source}
    if aligned is not None:
        stages["after"] = aligned
    kl, agree, cos = {}, {}, {}
    for stage, m in stages.items():
        kl[stage], agree[stage], cos[stage] = similarity(m, witness, x, y)
    return SimilarityReport(kl, agree, cos, len(np.asarray(y)))
