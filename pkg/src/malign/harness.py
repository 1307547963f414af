"""Transfer protocol: evaluation-set selection, error rates, delta tables, sweeps."""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .analysis import write_report
from .attacks import AttackConfig, attack, ensemble_logits
from .data import Dataset
from .errors import ConfigError
from .models import predict
from .tensor import Model

BASELINE = "n/a"
DEFAULT_EVAL_SAMPLES = 200


def model_id(m: Model | Sequence[Model]) -> str:
    if isinstance(m, Model):
        return f"{m.arch_id}@{m.init_seed}"
    return "+".join(model_id(x) for x in m)


def model_digest(m: Model | Sequence[Model]) -> str:
    """Content hash of architecture and parameters."""
    models = [m] if isinstance(m, Model) else list(m)
    h = hashlib.sha256()
    for mm in models:
        h.update(json.dumps([s.to_dict() for s in mm.layers], sort_keys=True).encode())
        for k in sorted(mm.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(mm.params[k], dtype="<f8").tobytes())
    return h.hexdigest()


def _predict_any(m, x) -> np.ndarray:
    if isinstance(m, Model):
        return predict(m, x)
    return np.argmax(ensemble_logits(m, x), axis=1)


# -- evaluation sets ----------------------------------------------------------


@dataclass
class EvalSet:
    ids: np.ndarray
    source_id: str
    target_id: str
    fingerprint: str
    exhausted: bool = False

    def __len__(self) -> int:
        return len(self.ids)


def select_eval_samples(source: Model, target: Model, pool: Dataset, n: int = DEFAULT_EVAL_SAMPLES,
                        whitebox: AttackConfig | None = None, chunk: int | None = None) -> EvalSet:
    """First ``n`` pool samples (in pool order) that both models classify correctly
    and whose white-box attack fools its own originating model, for both models."""
    whitebox = whitebox or AttackConfig(epsilon=8 / 255, alpha=2 / 255, iterations=20)
    chunk = chunk or max(n, 64)
    keep: list[int] = []
    for start in range(0, len(pool), chunk):
        x = pool.inputs[start : start + chunk]
        y = pool.labels[start : start + chunk]
        ok = (_predict_any(source, x) == y) & (_predict_any(target, x) == y)
        if ok.any():
            idx = np.flatnonzero(ok)
            fooled = attack(source, x[idx], y[idx], whitebox).whitebox_success
            fooled &= attack(target, x[idx], y[idx], whitebox).whitebox_success
            ok[idx] = fooled
        keep.extend(pool.ids[start : start + chunk][ok].tolist())
        if len(keep) >= n:
            break
    exhausted = len(keep) < n
    if exhausted:
        warnings.warn(f"evaluation pool exhausted: {len(keep)} of {n} samples qualify", stacklevel=2)
    fp = hashlib.sha256(json.dumps({"n": n, "attack": whitebox.fingerprint(), "source": model_digest(source),
                                    "target": model_digest(target), "pool": pool.provenance}).encode()).hexdigest()[:16]
    return EvalSet(np.asarray(keep[:n], dtype=np.int64), model_id(source), model_id(target), fp, exhausted)


def transfer_error(target, x_adv, labels) -> float:
    """Percentage of adversarial inputs the target misclassifies."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ConfigError("cannot compute a transfer error on an empty set")
    return 100.0 * float(np.mean(_predict_any(target, x_adv) != labels))


# -- transfer matrices --------------------------------------------------------


@dataclass
class Run:
    """One seed's models: ``sources[name][variant]`` (variant ``"n/a"`` is the
    original; a variant may be a list, attacked as a logit ensemble) and ``targets``."""

    seed: int
    sources: Mapping[str, Mapping[str, Model | Sequence[Model]]]
    targets: Mapping[str, Model]


@dataclass
class Cell:
    rates: list[float] = field(default_factory=list)
    counts: list[int] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.rates))

    @property
    def spread(self) -> tuple[float, float]:
        return float(np.min(self.rates)), float(np.max(self.rates))


@dataclass
class TransferReport:
    cells: dict  # (source, variant, target) -> Cell
    attack: dict
    meta: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str]]:
        seen = []
        for s, v, _ in self.cells:
            if (s, v) not in seen:
                seen.append((s, v))
        return seen

    def targets(self) -> list[str]:
        seen = []
        for _, _, t in self.cells:
            if t not in seen:
                seen.append(t)
        return seen

    def rate(self, source: str, variant: str, target: str) -> float:
        return self.cells[(source, variant, target)].mean

    def delta(self, source: str, variant: str, target: str) -> float:
        if (source, BASELINE, target) not in self.cells:
            raise ConfigError(f"no baseline row for source {source!r}")
        return self.rate(source, variant, target) - self.rate(source, BASELINE, target)

    def mean_delta(self, source: str, variant: str) -> float:
        return float(np.mean([self.delta(source, variant, t) for t in self.targets()]))

    def write_csvs(self, out_dir, meta: dict | None = None) -> tuple[Path, Path]:
        out = Path(out_dir)
        info = dict(self.meta, **(meta or {}), attack=self.attack)
        mrows = []
        for (s, v, t), c in self.cells.items():
            lo, hi = c.spread
            mrows.append([s, v, t, c.mean, lo, hi, sum(c.counts), len(c.rates)])
        write_report(out / "transfer_matrix.csv", info,
                     ["source", "variant", "target", "error_rate", "min", "max", "samples", "seeds"], mrows)
        drows = [[s, v, t, self.delta(s, v, t)] for (s, v, t) in self.cells if v != BASELINE]
        write_report(out / "deltas.csv", info, ["source", "variant", "target", "delta"], drows)
        return out / "transfer_matrix.csv", out / "deltas.csv"


class _Memo:
    """Caches eval sets and rates by content so shared baselines are computed once."""

    def __init__(self):
        self.sets: dict = {}
        self.rates: dict = {}


def transfer_matrix(runs: Sequence[Run], pool: Dataset, attack_cfg: AttackConfig, n: int = DEFAULT_EVAL_SAMPLES,
                    whitebox: AttackConfig | None = None, memo: _Memo | None = None,
                    records: list | None = None) -> TransferReport:
    """Error rates of every (source variant, target) pair, averaged over runs.

    Each pair's evaluation set is selected with the original source, so a variant
    and its baseline are scored on the same samples. The attack seed follows the
    run seed. ``records`` (if given) collects one dict per evaluated cell.
    """
    memo = memo or _Memo()
    whitebox = whitebox or replace(attack_cfg, seed=0)
    cells: dict = {}
    for run in runs:
        cfg = replace(attack_cfg, seed=run.seed)
        for sname, variants in run.sources.items():
            if BASELINE not in variants:
                raise ConfigError(f"source {sname!r} has no {BASELINE!r} baseline")
            original = variants[BASELINE]
            for tname, target in run.targets.items():
                skey = (model_digest(original), model_digest(target), whitebox.fingerprint(), n, pool.provenance)
                if skey not in memo.sets:
                    memo.sets[skey] = select_eval_samples(original, target, pool, n, whitebox)
                es = memo.sets[skey]
                sub = pool.by_ids(es.ids)
                for vname, model in variants.items():
                    rkey = (model_digest(model), model_digest(target), cfg.fingerprint(), es.fingerprint)
                    if rkey not in memo.rates:
                        if len(sub) == 0:
                            raise ConfigError(f"no evaluation samples for {sname} -> {tname}")
                        rec = attack(model, sub.inputs, sub.labels, cfg)
                        memo.rates[rkey] = (transfer_error(target, sub.inputs + rec.delta, sub.labels), rec)
                    rate, rec = memo.rates[rkey]
                    c = cells.setdefault((sname, vname, tname), Cell())
                    c.rates.append(rate)
                    c.counts.append(len(sub))
                    c.seeds.append(run.seed)
                    if records is not None:
                        records.append({"seed": run.seed, "source": sname, "variant": vname, "target": tname,
                                        "error_rate": rate, "samples": len(sub), "sample_ids": es.ids,
                                        "delta": rec.delta, "source_model_id": model_id(model),
                                        "attack_fingerprint": cfg.fingerprint(), "exhausted": es.exhausted})
    meta = {"seeds": [r.seed for r in runs], "eval_samples": n,
            "seed_convention": "run seed sets model init, training, alignment and attack seeds"}
    return TransferReport(cells, attack_cfg.to_dict(), meta)


# -- sweeps -------------------------------------------------------------------

SWEEP_AXES = ("witness_capacity", "witness_count", "distance", "attack")


@dataclass
class SweepResult:
    axis: str
    reports: dict  # axis value -> TransferReport
    extra: dict = field(default_factory=dict)  # axis value -> metadata (e.g. parameter counts)

    def write_csv(self, path, meta: dict | None = None) -> None:
        rows = []
        for value, rep in self.reports.items():
            for s, v, t in rep.cells:
                d = "" if v == BASELINE else rep.delta(s, v, t)
                rows.append([str(value), s, v, t, rep.rate(s, v, t), d, json.dumps(self.extra.get(value, {}),
                                                                                  sort_keys=True)])
        write_report(path, dict(meta or {}, axis=self.axis),
                     ["axis_value", "source", "variant", "target", "error_rate", "delta", "extra"], rows)


def sweep(axis: str, values: Sequence, make_runs: Callable[[object], Sequence[Run]], pool: Dataset,
          attack_cfg: AttackConfig | Callable[[object], AttackConfig], n: int = DEFAULT_EVAL_SAMPLES,
          extra: Callable[[object], dict] | None = None) -> SweepResult:
    """One report per axis value. Baselines and evaluation sets are shared across
    values through a content cache, so an unchanged baseline is computed once."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep needs at least one axis value")
    memo = _Memo()
    reports, info = {}, {}
    for value in values:
        cfg = attack_cfg(value) if callable(attack_cfg) else attack_cfg
        whitebox = replace(attack_cfg(values[0]) if callable(attack_cfg) else attack_cfg, seed=0)
        reports[value] = transfer_matrix(make_runs(value), pool, cfg, n, whitebox=whitebox, memo=memo)
        info[value] = extra(value) if extra else {}
    return SweepResult(axis, reports, info)
