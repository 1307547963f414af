"""Manifest-driven pipeline: build, train, align, attack, evaluate, analyse.

Every stage has a content hash over its own manifest section and the hashes of
the stages it consumes. A re-run skips any stage whose hash and output files are
unchanged, so editing the attack only re-runs evaluation and analysis.

Manifests are TOML::

    [experiment]
    seeds = [0, 1, 2]
    out = "runs/self-align"

    [data]
    kind = "synth"
    synth = "gauss-blobs"
    n_train = 2000
    n_test = 1000

    [models.A]
    arch = "cnn-S"
    seed_offset = 0
    train = { epochs = 10 }

    [alignments.A_aligned]
    source = "A"
    witnesses = ["A2"]
    temperature = 4.0
    lr = 0.3
    epochs = 5

    [attack]
    method = "pgd"
    eps = "8/255"

    [eval]
    sources = { A = ["A_aligned"] }
    targets = ["B"]

    [analysis]
    kinds = ["smoothness", "similarity", "dct", "surface"]
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import analysis as AN
from .alignment import AlignmentConfig, align, write_loss_history
from .attacks import AttackConfig, attack, parse_fraction
from .data import Dataset, load_csv, load_idx, synth_split
from .errors import ConfigError, MalignError, StageError
from .harness import BASELINE, DEFAULT_EVAL_SAMPLES, Run, transfer_matrix
from .io import load_checkpoint, save_checkpoint, save_perturbations
from .models import TrainConfig, build_model, train
from .tensor import Model

ANALYSES = ("smoothness", "similarity", "dct", "surface")
SEED_STRIDE = 1000


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _safe(name: str) -> str:
    return "na" if name == BASELINE else name.replace("/", "_").replace("+", "_")


# -- manifest -----------------------------------------------------------------


@dataclass
class Manifest:
    raw: dict
    base_dir: Path
    out_dir: Path
    seeds: list[int] = field(default_factory=list)

    @classmethod
    def load(cls, path, out_dir=None, overrides: dict | None = None) -> "Manifest":
        path = Path(path)
        try:
            raw = tomllib.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"manifest {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"manifest {path}: {exc}") from None
        return cls.from_dict(raw, path.parent, out_dir, overrides)

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".", out_dir=None, overrides: dict | None = None) -> "Manifest":
        raw = json.loads(json.dumps(raw))
        for key, value in (overrides or {}).items():
            raw.setdefault("experiment", {})[key] = value
        base = Path(base_dir)
        exp = raw.get("experiment", {})
        out = Path(out_dir) if out_dir is not None else base / exp.get("out", "run")
        m = cls(raw, base, out, [int(s) for s in exp.get("seeds", [0])])
        m.validate()
        return m

    def section(self, name: str) -> dict:
        return self.raw.get(name, {})

    def validate(self) -> None:
        models = self.section("models")
        if not models:
            raise ConfigError("manifest declares no models")
        for name, spec in models.items():
            if "arch" not in spec:
                raise ConfigError(f"model {name!r} needs an arch")
        for name, spec in self.section("alignments").items():
            if name in models:
                raise ConfigError(f"alignment {name!r} reuses a model name")
            for ref in [spec.get("source")] + list(spec.get("witnesses", [])):
                if ref not in models:
                    raise ConfigError(f"alignment {name!r} refers to unknown model {ref!r}")
            if not spec.get("witnesses"):
                raise ConfigError(f"alignment {name!r} has no witnesses")
            if isinstance(spec.get("lr"), list) and len(spec["lr"]) > 1 and spec.get("validation_target") not in models:
                raise ConfigError(f"alignment {name!r} sweeps lr but names no known validation_target")
        known = set(models) | set(self.section("alignments"))
        ev = self.section("eval")
        for src, variants in ev.get("sources", {}).items():
            for ref in [src] + [p for v in variants for p in v.split("+")]:
                if ref not in known:
                    raise ConfigError(f"eval refers to unknown model {ref!r}")
        for t in ev.get("targets", []):
            if t not in models:
                raise ConfigError(f"eval target {t!r} is not a declared model")
        for kind in self.section("analysis").get("kinds", []):
            if kind not in ANALYSES:
                raise ConfigError(f"unknown analysis {kind!r}; choose from {ANALYSES}")
        self.attack_config(0)
        if not self.seeds:
            raise ConfigError("manifest needs at least one seed")

    def attack_config(self, seed: int) -> AttackConfig:
        a = dict(self.section("attack"))
        method = a.pop("method", "pgd")
        eps = parse_fraction(a.pop("eps", "4/255"))
        alpha = parse_fraction(a.pop("alpha", "1/255"))
        iters = int(a.pop("iters", 20))
        return AttackConfig.for_method(method, eps, alpha, iters, seed, **a)


# -- data ---------------------------------------------------------------------


def load_data(m: Manifest) -> tuple[dict[str, Dataset], str]:
    """Return ``{'train', 'test', 'val'?}`` and the data-stage hash."""
    d = dict(m.section("data"))
    kind = d.get("kind", "synth")
    if kind == "synth":
        n_val = int(d.get("n_val", 0))
        n_test = int(d.get("n_test", 1000))
        train_ds, rest = synth_split(d.get("synth", "gauss-blobs"), int(d.get("n_train", 2000)), n_test + n_val,
                                     int(d.get("num_classes", 10)), float(d.get("noise", 0.1)), int(d.get("seed", 0)),
                                     int(d.get("image_size", 12)), int(d.get("channels", 1)),
                                     float(d.get("separation", 0.7)))
        out = {"train": train_ds, "test": rest.subset(np.arange(n_test))}
        if n_val:
            out["val"] = rest.subset(np.arange(n_test, n_test + n_val))
        return out, _hash(d)
    paths = {k: m.base_dir / v for k, v in d.items() if k.endswith(("_images", "_labels", "_path"))}
    hashes = {k: _file_hash(p) for k, p in sorted(paths.items()) if p.exists()}
    k = d.get("num_classes")
    out = {}
    for split in ("train", "test", "val"):
        if kind == "idx" and f"{split}_images" in paths:
            out[split] = load_idx(paths[f"{split}_images"], paths[f"{split}_labels"], k, split)
        elif kind == "csv" and f"{split}_path" in paths:
            shape = tuple(d["image_shape"]) if "image_shape" in d else None
            out[split] = load_csv(paths[f"{split}_path"], bool(d.get("header", False)), shape,
                                  float(d.get("scale", 1.0)), k, split)
    if kind not in ("idx", "csv"):
        raise ConfigError(f"unknown data kind {kind!r}")
    if "train" not in out or "test" not in out:
        raise ConfigError("file datasets need train and test splits")
    return out, _hash([d, hashes])


# -- stage bookkeeping --------------------------------------------------------


class Ledger:
    """Per-stage hashes plus hashes of the files each stage wrote."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / "stages.json"
        self.stages = json.loads(self.path.read_text()) if self.path.exists() else {}
        self.out_dir = out_dir
        self.ran: list[str] = []
        self.skipped: list[str] = []

    def fresh(self, stage: str, h: str) -> bool:
        rec = self.stages.get(stage)
        if not rec or rec["hash"] != h:
            return False
        for rel, fh in rec["outputs"].items():
            p = self.out_dir / rel
            if not p.exists() or _file_hash(p) != fh:
                return False
        return True

    def record(self, stage: str, h: str, outputs: list[Path]) -> None:
        self.stages[stage] = {"hash": h, "outputs": {str(p.relative_to(self.out_dir)): _file_hash(p)
                                                     for p in sorted(outputs)}}
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.stages, sort_keys=True, indent=1) + "\n")


def _run_stage(ledger: Ledger, stage: str, h: str, fn):
    if ledger.fresh(stage, h):
        ledger.skipped.append(stage)
        return
    try:
        outputs = fn()
    except MalignError as exc:
        raise StageError(f"stage {stage} failed: {exc}") from exc
    ledger.record(stage, h, outputs)
    ledger.ran.append(stage)


# -- stage bodies (module level so worker processes can import them) -----------


def _train_task(args):
    name, spec, seed, data, path, provenance = args
    init_seed = SEED_STRIDE * seed + int(spec.get("seed_offset", 0))
    model = build_model(spec["arch"], init_seed, data.num_classes, data.input_shape)
    cfg = TrainConfig(**dict(spec.get("train", {}), seed=init_seed))
    trained, hist = train(model, data, cfg)
    save_checkpoint(trained, path, dict(provenance, history=hist.epochs))
    return path


def _align_cfg(spec: dict, witnesses: list[Model], seed: int, lr: float) -> AlignmentConfig:
    keys = ("distance", "align_layer", "temperature", "lam", "epochs", "batch_size", "warmup_fraction", "momentum",
            "clip_global_norm", "early_stop", "kl_direction", "projection_seed")
    kw = {k: spec[k] for k in keys if k in spec}
    return AlignmentConfig(witnesses=tuple(witnesses), base_lr=float(lr), seed=seed, **kw)


def pick_alignment_lr(source: Model, spec: dict, witnesses: list[Model], seed: int, lrs, train_ds: Dataset,
                      val_target: Model, val_pool: Dataset, attack_cfg: AttackConfig,
                      n: int = DEFAULT_EVAL_SAMPLES) -> tuple[float, dict]:
    """Learning rate whose aligned model gives the largest transfer delta on a
    held-out target and pool; ties go to the earliest listed rate."""
    variants = {BASELINE: source}
    for lr in lrs:
        variants[f"lr={lr!r}"] = align(source, _align_cfg(spec, witnesses, seed, lr), train_ds).model
    rep = transfer_matrix([Run(seed, {"src": variants}, {"val": val_target})], val_pool, attack_cfg, n)
    scores = {lr: rep.delta("src", f"lr={lr!r}", "val") for lr in lrs}
    best = max(lrs, key=lambda lr: (scores[lr], -list(lrs).index(lr)))
    return float(best), {repr(k): v for k, v in scores.items()}


# -- runner -------------------------------------------------------------------


@dataclass
class RunSummary:
    out_dir: Path
    ran: list[str]
    skipped: list[str]
    report: object = None


def run_experiment(manifest: Manifest, workers: int = 1) -> RunSummary:
    out = manifest.out_dir
    out.mkdir(parents=True, exist_ok=True)
    ledger = Ledger(out)
    data, data_hash = load_data(manifest)
    models_spec = manifest.section("models")
    aligns_spec = manifest.section("alignments")
    seeds = manifest.seeds
    ckpt = lambda name, s: out / "checkpoints" / f"{name}_s{s}.ckpt"  # noqa: E731

    # train
    hashes: dict[tuple[str, int], str] = {}
    todo = []
    for name, spec in models_spec.items():
        for s in seeds:
            h = _hash(["train", data_hash, spec, s])
            hashes[(name, s)] = h
            stage = f"train/{name}/s{s}"
            if ledger.fresh(stage, h):
                ledger.skipped.append(stage)
            else:
                todo.append((stage, h, (name, spec, s, data["train"], ckpt(name, s),
                                        {"model": name, "seed": s, "stage_hash": h})))
    (out / "checkpoints").mkdir(exist_ok=True)
    if todo:
        if workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [(stage, h, pool.submit(_train_task, args)) for stage, h, args in todo]
                for stage, h, fut in futures:
                    _finish(ledger, stage, h, fut.result)
        else:
            for stage, h, args in todo:
                _finish(ledger, stage, h, lambda a=args: _train_task(a))

    loaded: dict[tuple[str, int], Model] = {}

    def model(name: str, s: int) -> Model:
        if (name, s) not in loaded:
            loaded[(name, s)] = load_checkpoint(ckpt(name, s))
        return loaded[(name, s)]

    # align
    for name, spec in aligns_spec.items():
        for s in seeds:
            deps = [hashes[(spec["source"], s)]] + [hashes[(w, s)] for w in spec["witnesses"]]
            lrs = spec.get("lr", 0.01)
            lrs = lrs if isinstance(lrs, list) else [lrs]
            if len(lrs) > 1:
                deps.append(hashes[(spec["validation_target"], s)])
                deps.append(manifest.section("attack"))
            h = _hash(["align", data_hash, spec, s, deps])
            hashes[(name, s)] = h

            def body(name=name, spec=spec, s=s, lrs=lrs, h=h):
                src = model(spec["source"], s)
                wits = [model(w, s) for w in spec["witnesses"]]
                chosen, scores = float(lrs[0]), {}
                if len(lrs) > 1:
                    if "val" not in data:
                        raise ConfigError("learning-rate sweep needs a validation split")
                    chosen, scores = pick_alignment_lr(src, spec, wits, s, lrs, data["train"],
                                                       model(spec["validation_target"], s), data["val"],
                                                       manifest.attack_config(s))
                res = align(src, _align_cfg(spec, wits, s, chosen), data["train"])
                hist = out / "alignment" / f"{name}_s{s}_loss.csv"
                hist.parent.mkdir(parents=True, exist_ok=True)
                write_loss_history(hist, res.history)
                save_checkpoint(res.model, ckpt(name, s), {"alignment": name, "seed": s, "lr": chosen,
                                                           "lr_scores": scores, "stage_hash": h})
                return [ckpt(name, s), hist]

            _run_stage(ledger, f"align/{name}/s{s}", h, body)

    # evaluate
    ev = manifest.section("eval")
    report = None
    eval_hash = None
    if ev.get("sources"):
        n = int(ev.get("n", DEFAULT_EVAL_SAMPLES))
        pool_name = ev.get("pool", "test")
        dep = sorted(hashes[(k, s)] for k in _eval_models(ev) for s in seeds)
        eval_hash = _hash(["eval", data_hash, ev, manifest.section("attack"), seeds, dep])

        def body():
            nonlocal report
            runs = [Run(s, {src: dict([(BASELINE, model(src, s))] + [(v, _resolve(v, s, model)) for v in vs])
                            for src, vs in ev["sources"].items()},
                        {t: model(t, s) for t in ev.get("targets", [])}) for s in seeds]
            records: list = []
            report = transfer_matrix(runs, data[pool_name], manifest.attack_config(0), n, records=records)
            written = list(report.write_csvs(out / "reports", {"manifest_hash": _hash(manifest.raw)}))
            for r in records:
                stem = f"s{r['seed']}__{_safe(r['source'])}__{_safe(r['variant'])}__{_safe(r['target'])}"
                pert = out / "perturbations" / f"{stem}.pert"
                pert.parent.mkdir(parents=True, exist_ok=True)
                save_perturbations(pert, r["delta"], r["sample_ids"], r["attack_fingerprint"],
                                   [r["source_model_id"]], {"seed": r["seed"]})
                cell = out / "reports" / "cells" / f"{stem}.json"
                cell.parent.mkdir(parents=True, exist_ok=True)
                info = {k: v for k, v in r.items() if k not in ("delta", "sample_ids")}
                info["sample_ids"] = [int(i) for i in r["sample_ids"]]
                info["perturbations"] = str(pert.relative_to(out))
                cell.write_text(json.dumps(info, sort_keys=True, indent=1) + "\n")
                written += [pert, cell]
            return written

        _run_stage(ledger, "eval", eval_hash, body)

    # analysis
    an = manifest.section("analysis")
    for kind in an.get("kinds", []):
        h = _hash(["analysis", kind, an, eval_hash, data_hash, manifest.section("attack"),
                   sorted(hashes[(k, s)] for k in aligns_spec for s in seeds)])
        _run_stage(ledger, f"analysis/{kind}", h,
                   lambda kind=kind: _analysis(kind, manifest, data, model, out))

    completion = {"manifest_hash": _hash(manifest.raw), "seeds": seeds,
                  "stages": {k: v["hash"] for k, v in sorted(ledger.stages.items())}}
    (out / "completion.json").write_text(json.dumps(completion, sort_keys=True, indent=1) + "\n")
    return RunSummary(out, ledger.ran, ledger.skipped, report)


def _finish(ledger: Ledger, stage: str, h: str, get):
    try:
        path = get()
    except MalignError as exc:
        raise StageError(f"stage {stage} failed: {exc}") from exc
    ledger.record(stage, h, [path])
    ledger.ran.append(stage)


def _eval_models(ev: dict) -> set[str]:
    names = set(ev.get("sources", {})) | set(ev.get("targets", []))
    for vs in ev.get("sources", {}).values():
        for v in vs:
            names.update(v.split("+"))
    return names


def _resolve(variant: str, s: int, model):
    parts = variant.split("+")
    return model(parts[0], s) if len(parts) == 1 else [model(p, s) for p in parts]


def _analysis(kind: str, manifest: Manifest, data: dict, model, out: Path) -> list[Path]:
    an = manifest.section("analysis")
    pool = data[manifest.section("eval").get("pool", "test")]
    n = int(an.get("samples", manifest.section("eval").get("n", DEFAULT_EVAL_SAMPLES)))
    attack_cfg = manifest.attack_config(0)
    written = []
    base = out / "reports" / "analysis"
    for name, spec in manifest.section("alignments").items():
        src, wit = spec["source"], spec["witnesses"][0]
        rows = []
        dct_sum, dct_n = None, 0
        for s in manifest.seeds:
            original, aligned = model(src, s), model(name, s)
            x, y = pool.inputs[:n], pool.labels[:n]
            if kind == "smoothness":
                rep = AN.grad_norm_report({"original": original, "aligned": aligned}, x, y,
                                          float(an.get("sigma2", 0.01)), replace(attack_cfg, seed=s), seed=s,
                                          pgd_against=an.get("pgd_against", "measured"),
                                          lambda_iters=int(an.get("lambda_iters", 0)))
                rows += [[s, kind_, m_, v] for (kind_, m_), v in rep.grad_norm.items()]
                rows += [[s, "lambda_max_clean", m_, v] for m_, v in rep.lambda_max.items()]
            elif kind == "similarity":
                rep = AN.similarity_report(original, model(wit, s), x, y, aligned)
                rows += [[s, st, rep.kl[st], rep.agreement[st], rep.cosine[st]] for st in rep.kl]
            elif kind == "dct":
                cfg = replace(attack_cfg, seed=s)
                diff = AN.spectrum_diff(attack(aligned, x, y, cfg).delta, attack(original, x, y, cfg).delta)
                dct_sum = diff.matrix if dct_sum is None else dct_sum + diff.matrix
                dct_n += 1
            elif kind == "surface" and s == manifest.seeds[0]:
                k = int(an.get("surface_half_extent", 20))
                scale = float(an.get("surface_scale", 2.0))
                for tag, m_ in (("original", original), ("aligned", aligned)):
                    delta = attack(m_, x[:1], y[:1], replace(attack_cfg, seed=s)).delta[0]
                    d2 = AN.orthogonal_direction(delta, attack_cfg.epsilon, seed=s)
                    grid = AN.loss_surface(m_, x[0], int(y[0]), delta, d2.direction, k, scale, int(pool.ids[0]))
                    p = base / f"surface_{name}_{tag}.csv"
                    grid.write_csv(p, {"alignment": name, "model": tag, "orthogonality_residual": d2.residual})
                    written.append(p)
        if kind == "smoothness":
            p = base / f"smoothness_{name}.csv"
            AN.write_report(p, {"alignment": name, "samples": n}, ["seed", "point", "model", "value"], rows)
            written.append(p)
        elif kind == "similarity":
            p = base / f"similarity_{name}.csv"
            AN.write_report(p, {"alignment": name, "witness": wit, "samples": n, "kl": "KL(witness||source)"},
                            ["seed", "stage", "kl", "agreement", "cosine"], rows)
            written.append(p)
        elif kind == "dct":
            p = base / f"dct_{name}.csv"
            AN.SpectrumDiff(dct_sum / dct_n, n * dct_n).write_csv(p, {"alignment": name, "seeds": dct_n})
            written.append(p)
    return written


def default_workers() -> int:
    return os.cpu_count() or 1
