"""``malign`` command line: train, align, attack, eval, analyze, run."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, MalignError

SUBCOMMANDS = ("train", "align", "attack", "eval", "analyze", "run")


def _fraction(text: str) -> float:
    from .attacks import parse_fraction

    try:
        return parse_fraction(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive_fraction(text: str) -> float:
    v = _fraction(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text!r}")
    return v


def _csv_list(text: str) -> list[str]:
    items = [t for t in text.split(",") if t]
    if not items:
        raise argparse.ArgumentTypeError("expected a comma-separated list")
    return items


def default_seed() -> int:
    raw = os.environ.get("MALIGN_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"MALIGN_SEED must be an integer, got {raw!r}") from None


def _add_data(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--data", required=required,
                   help="synth:<kind> | idx:<images>,<labels> | csv:<path>")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--separation", type=float, default=0.2)
    p.add_argument("--data-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="malign", description="Model alignment for transferable adversarial examples.")
    parser.add_argument("--config", help="TOML file whose [<subcommand>] table supplies flag defaults")
    parser.add_argument("--seed", type=int, default=None, help="global seed (default: $MALIGN_SEED or 0)")
    parser.add_argument("--workers", type=int, default=None, help="worker processes (default: logical cores)")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")

    p = sub.add_parser("train", help="train a zoo model")
    p.add_argument("--arch", required=True, help="e.g. mlp-S, cnn-M")
    _add_data(p)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--label-smoothing", type=float, default=0.0)
    p.add_argument("--out", required=True, help="checkpoint file or directory")

    p = sub.add_parser("align", help="fine-tune a source towards witness outputs")
    p.add_argument("--source", required=True)
    p.add_argument("--witness", required=True, type=_csv_list, help="W1.ckpt[,W2.ckpt...]")
    p.add_argument("--distance", choices=("kl", "tv", "hint", "combined"), default="kl")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=64)
    _add_data(p)
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="write the per-step loss CSV here")

    p = sub.add_parser("attack", help="craft perturbations against one model or a logit ensemble")
    p.add_argument("--model", required=True, type=_csv_list)
    p.add_argument("--method", choices=("pgd", "mi", "ni", "sini", "vmi", "vni", "ti", "di"), default="pgd")
    p.add_argument("--eps", type=_positive_fraction, default=4 / 255)
    p.add_argument("--alpha", type=_positive_fraction, default=1 / 255)
    p.add_argument("--iters", type=int, default=20)
    _add_data(p)
    p.add_argument("--n", type=int, default=200, help="attack the first n samples of the split")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="transfer error matrix with before/after deltas")
    p.add_argument("--sources", required=True, action="append", type=_csv_list,
                   help="ORIG.ckpt[,VARIANT.ckpt...]; repeat for more sources")
    p.add_argument("--targets", required=True, type=_csv_list)
    p.add_argument("--seeds", type=int, default=3, help="number of attack seeds")
    p.add_argument("--method", choices=("pgd", "mi", "ni", "sini", "vmi", "vni", "ti", "di"), default="pgd")
    p.add_argument("--eps", type=_positive_fraction, default=4 / 255)
    p.add_argument("--alpha", type=_positive_fraction, default=1 / 255)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--n", type=int, default=200)
    _add_data(p)
    p.add_argument("--out", required=True, help="report directory")

    p = sub.add_parser("analyze", help="measurement reports")
    asub = p.add_subparsers(dest="analysis", metavar="{dct,surface,smoothness,similarity}")
    a = asub.add_parser("dct", help="DCT magnitude difference of two perturbation sets")
    a.add_argument("--aligned", required=True)
    a.add_argument("--source", required=True)
    a.add_argument("--out", required=True)
    a = asub.add_parser("surface", help="loss surface around one sample")
    a.add_argument("--model", required=True)
    a.add_argument("--index", type=int, default=0)
    a.add_argument("--eps", type=_positive_fraction, default=8 / 255)
    a.add_argument("--alpha", type=_positive_fraction, default=2 / 255)
    a.add_argument("--iters", type=int, default=20)
    a.add_argument("--half-extent", type=int, default=20)
    a.add_argument("--scale", type=float, default=2.0)
    _add_data(a)
    a.add_argument("--out", required=True)
    a = asub.add_parser("smoothness", help="input-gradient norms of an original/aligned pair")
    a.add_argument("--original", required=True)
    a.add_argument("--aligned", required=True)
    a.add_argument("--sigma2", type=float, default=0.01)
    a.add_argument("--eps", type=_positive_fraction, default=8 / 255)
    a.add_argument("--alpha", type=_positive_fraction, default=2 / 255)
    a.add_argument("--iters", type=int, default=20)
    a.add_argument("--lambda-iters", type=int, default=0)
    a.add_argument("--pgd-against", choices=("measured", "original"), default="measured")
    a.add_argument("--n", type=int, default=200)
    _add_data(a)
    a.add_argument("--out", required=True)
    a = asub.add_parser("similarity", help="source/witness similarity before and after alignment")
    a.add_argument("--source", required=True)
    a.add_argument("--witness", required=True)
    a.add_argument("--aligned")
    a.add_argument("--n", type=int, default=1000)
    _add_data(a)
    a.add_argument("--out", required=True)

    p = sub.add_parser("run", help="execute an experiment manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="output directory (default: manifest's [experiment].out)")
    return parser


def _config_defaults(path: str, command: str, analysis: str | None) -> dict:
    from .experiment import tomllib

    try:
        raw = tomllib.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    table = dict(raw.get(command, {}))
    if analysis:
        table.update(table.pop(analysis, {}) if isinstance(table.get(analysis), dict) else {})
    return {k.replace("-", "_"): v for k, v in table.items() if not isinstance(v, dict)}


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:  # noqa: SLF001
        if isinstance(action, argparse._SubParsersAction):  # noqa: SLF001
            return action.choices[name]
    raise KeyError(name)


def _install_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Load ``--config`` values as subcommand defaults; explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if not known.config:
        return
    command = next((t for t in rest if t in SUBCOMMANDS), None)
    if command is None:
        return
    target = _subparser(parser, command)
    analysis = None
    if command == "analyze":
        after = rest[rest.index(command) + 1 :]
        analysis = next((t for t in after if t in ("dct", "surface", "smoothness", "similarity")), None)
        if analysis is None:
            return
        target = _subparser(target, analysis)
    actions = {a.dest: a for a in target._actions}  # noqa: SLF001
    for key, value in _config_defaults(known.config, command, analysis).items():
        if key not in actions:
            raise ConfigError(f"config key {key!r} is not a flag of {command}")
        actions[key].required = False
        target.set_defaults(**{key: value})


# -- command bodies -------------------------------------------------------------


def _dataset(args):
    from . import data as D

    spec = args.data
    kind, _, rest = spec.partition(":")
    if kind == "synth":
        train, test = D.synth_split(rest or "gauss-blobs", args.n_train, args.n_test, noise=args.noise,
                                    seed=args.data_seed, separation=args.separation)
        return train if args.split == "train" else test
    if kind == "idx":
        parts = rest.split(",")
        if len(parts) != 2:
            raise ConfigError("idx data needs <images>,<labels>")
        _require(*parts)
        return D.load_idx(parts[0], parts[1], split=args.split)
    if kind == "csv":
        _require(rest)
        return D.load_csv(rest, split=args.split)
    raise ConfigError(f"unknown data spec {spec!r}")


def _require(*paths) -> None:
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"no such file: {p}")


def _load(path):
    from .io import load_checkpoint

    _require(path)
    return load_checkpoint(path)


def cmd_train(args) -> dict:
    from .io import save_checkpoint
    from .models import TrainConfig, accuracy, build_model, train

    data = _dataset(args)
    model = build_model(args.arch, args.seed, data.num_classes, data.input_shape)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, base_lr=args.lr,
                      label_smoothing=args.label_smoothing, seed=args.seed)
    trained, hist = train(model, data, cfg)
    out = Path(args.out)
    if out.suffix != ".ckpt":
        out = out / f"{args.arch}_s{args.seed}.ckpt"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(trained, out, {"data": args.data, "train": cfg.to_dict(), "history": hist.epochs})
    return {"checkpoint": str(out), "train_accuracy": accuracy(trained, data)}


def cmd_align(args) -> dict:
    from .alignment import AlignmentConfig, align, write_loss_history
    from .io import save_checkpoint

    source = _load(args.source)
    witnesses = tuple(_load(w) for w in args.witness)
    cfg = AlignmentConfig(witnesses=witnesses, distance=args.distance, temperature=args.temperature, lam=args.lam,
                          epochs=args.epochs, batch_size=args.batch_size, base_lr=args.lr, seed=args.seed)
    res = align(source, cfg, _dataset(args))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.model, args.out, {"alignment": cfg.describe(), "source": args.source})
    if args.history:
        write_loss_history(args.history, res.history)
    return {"checkpoint": args.out, "steps": len(res.history),
            "final_loss": res.history[-1]["loss"] if res.history else None}


def _attack_cfg(args, seed):
    from .attacks import AttackConfig

    return AttackConfig.for_method(args.method, args.eps, args.alpha, args.iters, seed)


def cmd_attack(args) -> dict:
    from .attacks import attack
    from .io import save_perturbations

    models = [_load(m) for m in args.model]
    data = _dataset(args)
    data = data.subset(range(min(args.n, len(data))))
    cfg = _attack_cfg(args, args.seed)
    rec = attack(models if len(models) > 1 else models[0], data.inputs, data.labels, cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_perturbations(args.out, rec.delta, data.ids, cfg.fingerprint(), [rec.source_model_id], cfg.to_dict())
    return {"perturbations": args.out, "samples": len(data),
            "whitebox_success_rate": float(rec.whitebox_success.mean()) if len(data) else 0.0}


def cmd_eval(args) -> dict:
    from .harness import BASELINE, Run, transfer_matrix

    sources = {}
    for group in args.sources:
        name = Path(group[0]).stem
        sources[name] = {BASELINE: _load(group[0])}
        for v in group[1:]:
            sources[name][Path(v).stem] = _load(v)
    targets = {Path(t).stem: _load(t) for t in args.targets}
    runs = [Run(args.seed + k, sources, targets) for k in range(args.seeds)]
    report = transfer_matrix(runs, _dataset(args), _attack_cfg(args, args.seed), args.n)
    m, d = report.write_csvs(args.out)
    return {"transfer_matrix": str(m), "deltas": str(d)}


def cmd_analyze(args) -> dict:
    from . import analysis as AN
    from .attacks import AttackConfig, attack
    from .io import load_perturbations

    kind = args.analysis
    if kind == "dct":
        _require(args.aligned, args.source)
        ma, da = load_perturbations(args.aligned)
        ms, ds = load_perturbations(args.source)
        diff = AN.spectrum_diff(da, ds, ma["sample_ids"], ms["sample_ids"])
        diff.write_csv(args.out, {"aligned": args.aligned, "source": args.source})
        return {"report": args.out, "low_frequency_fraction": diff.low_frequency_fraction}
    data = _dataset(args)
    if kind == "surface":
        model = _load(args.model)
        cfg = AttackConfig(epsilon=args.eps, alpha=args.alpha, iterations=args.iters, seed=args.seed)
        x, y = data.inputs[args.index], int(data.labels[args.index])
        delta = attack(model, x, y, cfg).delta
        d2 = AN.orthogonal_direction(delta, args.eps, seed=args.seed)
        grid = AN.loss_surface(model, x, y, delta, d2.direction, args.half_extent, args.scale, int(data.ids[args.index]))
        grid.write_csv(args.out, {"model": args.model, "orthogonality_residual": d2.residual})
        return {"report": args.out, "center_loss": grid.at(0, 0)}
    data = data.subset(range(min(args.n, len(data))))
    if kind == "smoothness":
        cfg = AttackConfig(epsilon=args.eps, alpha=args.alpha, iterations=args.iters, seed=args.seed)
        rep = AN.grad_norm_report({"original": _load(args.original), "aligned": _load(args.aligned)}, data.inputs,
                                  data.labels, args.sigma2, cfg, seed=args.seed, pgd_against=args.pgd_against,
                                  lambda_iters=args.lambda_iters)
        rep.write_csv(args.out, {"original": args.original, "aligned": args.aligned})
        return {"report": args.out}
    if kind == "similarity":
        rep = AN.similarity_report(_load(args.source), _load(args.witness), data.inputs, data.labels,
                                   _load(args.aligned) if args.aligned else None)
        rep.write_csv(args.out, {"source": args.source, "witness": args.witness})
        return {"report": args.out, "kl": rep.kl, "agreement": rep.agreement, "cosine": rep.cosine}
    raise ConfigError("analyze needs one of dct, surface, smoothness, similarity")


def cmd_run(args) -> dict:
    from .experiment import Manifest, run_experiment

    _require(args.manifest)
    m = Manifest.load(args.manifest, out_dir=args.out)
    summary = run_experiment(m, workers=args.workers)
    return {"out": str(summary.out_dir), "ran": summary.ran, "skipped": summary.skipped}


COMMANDS = {"train": cmd_train, "align": cmd_align, "attack": cmd_attack, "eval": cmd_eval,
            "analyze": cmd_analyze, "run": cmd_run}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _install_config(parser, argv)
    except MalignError as exc:
        print(f"malign: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("malign: error: usage: a subcommand is required", file=sys.stderr)
        return 2
    try:
        if args.seed is None:
            args.seed = default_seed()
        if args.workers is None:
            args.workers = os.cpu_count() or 1
        if args.command == "analyze" and args.analysis is None:
            raise ConfigError("analyze needs one of dct, surface, smoothness, similarity")
        result = COMMANDS[args.command](args)
    except (MalignError, FileNotFoundError) as exc:
        kind = type(exc).__name__
        msg = str(exc).replace("\n", " ")
        print(f"malign: error: {kind}: {msg}", file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
