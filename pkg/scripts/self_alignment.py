"""Run the bundled self-alignment scenario and print a per-seed summary.

    python scripts/self_alignment.py --seeds 0 1 2 --out runs/self_align
"""

import argparse
from pathlib import Path

import numpy as np

from malign.analysis import POINT_KINDS, write_report
from malign.scenarios import run_scenario


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--lambda-iters", type=int, default=30)
    ap.add_argument("--out", type=Path, help="write summary CSVs here")
    args = ap.parse_args()

    _, metrics = run_scenario(seeds=tuple(args.seeds), lambda_iters=args.lambda_iters)
    rows = []
    for m in metrics:
        sm, si = m.smoothness, m.similarity
        row = [m.seed, m.samples, m.error_before, m.error_after]
        row += [sm.grad_norm[(k, v)] for k in POINT_KINDS for v in ("original", "aligned")]
        row += [sm.lambda_max.get("original", float("nan")), sm.lambda_max.get("aligned", float("nan"))]
        row += [si.kl["before"], si.kl["after"], si.agreement["before"], si.agreement["after"],
                si.cosine["before"], si.cosine["after"]]
        rows.append(row)
    header = ["seed", "samples", "error_original", "error_aligned"]
    header += [f"grad_{k}_{v}" for k in POINT_KINDS for v in ("original", "aligned")]
    header += ["lambda_original", "lambda_aligned", "kl_before", "kl_after", "agree_before", "agree_after",
               "cos_before", "cos_after"]

    table = np.array([r[2:] for r in rows], dtype=float)
    print(f"{'seed':>4} {'orig %':>7} {'aligned %':>9} {'delta':>6}")
    for r in rows:
        print(f"{r[0]:>4} {r[2]:>7.1f} {r[3]:>9.1f} {r[3] - r[2]:>+6.1f}")
    mean = table.mean(axis=0)
    print(f"mean {mean[0]:>7.2f} {mean[1]:>9.2f} {mean[1] - mean[0]:>+6.2f}")
    for i, name in enumerate(header[4:]):
        print(f"  {name:<22} {mean[i + 2]:.4f}")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        write_report(args.out / "self_alignment.csv", {"seeds": args.seeds}, header, rows)
        print(f"wrote {args.out / 'self_alignment.csv'}")


if __name__ == "__main__":
    main()
