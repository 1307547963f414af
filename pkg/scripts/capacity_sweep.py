"""Witness-capacity sweep: align a cnn-S source to witnesses of growing size.

Every value of the axis shares the source, target and evaluation set, so the
baseline row is computed once. Parameter counts are written alongside deltas.

    python scripts/capacity_sweep.py --seeds 0 --out runs/capacity.csv
"""

import argparse
from functools import lru_cache
from pathlib import Path

from malign.alignment import align
from malign.harness import BASELINE, Run, sweep
from malign.models import build_model
from malign.scenarios import SEED_STRIDE, SelfAlignScenario

WITNESSES = ("mlp-S", "mlp-M", "mlp-L", "cnn-S", "cnn-M", "cnn-L")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--witnesses", nargs="+", default=list(WITNESSES))
    ap.add_argument("--out", type=Path, default=Path("capacity_sweep.csv"))
    args = ap.parse_args()

    sc = SelfAlignScenario()
    train_ds, test = sc.data()
    pool = test.subset(range(sc.eval_pool))

    @lru_cache(maxsize=None)
    def trained(arch: str, init_seed: int):
        return sc.train_model(init_seed, train_ds, arch)

    def runs(arch: str):
        out = []
        for s in args.seeds:
            base = SEED_STRIDE * s
            source, target = trained(sc.arch, base), trained(sc.arch, base + 200)
            aligned = align(source, sc.align_cfg([trained(arch, base + 100)], s), train_ds).model
            out.append(Run(s, {"A": {BASELINE: source, "aligned": aligned}}, {"B": target}))
        return out

    res = sweep("witness_capacity", args.witnesses, runs, pool, sc.attack, sc.eval_samples,
                extra=lambda arch: {"witness_params": build_model(arch, 0).num_params})
    for arch, rep in res.reports.items():
        print(f"{arch:<6} params={res.extra[arch]['witness_params']:>7} delta={rep.delta('A', 'aligned', 'B'):+.1f}")
    res.write_csv(args.out, {"seeds": args.seeds})
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
