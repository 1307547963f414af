"""Acceptance suite: one test per criterion, each emitting a PASS/FAIL line."""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from malign import analysis as AN
from malign import tensor as T
from malign.alignment import AlignmentConfig, align
from malign.attacks import METHODS, AttackConfig, attack
from malign.experiment import Manifest, run_experiment
from malign.harness import BASELINE
from malign.models import build_model
from malign.scenarios import SelfAlignScenario, build_seed, ensemble_report, measure_seed

from oracles import ce_value, dct2_direct, dense_hessian, fd_input_grad, fd_param_grads, kink_margin, random_model

SUITE_START = time.perf_counter()
SEEDS = (0, 1, 2)


@pytest.fixture
def verdict(record_property, capsys):
    def emit(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {title}" + (f" ({detail})" if detail else "")
        record_property("acceptance", line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return emit


# -- 1 ---------------------------------------------------------------------------


def test_criterion_01_gradient_oracle(verdict):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    cases = rejected = 0
    worst = 0.0
    failures = []
    while cases < 200:
        m = random_model(rng)
        x = rng.random((2,) + m.input_shape)
        if kink_margin(m, x) < 1e-3:
            rejected += 1
            continue
        y = rng.integers(0, m.num_classes, size=2)
        b = T.backward(m, x, T.ce_loss(y, reduction="sum"))
        pairs = [(b.input_grad, fd_input_grad(lambda z: ce_value(m, z, y), x))]
        fd = fd_param_grads(m, lambda p: ce_value(m, x, y, p))
        pairs += [(b.param_grads[k], fd[k]) for k in m.params]
        for got, want in pairs:
            excess = np.abs(got - want) - (1e-8 + 1e-5 * np.abs(want))
            worst = max(worst, float(np.max(excess / (1e-8 + 1e-5 * np.abs(want)))))
            if np.any(excess > 0):
                failures.append(cases)
        cases += 1
    elapsed = time.perf_counter() - start
    verdict(1, "gradient oracle", not failures and elapsed < 60,
            f"{cases} cases, {rejected} near-kink draws skipped, {len(failures)} mismatches, {elapsed:.1f}s")


# -- 2 ---------------------------------------------------------------------------

REDUCTIONS = {
    "MI(mu=0) == PGD": (dict(method="mi", momentum=0.0), dict(method="pgd")),
    "SINI(m=1) == NI": (dict(method="sini", momentum=1.0, nesterov=True, scale_copies=1),
                        dict(method="ni", momentum=1.0, nesterov=True)),
    "VMI(N=0) == MI": (dict(method="vmi", momentum=1.0, variance_samples=0), dict(method="mi", momentum=1.0)),
    "TI(size=1) == base": (dict(method="ti", momentum=1.0, ti_kernel_size=1), dict(method="mi", momentum=1.0)),
    "DI(p=0) == base": (dict(method="di", momentum=1.0, di_probability=0.0), dict(method="mi", momentum=1.0)),
}


def _image_model(rng):
    while True:
        m = random_model(rng)
        if len(m.input_shape) == 3:
            return m


def test_criterion_02_attack_reductions(verdict):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    bad = []
    for name, (a, b) in REDUCTIONS.items():
        for _ in range(20):
            m = _image_model(rng)
            x = rng.random((4,) + m.input_shape)
            y = rng.integers(0, m.num_classes, size=4)
            base = dict(epsilon=float(rng.uniform(0.01, 0.1)), alpha=float(rng.uniform(0.005, 0.03)),
                        iterations=int(rng.integers(1, 6)), seed=int(rng.integers(1000)))
            if not np.array_equal(attack(m, x, y, AttackConfig(**base, **a)).delta,
                                  attack(m, x, y, AttackConfig(**base, **b)).delta):
                bad.append(name)
    elapsed = time.perf_counter() - start
    verdict(2, "attack reduction equalities", not bad and elapsed < 60,
            f"{len(REDUCTIONS)} reductions x 20 batches, mismatches: {sorted(set(bad)) or 'none'}, {elapsed:.1f}s")


# -- 3 ---------------------------------------------------------------------------


def test_criterion_03_constraint_invariants(verdict, scenario):
    rng = np.random.default_rng(3)
    checked = violations = 0

    def check(x, delta, eps):
        nonlocal checked, violations
        adv = x + delta
        per = np.max(np.abs(delta).reshape(len(delta), -1), axis=1) > eps + 1e-9
        per |= (adv.reshape(len(adv), -1).min(axis=1) < 0) | (adv.reshape(len(adv), -1).max(axis=1) > 1)
        checked += len(delta)
        violations += int(per.sum())

    for method in METHODS:
        for random_start in (False, True):
            for _ in range(5):
                m = _image_model(rng)
                x = rng.random((6,) + m.input_shape)
                x[0], x[1] = 0.0, 1.0
                y = rng.integers(0, m.num_classes, size=6)
                eps = float(rng.choice([1 / 255, 4 / 255, 8 / 255, 0.3]))
                cfg = AttackConfig.for_method(method, eps, float(rng.uniform(0.002, 0.05)), int(rng.integers(1, 6)),
                                              seed=int(rng.integers(100)), random_start=random_start,
                                              variance_samples=2 if method in ("vmi", "vni") else 0)
                check(x, attack(m, x, y, cfg).delta, eps)
    sc, _, metrics, records = scenario
    for x, delta in records:
        check(x, delta, sc.attack.epsilon)
    verdict(3, "perturbation budget and box", violations == 0, f"{checked} perturbations, {violations} violations")


# -- 4 ---------------------------------------------------------------------------


def test_criterion_04_alignment_fixpoint(verdict):
    sc = SelfAlignScenario()
    train_ds, _ = sc.data()
    m = build_model("cnn-S", 11)
    changed, nonzero = [], 0
    for distance in ("kl", "tv", "hint", "combined"):
        res = align(m, AlignmentConfig((m,), distance=distance, base_lr=0.5), train_ds)
        changed += [(distance, k) for k in m.params if not np.array_equal(res.model.params[k], m.params[k])]
        nonzero += sum(h["loss"] != 0.0 for h in res.history)
    verdict(4, "self-alignment fixpoint", not changed and nonzero == 0,
            f"4 distances x {len(res.history)} steps, changed tensors {len(changed)}, nonzero losses {nonzero}")


# -- shared scenario for 3 and 5 to 8 --------------------------------------------------------


@pytest.fixture(scope="module")
def scenario():
    sc = SelfAlignScenario()
    train_ds, test = sc.data()
    t0 = time.perf_counter()
    models = [build_seed(sc, s, train_ds) for s in SEEDS]
    t1 = time.perf_counter()
    metrics = [measure_seed(sc, m, test, lambda_iters=30) for m in models]
    t2 = time.perf_counter()
    pool = test.subset(np.arange(sc.eval_pool))
    records = []
    for m in models:
        for src in (m.source, m.aligned):
            cfg = replace(sc.attack, seed=m.seed)
            records.append((pool.inputs, attack(src, pool.inputs, pool.labels, cfg).delta))
    return sc, {"build": t1 - t0, "measure": t2 - t1}, metrics, records


def test_criterion_05_transfer_trend(verdict, scenario):
    sc, times, metrics, _ = scenario
    before = float(np.mean([m.error_before for m in metrics]))
    after = float(np.mean([m.error_after for m in metrics]))
    runtime = times["build"] + times["measure"]
    per_seed = ", ".join(f"s{m.seed}: {m.error_before:.1f}->{m.error_after:.1f}" for m in metrics)
    verdict(5, "self-alignment raises transfer error by >= 2 points",
            after - before >= 2.0 and runtime < 600,
            f"mean {before:.2f}% -> {after:.2f}% (delta {after - before:+.2f}); {per_seed}; "
            f"n={[m.samples for m in metrics]}; {runtime:.0f}s")


def test_criterion_06_gradient_norm_trend(verdict, scenario):
    _, times, metrics, _ = scenario
    parts, ok = [], True
    for kind in AN.POINT_KINDS:
        o = float(np.mean([m.smoothness.grad_norm[(kind, "original")] for m in metrics]))
        a = float(np.mean([m.smoothness.grad_norm[(kind, "aligned")] for m in metrics]))
        ok &= a < o
        parts.append(f"{kind} {o:.3f}->{a:.3f}")
    verdict(6, "input-gradient norms drop at clean, Gaussian and PGD points",
            ok and times["measure"] < 120, "; ".join(parts) + f"; {times['measure']:.0f}s")


def test_criterion_07_similarity_trend(verdict, scenario):
    _, _, metrics, _ = scenario
    ok, parts = True, []
    for m in metrics:
        s = m.similarity
        good = (s.kl["after"] < s.kl["before"] and s.agreement["after"] > s.agreement["before"]
                and s.cosine["after"] > s.cosine["before"])
        ok &= good
        parts.append(f"s{m.seed}: kl {s.kl['before']:.3f}->{s.kl['after']:.3f}, agree "
                     f"{s.agreement['before']:.3f}->{s.agreement['after']:.3f}, cos "
                     f"{s.cosine['before']:.3f}->{s.cosine['after']:.3f}")
    verdict(7, "source/witness similarity rises on held-out data", ok, "; ".join(parts))


def test_criterion_08_hessian_oracle_and_trend(verdict, scenario):
    rng = np.random.default_rng(8)
    worst, n = 0.0, 0
    bound_ok = True
    while n < 8:
        m = random_model(rng)
        if int(np.prod(m.input_shape)) > 16:
            continue
        x = rng.random((1,) + m.input_shape)
        if kink_margin(m, x) < 0.05:
            continue
        y = rng.integers(0, m.num_classes, size=1)
        eig = np.linalg.eigvalsh(dense_hessian(lambda z: ce_value(m, z, y), x))
        if np.max(np.abs(eig)) < 1e-6:
            continue
        dominant = eig[np.argmax(np.abs(eig))]
        est = AN.hessian_lambda_max(m, x, y, max_iters=1000, tol=1e-10).value
        worst = max(worst, abs(est - dominant) / abs(dominant))
        bound_ok &= abs(est) <= np.max(np.abs(eig)) * (1 + 1e-3)
        n += 1
    _, _, metrics, _ = scenario
    o = float(np.mean([m.smoothness.lambda_max["original"] for m in metrics]))
    a = float(np.mean([m.smoothness.lambda_max["aligned"] for m in metrics]))
    verdict(8, "lambda_max oracle and trend", worst <= 1e-3 and bound_ok and a < o,
            f"{n} dense cases, worst rel err {worst:.2e}; mean lambda_max {o:.2f} -> {a:.2f}")


# -- 9 ---------------------------------------------------------------------------


def test_criterion_09_dct(verdict):
    rng = np.random.default_rng(9)
    parseval = 0.0
    for _ in range(100):
        img = rng.random(tuple(rng.integers(2, 20, size=2)))
        c = AN.dct2(img)
        parseval = max(parseval, abs(np.sum(c * c) - np.sum(img * img)) / np.sum(img * img))
    basis = 0.0
    for n in (2, 3):
        for i in range(n):
            for j in range(n):
                e = np.zeros((n, n))
                e[i, j] = 1.0
                basis = max(basis, float(np.max(np.abs(AN.dct2(e) - dct2_direct(e)))))
    d = rng.uniform(-0.03, 0.03, size=(10, 3, 12, 12))
    zero = not np.any(AN.spectrum_diff(d, d).matrix)
    verdict(9, "DCT correctness", parseval <= 1e-9 and basis <= 1e-12 and zero,
            f"Parseval rel err {parseval:.1e}, basis err {basis:.1e}, identical-set diff zero={zero}")


# -- 10 ----------------------------------------------------------------------------


def test_criterion_10_ensembles(verdict, tmp_path):
    rng = np.random.default_rng(10)
    mismatched = []
    for method in METHODS:
        m = _image_model(rng)
        x = rng.random((4,) + m.input_shape)
        y = rng.integers(0, m.num_classes, size=4)
        cfg = AttackConfig.for_method(method, 0.05, 0.01, 4, seed=3)
        if not np.array_equal(attack([m], x, y, cfg).delta, attack(m, x, y, cfg).delta):
            mismatched.append(method)
    sc = SelfAlignScenario()
    train_ds, test = sc.data()
    rep = ensemble_report(sc, 0, train_ds, test)
    paths = rep.write_csvs(tmp_path)
    single, ens = rep.rate("A", "aligned", "B"), rep.rate("A", "aligned-ensemble", "B")
    base = rep.rate("A", BASELINE, "B")
    # the ensemble comparison is reported, not gated
    verdict(10, "ensemble contract", not mismatched and all(p.exists() for p in paths),
            f"single-member mismatches {mismatched or 'none'}; transfer to B: original {base:.1f}%, "
            f"aligned {single:.1f}%, 2-aligned ensemble {ens:.1f}% ({'higher' if ens > single else 'not higher'})")


# -- 11 ----------------------------------------------------------------------------

MANIFEST = {
    "experiment": {"seeds": [0, 1]},
    "data": {"kind": "synth", "n_train": 600, "n_test": 200, "separation": 0.3},
    "models": {"A": {"arch": "mlp-S", "train": {"epochs": 8}},
               "A2": {"arch": "mlp-S", "seed_offset": 100, "train": {"epochs": 8}},
               "B": {"arch": "mlp-S", "seed_offset": 200, "train": {"epochs": 8}}},
    "alignments": {"Aal": {"source": "A", "witnesses": ["A2"], "temperature": 4.0, "lr": 0.3}},
    "attack": {"method": "pgd", "eps": "8/255", "alpha": "2/255", "iters": 5},
    "eval": {"n": 20, "sources": {"A": ["Aal"]}, "targets": ["B"]},
    "analysis": {"kinds": ["smoothness", "similarity", "dct", "surface"], "samples": 10, "lambda_iters": 3,
                 "surface_half_extent": 2},
}


def _csvs(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


def test_criterion_11_reproducibility(verdict, tmp_path):
    first = run_experiment(Manifest.from_dict(MANIFEST, out_dir=tmp_path / "a"))
    a = _csvs(tmp_path / "a")
    again = run_experiment(Manifest.from_dict(MANIFEST, out_dir=tmp_path / "a"))
    run_experiment(Manifest.from_dict(json.loads(json.dumps(MANIFEST)), out_dir=tmp_path / "b"))
    same = a == _csvs(tmp_path / "a") == _csvs(tmp_path / "b")
    elapsed = time.perf_counter() - SUITE_START
    verdict(11, "byte-identical reruns and suite runtime",
            same and not again.ran and len(a) > 0 and elapsed < 1800,
            f"{len(a)} CSV files identical={same}, rerun skipped {len(again.skipped)}/{len(first.ran)} stages, "
            f"acceptance suite {elapsed:.0f}s")
