"""The bundled desk-scale self-alignment scenario.

Source A, witness A' and target B share an architecture and differ only in
seed. A is aligned to A' on A's own training data, then PGD examples crafted on
A and on the aligned model are transferred to B.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import analysis as AN
from .alignment import AlignmentConfig, align
from .attacks import AttackConfig, attack
from .data import Dataset, synth_split
from .harness import BASELINE, Run, select_eval_samples, transfer_error, transfer_matrix
from .models import TrainConfig, build_model, train
from .tensor import Model

SEED_STRIDE = 1000


@dataclass(frozen=True)
class SelfAlignScenario:
    arch: str = "cnn-S"
    task: str = "gauss-blobs"
    n_train: int = 2000
    n_test: int = 1000
    noise: float = 0.1
    separation: float = 0.2
    data_seed: int = 0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, base_lr=0.05))
    align_lr: float = 0.3
    align_epochs: int = 5
    temperature: float = 4.0
    distance: str = "kl"
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=8 / 255, alpha=2 / 255, iterations=20))
    eval_pool: int = 300
    eval_samples: int = 200

    def data(self) -> tuple[Dataset, Dataset]:
        return synth_split(self.task, self.n_train, self.n_test, 10, self.noise, self.data_seed,
                           separation=self.separation)

    def train_model(self, init_seed: int, data: Dataset, arch: str | None = None) -> Model:
        return train(build_model(arch or self.arch, init_seed), data, replace(self.train, seed=init_seed))[0]

    def align_cfg(self, witnesses, seed: int) -> AlignmentConfig:
        return AlignmentConfig(witnesses=tuple(witnesses), distance=self.distance, temperature=self.temperature,
                               base_lr=self.align_lr, epochs=self.align_epochs, seed=seed)


@dataclass
class SeedModels:
    seed: int
    source: Model
    witness: Model
    target: Model
    aligned: Model
    history: list


def build_seed(sc: SelfAlignScenario, seed: int, train_ds: Dataset) -> SeedModels:
    base = SEED_STRIDE * seed
    a = sc.train_model(base, train_ds)
    w = sc.train_model(base + 100, train_ds)
    b = sc.train_model(base + 200, train_ds)
    res = align(a, sc.align_cfg([w], seed), train_ds)
    return SeedModels(seed, a, w, b, res.model, res.history)


@dataclass
class SeedMetrics:
    seed: int
    error_before: float
    error_after: float
    samples: int
    smoothness: AN.SmoothnessReport
    similarity: AN.SimilarityReport


def measure_seed(sc: SelfAlignScenario, m: SeedModels, test: Dataset, lambda_iters: int = 30) -> SeedMetrics:
    pool = test.subset(np.arange(min(sc.eval_pool, len(test))))
    es = select_eval_samples(m.source, m.target, pool, sc.eval_samples, sc.attack)
    sub = pool.by_ids(es.ids)
    cfg = replace(sc.attack, seed=m.seed)
    errs = [transfer_error(m.target, sub.inputs + attack(src, sub.inputs, sub.labels, cfg).delta, sub.labels)
            for src in (m.source, m.aligned)]
    smooth = AN.grad_norm_report({"original": m.source, "aligned": m.aligned}, sub.inputs, sub.labels, 0.01, cfg,
                                 seed=m.seed, lambda_iters=lambda_iters)
    sim = AN.similarity_report(m.source, m.witness, test.inputs, test.labels, m.aligned)
    return SeedMetrics(m.seed, errs[0], errs[1], len(sub), smooth, sim)


def run_scenario(sc: SelfAlignScenario | None = None, seeds=(0, 1, 2), lambda_iters: int = 30):
    """Return ``(models per seed, metrics per seed)``."""
    sc = sc or SelfAlignScenario()
    train_ds, test = sc.data()
    models = [build_seed(sc, s, train_ds) for s in seeds]
    return models, [measure_seed(sc, m, test, lambda_iters) for m in models]


def ensemble_report(sc: SelfAlignScenario, seed: int, train_ds: Dataset, test: Dataset):
    """Transfer matrix with one aligned source and a two-aligned-model logit ensemble."""
    base = SEED_STRIDE * seed
    a1 = sc.train_model(base, train_ds)
    a2 = sc.train_model(base + 300, train_ds)
    w = sc.train_model(base + 100, train_ds)
    b = sc.train_model(base + 200, train_ds)
    al1 = align(a1, sc.align_cfg([w], seed), train_ds).model
    al2 = align(a2, sc.align_cfg([w], seed), train_ds).model
    pool = test.subset(np.arange(min(sc.eval_pool, len(test))))
    run = Run(seed, {"A": {BASELINE: a1, "aligned": al1, "aligned-ensemble": [al1, al2]}}, {"B": b})
    return transfer_matrix([run], pool, sc.attack, sc.eval_samples)
