"""The standard synthetic benchmark: 4 coarse / 12 fine types, a ~50-sentence
K-shot fine training set, and a 5000-sentence coarse corpus."""

from __future__ import annotations

from dataclasses import dataclass, replace

from .corpus import Corpus, KShotResult, SyntheticSpec, generate_synthetic, run_kshot_sampler
from .trainer import TrainPlan

STANDARD_SPEC = SyntheticSpec()
POOL_TRAIN = 700
DEV_SIZE = 200
TEST_SIZE = 600
STANDARD_K = 6


@dataclass
class Benchmark:
    train: Corpus
    dev: Corpus
    test: Corpus
    coarse: Corpus
    hierarchy: dict[str, str]
    sample: KShotResult
    pool: Corpus


def make_benchmark(seed: int, rho: float = 0.0, k: int = STANDARD_K,
                   spec: SyntheticSpec = STANDARD_SPEC) -> Benchmark:
    spec = replace(spec, rho=rho, fine_sentences=POOL_TRAIN + DEV_SIZE + TEST_SIZE)
    data = generate_synthetic(spec, seed)
    fine = data.fine
    pool = fine.subset(range(POOL_TRAIN), "fine-pool")
    dev = fine.subset(range(POOL_TRAIN, POOL_TRAIN + DEV_SIZE), "fine-dev")
    test = fine.subset(range(POOL_TRAIN + DEV_SIZE, len(fine)), "fine-test")
    sample = run_kshot_sampler(pool, k, seed)
    coarse = Corpus(data.coarse.schema, data.coarse.sentences, "coarse")
    return Benchmark(sample.corpus, dev, test, coarse, data.hierarchy, sample, pool)


def benchmark_plan(bench: Benchmark, seed: int, **overrides) -> TrainPlan:
    plan = TrainPlan(fine=bench.train, coarse=[bench.coarse], dev=bench.dev, test=bench.test,
                     seed=seed, vocab_size=2048, log_dev=False)
    return replace(plan, **overrides)
