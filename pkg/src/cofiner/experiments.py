"""Experiment suites: K-shot curves and top-k sweeps over seeded pipeline runs."""

from __future__ import annotations

import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

from .corpus import run_kshot_sampler
from .trainer import TrainPlan, run_pipeline

# Published numbers for orientation only. They come from a large pretrained
# encoder on real corpora and cannot be matched by the desk-scale encoder here.
REFERENCE_MARKER = "NOT-REPRODUCIBLE-AT-DESK-SCALE"
REFERENCE_KS = (10, 20, 40, 80, 100)
REFERENCE_F1 = {
    "cofiner": (44.951, 51.142, 56.409, 56.847, 57.178),
    "fine_only": (29.137, 41.425, 51.137, 55.057, 54.172),  # same large encoder without coarse data
}


def _map(fn: Callable, tasks: Sequence, jobs: int) -> list:
    """Ordered map; ``jobs > 1`` fans out to worker processes."""
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    sd = statistics.stdev(values) if len(values) > 1 else 0.0
    return statistics.fmean(values), sd


# ---------------------------------------------------------------------------
# K-shot curve


@dataclass
class KShotTable:
    ks: list[int]
    methods: list[str]
    seeds: list[int]
    f1: dict[tuple[str, int], list[float]] = field(default_factory=dict)  # (method, k) -> per-seed
    exhausted: dict[tuple[int, int], list[str]] = field(default_factory=dict)  # (k, seed) -> types

    def mean(self, method: str) -> list[float]:
        return [mean_std(self.f1[method, k])[0] for k in self.ks]

    def tsv(self, annotate: bool = True) -> str:
        """Rows are methods, columns are K-shot settings; cells are ``mean±stdev`` F1 x 100."""
        lines = ["method\t" + "\t".join(f"{k}-shot" for k in self.ks)]
        for m in self.methods:
            cells = []
            for k in self.ks:
                mu, sd = mean_std(self.f1[m, k])
                cells.append(f"{100 * mu:.3f}±{100 * sd:.3f}")
            lines.append(m + "\t" + "\t".join(cells))
        if annotate and set(self.ks) & set(REFERENCE_KS):
            for m in self.methods:
                if m in REFERENCE_F1:
                    ref = dict(zip(REFERENCE_KS, REFERENCE_F1[m]))
                    vals = "\t".join(f"{ref[k]:.3f}" if k in ref else "-" for k in self.ks)
                    lines.append(f"# reference {m} [{REFERENCE_MARKER}]\t{vals}")
        return "\n".join(lines) + "\n"


def _kshot_seed(task) -> dict:
    template, ks, seed, methods = task
    cache: dict = {}
    out = {}
    for k in ks:
        sample = run_kshot_sampler(template.fine, k, seed)
        plan = replace(template, fine=sample.corpus, seed=seed)
        for m in methods:
            variant = replace(plan, no_coarse=True) if m == "fine_only" else plan
            art = run_pipeline(variant, cache)
            out[m, k] = art.test_report.f1
        out["exhausted", k] = list(sample.exhausted)
    return out


def kshot_curve(template: TrainPlan, ks: Sequence[int], seeds: Sequence[int],
                methods: Sequence[str] = ("cofiner", "fine_only"), jobs: int = 1) -> KShotTable:
    """For each K and seed, sample ``template.fine`` K~(K+5), run the pipeline, score on test.

    ``template.fine`` is the pool the shots are drawn from. Seeds run in
    parallel when ``jobs > 1``; within a seed the coarse models are shared
    across K and the step-1 model is shared between methods.
    """
    if template.test is None:
        raise ValueError("kshot_curve needs a test corpus")
    for m in methods:
        if m not in ("cofiner", "fine_only"):
            raise ValueError(f"unknown method {m!r}")
    results = _map(_kshot_seed, [(template, list(ks), s, list(methods)) for s in seeds], jobs)
    table = KShotTable(list(ks), list(methods), list(seeds))
    for seed, res in zip(seeds, results):
        for k in ks:
            for m in methods:
                table.f1.setdefault((m, k), []).append(res[m, k])
            table.exhausted[k, seed] = res["exhausted", k]
    return table


# ---------------------------------------------------------------------------
# top-k sweep


@dataclass
class SweepTable:
    k_values: list
    seeds: list[int]
    f1: dict[tuple[object, int], float] = field(default_factory=dict)  # (k, seed) -> test F1

    def tsv(self) -> str:
        lines = ["k\tseed\ttest_f1"]
        for k in self.k_values:
            for s in self.seeds:
                lines.append(f"{k}\t{s}\t{self.f1[k, s]:.6f}")
        return "\n".join(lines) + "\n"

    def summary_tsv(self) -> str:
        lines = ["k\tmean_f1\tstdev_f1"]
        for k in self.k_values:
            mu, sd = mean_std([self.f1[k, s] for s in self.seeds])
            lines.append(f"{k}\t{mu:.6f}\t{sd:.6f}")
        return "\n".join(lines) + "\n"


def _sweep_seed(task) -> dict:
    template, k_values, seed, plan_for_seed = task
    plan = plan_for_seed(seed) if plan_for_seed else replace(template, seed=seed)
    cache: dict = {}
    return {k: run_pipeline(replace(plan, topk=k), cache).test_report.f1 for k in k_values}


def topk_sweep(template: TrainPlan, k_values: Sequence, seeds: Sequence[int], jobs: int = 1,
               plan_for_seed: Callable[[int], TrainPlan] | None = None) -> SweepTable:
    """Vary only the top-k of the F2C matrix; step-1 and coarse models are shared per seed.

    ``plan_for_seed`` (a picklable callable when ``jobs > 1``) builds a
    per-seed plan, e.g. on freshly generated data; otherwise only the seed
    of ``template`` changes.
    """
    if (template is None and plan_for_seed is None) or (template is not None and template.test is None):
        raise ValueError("topk_sweep needs a plan with a test corpus")
    results = _map(_sweep_seed, [(template, list(k_values), s, plan_for_seed) for s in seeds], jobs)
    table = SweepTable(list(k_values), list(seeds))
    for seed, res in zip(seeds, results):
        for k in k_values:
            table.f1[k, seed] = res[k]
    return table
