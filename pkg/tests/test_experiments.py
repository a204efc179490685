from dataclasses import replace

import pytest

from cofiner.corpus import Corpus, SyntheticSpec, generate_synthetic
from cofiner.experiments import REFERENCE_MARKER, KShotTable, kshot_curve, mean_std, topk_sweep
from cofiner.trainer import TrainPlan

SPEC = SyntheticSpec(coarse_types=("LOC", "PER"), fine_per_coarse=2, markers_per_type=4, filler_vocab=40,
                     fine_sentences=120, coarse_sentences=100)


@pytest.fixture(scope="module")
def plan():
    d = generate_synthetic(SPEC, 0)
    pool = d.fine.subset(range(80), "pool")
    test = d.fine.subset(range(80, 120), "test")
    return TrainPlan(fine=pool, coarse=[Corpus(d.coarse.schema, d.coarse.sentences, "c")], test=test,
                     coarse_epochs=2, fine_epochs=2, joint_epochs=1, vocab_size=64, embed_dim=4,
                     hidden_dim=8, log_dev=False)


def test_mean_std():
    assert mean_std([1.0, 3.0]) == (2.0, pytest.approx(2 ** 0.5))
    assert mean_std([0.5]) == (0.5, 0.0)


class TestKShot:
    def test_shape_and_annotation(self, plan):
        table = kshot_curve(plan, [1, 2], [0, 1])
        lines = table.tsv().splitlines()
        assert lines[0].split("\t") == ["method", "1-shot", "2-shot"]
        assert [l.split("\t")[0] for l in lines[1:]] == ["cofiner", "fine_only"]
        assert all(len(l.split("\t")) == 3 for l in lines)
        assert all(len(table.f1[m, k]) == 2 for m in table.methods for k in table.ks)

    def test_reference_rows_carry_marker(self):
        t = KShotTable([10, 100], ["cofiner"], [0], {("cofiner", 10): [0.3], ("cofiner", 100): [0.4]})
        ref = [l for l in t.tsv().splitlines() if l.startswith("#")]
        assert len(ref) == 1 and REFERENCE_MARKER in ref[0]
        assert ref[0].split("\t")[1:] == ["44.951", "57.178"]
        assert "30.000±0.000" in t.tsv()
        assert REFERENCE_MARKER not in t.tsv(annotate=False)

    def test_validation(self, plan):
        with pytest.raises(ValueError):
            kshot_curve(replace(plan, test=None), [1], [0])
        with pytest.raises(ValueError):
            kshot_curve(plan, [1], [0], methods=["other"])


class TestTopK:
    def test_columns_and_determinism(self, plan):
        a = topk_sweep(plan, [1, "all"], [0, 1])
        b = topk_sweep(plan, [1, "all"], [0, 1])
        assert a.f1 == b.f1
        rows = a.tsv().splitlines()
        assert rows[0] == "k\tseed\ttest_f1"
        assert sorted({r.split("\t")[0] for r in rows[1:]}) == ["1", "all"]
        assert len(a.summary_tsv().splitlines()) == 3

    def test_parallel_matches_serial(self, plan):
        assert topk_sweep(plan, [1, 2], [0, 1], jobs=2).f1 == topk_sweep(plan, [1, 2], [0, 1]).f1


@pytest.mark.slow
def test_kshot_curve_rises_with_k():
    from scipy.stats import spearmanr

    from cofiner.benchmark import STANDARD_SPEC, benchmark_plan, make_benchmark

    bench = make_benchmark(0, spec=replace(STANDARD_SPEC, coarse_sentences=1000))
    template = benchmark_plan(bench, 0, fine=bench.pool, coarse_epochs=5, joint_epochs=10)
    ks = [1, 3, 6, 12]
    table = kshot_curve(template, ks, [0, 1, 2], methods=["cofiner"])
    rho = spearmanr(ks, table.mean("cofiner")).statistic
    assert rho > 0, table.tsv()
