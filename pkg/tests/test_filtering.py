import numpy as np
import pytest

from cofiner.corpus import Corpus, TaggedSentence, TagSchema
from cofiner.f2c import F2CMatrix
from cofiner.filtering import (
    ConsistencyMask,
    build_mask,
    coarse_argmax,
    filtering_report,
    predict_coarse,
    read_mask,
    report_tsv,
    write_mask,
)
from cofiner.model import ModelConfig, ProbBatch, TokenClassifier, coarse_loss, featurize, forward, marginalize
from helpers import random_model, random_stochastic

FINE = TagSchema(("company", "government", "person"))
COARSE = TagSchema(("ORG", "PER"))
HIER = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def one_hot_model(num_tags, tag_for_bucket, vocab=8):
    """A model whose output is (near) one-hot on ``tag_for_bucket[center bucket]``."""
    cfg = ModelConfig(vocab_size=vocab, embed_dim=vocab, window=0, hidden_dim=vocab,
                      num_tags=num_tags, dropout=0.0)
    m = TokenClassifier(cfg, dtype=np.float64, init="zeros")
    m.params["E"][...] = np.eye(vocab)
    m.params["W1"][...] = np.eye(vocab)
    for b, t in tag_for_bucket.items():
        m.params["W2"][t, b] = 50.0
    return m


class TestPredictCoarse:
    def test_one_hot_propagates(self):
        cfg_vocab = 8
        M = F2CMatrix(HIER, FINE, COARSE)
        sent = TaggedSentence(("Acme",), (0,))
        b = int(featurize(sent, ModelConfig(vocab_size=cfg_vocab, window=0))[0, 0])
        model = one_hot_model(FINE.num_tags, {b: FINE.tag_index("B-company")}, cfg_vocab)
        assert COARSE.tag_name(int(predict_coarse(model, M, sent)[0])) == "B-ORG"

    def test_uniform_identity_ties_to_o(self):
        s = TagSchema(("a", "b"))
        M = F2CMatrix(np.eye(2), s, s)
        model = TokenClassifier(ModelConfig(vocab_size=5, num_tags=5), init="zeros")
        pred = predict_coarse(model, M, TaggedSentence(("x", "y"), (0, 0)))
        assert pred.tolist() == [0, 0]

    def test_matches_brute_force(self, rng):
        for _ in range(30):
            model = random_model(rng, num_tags=7, scale=1.5)
            T = random_stochastic(rng, 3, 2)
            M = F2CMatrix(T, FINE, COARSE)
            feats = rng.integers(0, model.config.vocab_size, (6, model.config.width))
            probs, _ = forward(model, feats)
            expected = []
            for row in probs:
                pc = [sum(float(row[j]) * float(M.tag_level[j, c]) for j in range(7)) for c in range(5)]
                expected.append(int(np.argmax(pc)))
            assert predict_coarse(model, M, feats).tolist() == expected

    def test_shape_mismatch(self):
        M = F2CMatrix(HIER, FINE, COARSE)
        model = TokenClassifier(ModelConfig(vocab_size=5, num_tags=5))
        with pytest.raises(ValueError):
            predict_coarse(model, M, TaggedSentence(("x",), (0,)))


def coarse_fixture():
    sents = [
        TaggedSentence(("Acme", "hired", "Ann"), (1, 0, 3)),
        TaggedSentence(("Ann", "left"), (3, 0)),
        TaggedSentence(("Big", "Co", "x"), (1, 2, 0)),
    ]
    return Corpus(COARSE, tuple(sents), "fixture")


class TestBuildMask:
    def test_perfect_model_keeps_everything(self):
        corpus = coarse_fixture()
        vocab = 64
        cfg = ModelConfig(vocab_size=vocab, window=0)
        # fine tag whose image under HIER equals the coarse gold
        fine_for = {"B-ORG": FINE.tag_index("B-company"), "I-ORG": FINE.tag_index("I-company"),
                    "B-PER": FINE.tag_index("B-person"), "O": 0}
        table = {}
        for s in corpus.sentences:
            for tok, tag in zip(s.tokens, s.tags):
                table[int(featurize([tok], cfg)[0, 0])] = fine_for[COARSE.tag_name(tag)]
        model = one_hot_model(FINE.num_tags, table, vocab)
        mask = build_mask(model, F2CMatrix(HIER, FINE, COARSE), corpus)
        assert all(m.all() for m in mask.masks)
        assert mask.masked_fraction == 0.0

    def test_scrambled_gold_masks_everything(self):
        corpus = coarse_fixture()
        model = TokenClassifier(ModelConfig(vocab_size=16, num_tags=7), init="zeros")  # always predicts O
        scrambled = Corpus(COARSE, tuple(TaggedSentence(s.tokens, tuple(3 for _ in s.tags)) for s in corpus))
        mask = build_mask(model, F2CMatrix(HIER, FINE, COARSE), scrambled)
        assert mask.masked_fraction == 1.0
        p = np.full((3, 7), 1 / 7)
        loss, grad = coarse_loss(ProbBatch.single(p), F2CMatrix(HIER, FINE, COARSE).tag_level,
                                 [3, 3, 3], mask.masks[0])
        assert loss == 0.0 and not grad.any()

    def test_deterministic_and_read_only(self, rng):
        corpus = coarse_fixture()
        model = TokenClassifier(ModelConfig(vocab_size=32, num_tags=7, seed=4))
        M = F2CMatrix(random_stochastic(rng, 3, 2), FINE, COARSE)
        before = model.checksum()
        a = build_mask(model, M, corpus)
        b = build_mask(model, M, corpus)
        assert model.checksum() == before
        assert all((x == y).all() for x, y in zip(a.masks, b.masks))


def test_masked_loss_equals_filtered_subset(rng):
    for _ in range(100):
        n = int(rng.integers(1, 12))
        p = random_stochastic(rng, n, 7)
        T = random_stochastic(rng, 3, 2)
        M = F2CMatrix(T, FINE, COARSE).tag_level
        gold = rng.integers(0, 5, n)
        mask = rng.random(n) < 0.5
        loss, _ = coarse_loss(ProbBatch.single(p), M, gold, mask)
        pc = marginalize(p, M)
        total = 0.0
        for i in np.flatnonzero(mask):
            total += -np.log(pc[i, gold[i]])
        assert loss == total / n


class TestReport:
    def test_all_true_and_all_false(self):
        corpus = coarse_fixture()
        assert all(r.proportion == 0.0 for r in filtering_report(ConsistencyMask.all_true(corpus), corpus))
        assert all(r.proportion == 1.0 for r in filtering_report(ConsistencyMask.all_false(corpus), corpus))

    def test_hand_counted_fixture(self):
        # 10 sentences, each "Acme Corp met Ann": ORG ORG O PER
        sents = tuple(TaggedSentence(("Acme", "Corp", "met", "Ann"), (1, 2, 0, 3)) for _ in range(10))
        corpus = Corpus(COARSE, sents)
        masks = []
        for i in range(10):
            m = np.ones(4, bool)
            if i < 3:
                m[0] = False  # 3 ORG tokens filtered
            if i < 5:
                m[3] = False  # 5 PER tokens filtered
            m[2] = i % 2 == 0  # O tokens are not reported
            masks.append(m)
        rows = {r.entity_type: r for r in filtering_report(ConsistencyMask(masks), corpus)}
        assert (rows["ORG"].tokens, rows["ORG"].filtered) == (20, 3)
        assert rows["ORG"].proportion == 3 / 20
        assert (rows["PER"].tokens, rows["PER"].filtered) == (10, 5)
        assert rows["PER"].proportion == 0.5
        tsv = report_tsv(list(rows.values()), {"ORG": 0.01})
        assert tsv.splitlines()[0] == "coarse_type\ttokens\tfiltered\tproportion\tdelta_f1"
        assert tsv.splitlines()[1] == "ORG\t20\t3\t0.150000\t0.0100"

    def test_misaligned(self):
        corpus = coarse_fixture()
        with pytest.raises(ValueError):
            filtering_report(ConsistencyMask([np.ones(1, bool)]), corpus)


def test_mask_cache_roundtrip(tmp_path):
    mask = ConsistencyMask([np.array([True, False, True]), np.array([False])])
    write_mask(mask, tmp_path / "m.mask", "abc123", "coarse:ner")
    text = (tmp_path / "m.mask").read_text()
    assert text == "# checkpoint=abc123 matrix=coarse:ner\n101\n0\n"
    back, header = read_mask(tmp_path / "m.mask")
    assert "abc123" in header
    assert [m.tolist() for m in back.masks] == [[True, False, True], [False]]


def test_coarse_argmax_ties_lowest_index():
    assert coarse_argmax(np.array([[0.5, 0.5]]), np.eye(2)).tolist() == [0]


@pytest.mark.slow
def test_masked_fraction_tracks_corruption():
    from cofiner.corpus import SyntheticSpec, generate_synthetic
    from cofiner.f2c import hierarchy_matrix
    from cofiner.trainer import TrainPlan, train_fine

    for seed in range(3):
        data = generate_synthetic(SyntheticSpec(fine_sentences=1500, coarse_sentences=1000, rho=0.3), seed)
        plan = TrainPlan(fine=data.fine, seed=seed, fine_epochs=10, vocab_size=2048, log_dev=False)
        model = train_fine(plan, data.fine, None).model
        M = F2CMatrix(hierarchy_matrix(data.hierarchy, data.fine.schema, data.coarse.schema),
                      data.fine.schema, data.coarse.schema)
        mask = build_mask(model, M, data.coarse)
        corrupted = sum(int(c.sum()) for c in data.corrupted) / data.coarse.num_tokens
        assert abs(mask.masked_fraction - corrupted) <= 0.1, (seed, mask.masked_fraction, corrupted)
