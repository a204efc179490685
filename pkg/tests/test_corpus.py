import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cofiner.corpus import (
    KSHOT_PRESETS,
    ConllParseError,
    Corpus,
    SchemaError,
    Span,
    SyntheticSpec,
    TaggedSentence,
    TagSchema,
    corpus_type_counts,
    extract_spans,
    format_conll,
    generate_synthetic,
    read_conll,
    repair_bio,
    run_kshot_sampler,
    sample_kshot,
    spans_to_tags,
    write_conll,
)

PER = TagSchema(("PER",))


def write(tmp_path, text, name="c.conll"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestTagSchema:
    def test_alphabet(self):
        s = TagSchema(("ORG", "PER"))
        assert s.tag_alphabet == ("O", "B-ORG", "I-ORG", "B-PER", "I-PER")
        assert s.num_tags == 2 * 2 + 1
        assert s.tag_index("I-PER") == 4
        assert s.type_of(3) == 1 and s.type_of(0) == -1

    @pytest.mark.parametrize("bad", [("O",), ("A-B",), ("X", "X"), ("",)])
    def test_invalid_names(self, bad):
        with pytest.raises(SchemaError):
            TagSchema(bad)

    def test_induced_order_is_lexicographic(self):
        s = TagSchema.from_tags(["B-ZED", "O", "I-ALPHA", "B-MID"])
        assert s.entity_types == ("ALPHA", "MID", "ZED")

    def test_explicit_order_preserved(self):
        assert TagSchema(("b", "a")).entity_types == ("b", "a")


class TestReadConll:
    def test_basic(self, tmp_path):
        c = read_conll(write(tmp_path, "EU\tB-ORG\nrejects\tO\n\n"))
        assert len(c) == 1
        s = c.sentences[0]
        assert s.tokens == ("EU", "rejects")
        assert [c.schema.tag_name(t) for t in s.tags] == ["B-ORG", "O"]

    def test_repair_at_sentence_start(self, tmp_path):
        c = read_conll(write(tmp_path, "John\tI-PER\nsmiled\tO\n\n"))
        assert c.repairs == 1
        assert c.schema.tag_name(c.sentences[0].tags[0]) == "B-PER"

    def test_empty_file(self, tmp_path):
        c = read_conll(write(tmp_path, ""))
        assert len(c) == 0

    def test_space_separator_and_docstart(self, tmp_path):
        c = read_conll(write(tmp_path, "-DOCSTART- O\n\nA B-X\nb I-X\n\nc O\n"))
        assert c.docstarts == 1
        assert len(c) == 2
        assert c.sentences[0].tags == (1, 2)

    def test_malformed_line_reports_line_number(self, tmp_path):
        with pytest.raises(ConllParseError) as exc:
            read_conll(write(tmp_path, "a\tO\nb\tO\textra\n"))
        assert exc.value.lineno == 2

    def test_unknown_tag_for_schema(self, tmp_path):
        with pytest.raises(SchemaError):
            read_conll(write(tmp_path, "a\tB-LOC\n\n"), schema=PER)


class TestWriteConll:
    def test_trailing_blank_line(self, tmp_path):
        c = Corpus(PER, (TaggedSentence(("Ann", "ran"), (1, 0)),))
        p = tmp_path / "o.conll"
        write_conll(c, p)
        assert p.read_text() == "Ann\tB-PER\nran\tO\n\n"

    def test_empty_corpus_empty_file(self, tmp_path):
        p = tmp_path / "o.conll"
        write_conll(Corpus(PER, ()), p)
        assert p.read_bytes() == b""

    def test_second_write_byte_identical(self, tmp_path):
        c = Corpus(PER, (TaggedSentence(("a", "b", "c"), (1, 2, 0)), TaggedSentence(("d",), (1,))))
        write_conll(c, tmp_path / "1.conll")
        again = read_conll(tmp_path / "1.conll", schema=PER)
        write_conll(again, tmp_path / "2.conll")
        assert (tmp_path / "1.conll").read_bytes() == (tmp_path / "2.conll").read_bytes()

    def test_io_error_names_path(self, tmp_path):
        with pytest.raises(OSError, match="nope"):
            write_conll(Corpus(PER, ()), tmp_path / "nope" / "x.conll")


class TestSpans:
    def test_examples(self):
        assert extract_spans([1, 2, 0]) == [Span(0, 0, 2)]
        assert extract_spans([1, 1]) == [Span(0, 0, 1), Span(0, 1, 2)]
        assert extract_spans([0, 0, 0]) == []

    def test_type_switch_closes_span(self):
        # B-a I-a I-b (after repair: B-b)
        assert extract_spans([1, 2, 3]) == [Span(0, 0, 2), Span(1, 2, 3)]

    def test_repair(self):
        assert repair_bio([2, 0, 4, 2]) == ([1, 0, 3, 1], 3)
        assert repair_bio([1, 2, 2, 0]) == ([1, 2, 2, 0], 0)


def bio_sentence(n_types):
    @st.composite
    def build(draw):
        n = draw(st.integers(1, 12))
        tags = draw(st.lists(st.integers(0, 2 * n_types), min_size=n, max_size=n))
        tags, _ = repair_bio(tags)
        toks = draw(st.lists(st.text("abcXYZ-.'", min_size=1, max_size=5), min_size=n, max_size=n))
        return TaggedSentence(tuple(toks), tuple(tags))
    return build()


@settings(max_examples=60, deadline=None)
@given(st.lists(bio_sentence(3), max_size=6))
def test_conll_roundtrip_property(tmp_path_factory, sents):
    schema = TagSchema(("a", "b", "c"))
    c = Corpus(schema, tuple(sents))
    p = tmp_path_factory.mktemp("rt") / "x.conll"
    write_conll(c, p)
    back = read_conll(p, schema=schema)
    assert back == c
    assert format_conll(back) == p.read_text(encoding="utf-8")


@given(bio_sentence(3))
def test_spans_tags_roundtrip(sent):
    spans = extract_spans(sent)
    assert spans_to_tags(spans, len(sent)) == list(sent.tags)
    assert spans == sorted(spans, key=lambda s: s.start)


def single_type_corpus(n, schema=PER):
    return Corpus(schema, tuple(TaggedSentence((f"x{i}", "y"), (1, 0)) for i in range(n)), "one")


class TestKShot:
    def test_degenerate_single_type(self):
        # enumeration: each draw adds exactly one PER and nothing else, so the
        # sampler stops after exactly K accepted sentences
        res = run_kshot_sampler(single_type_corpus(20), 3, seed=1)
        assert len(res.corpus) == 3
        assert res.counts == {"PER": 3}
        assert res.normal

    def test_rejects_overfull_sentence(self):
        schema = TagSchema(("A", "B"))
        big = TaggedSentence(tuple("abcdefgh"), (1, 0, 1, 0, 1, 0, 1, 3))  # 4 A + 1 B
        small = [TaggedSentence(("q", "r"), (1, 3)) for _ in range(10)]
        c = Corpus(schema, (big, *small))
        res = run_kshot_sampler(c, 1, seed=0)
        assert all(v <= 6 for v in res.counts.values())

    def test_errors(self):
        with pytest.raises(ValueError):
            sample_kshot(single_type_corpus(3), 0, 0)
        empty = Corpus(PER, (TaggedSentence(("a",), (0,)),))
        with pytest.raises(ValueError):
            sample_kshot(empty, 1, 0)

    def test_exhaustion_is_a_warning(self, caplog):
        res = run_kshot_sampler(single_type_corpus(2), 5, seed=0)
        assert not res.normal
        assert res.exhausted == ["PER"]
        assert "ran out" in caplog.text

    def test_presets(self):
        assert KSHOT_PRESETS == (10, 20, 40, 80, 100)

    @pytest.mark.parametrize("k", [1, 3, 10])
    def test_bounds_subset_determinism(self, k):
        data = generate_synthetic(SyntheticSpec(fine_sentences=300, coarse_sentences=1), seed=k)
        a = run_kshot_sampler(data.fine, k, seed=5)
        b = run_kshot_sampler(data.fine, k, seed=5)
        assert a.indices == b.indices
        assert all(v <= k + 5 for v in a.counts.values())
        if a.normal:
            assert all(v >= k for v in a.counts.values())
        ids = {id(s) for s in data.fine.sentences}
        assert all(id(s) in ids for s in a.corpus.sentences)
        assert dict(corpus_type_counts(a.corpus)) == {t: v for t, v in a.counts.items() if v}


class TestSynthetic:
    def test_rho_zero_parallel_consistency(self):
        d = generate_synthetic(SyntheticSpec(fine_sentences=50, coarse_sentences=200), 3)
        fs, cs = d.coarse_latent.schema, d.coarse.schema
        for lat, co in zip(d.coarse_latent.sentences, d.coarse.sentences):
            assert lat.tokens == co.tokens
            for ft, ct in zip(lat.tags, co.tags):
                if ft == 0:
                    assert ct == 0
                else:
                    assert cs.tag_name(ct)[0] == fs.tag_name(ft)[0]
                    assert cs.entity_types[cs.type_of(ct)] == d.hierarchy[fs.entity_types[fs.type_of(ft)]]

    def test_corruption_rate(self):
        d = generate_synthetic(SyntheticSpec(fine_sentences=10, coarse_sentences=4000, rho=0.3), 11)
        fs, cs = d.coarse_latent.schema, d.coarse.schema
        ent = bad = 0
        for lat, co in zip(d.coarse_latent.sentences, d.coarse.sentences):
            for ft, ct in zip(lat.tags, co.tags):
                if ft == 0:
                    continue
                ent += 1
                parent = d.hierarchy[fs.entity_types[fs.type_of(ft)]]
                bad += ct == 0 or cs.entity_types[cs.type_of(ct)] != parent
        assert ent >= 10_000
        assert abs(bad / ent - 0.3) <= 0.02
        assert bad == sum(int(m.sum()) for m in d.corrupted)

    def test_type_counts(self):
        d = generate_synthetic(SyntheticSpec(coarse_types=("A", "B"), fine_per_coarse=2,
                                             fine_sentences=5, coarse_sentences=5), 0)
        assert d.fine.schema.num_types == 4 > d.coarse.schema.num_types == 2
        fine, coarse, hierarchy = d
        assert set(hierarchy.values()) == {"A", "B"}

    def test_deterministic(self):
        spec = SyntheticSpec(fine_sentences=20, coarse_sentences=20, rho=0.2)
        a, b = generate_synthetic(spec, 9), generate_synthetic(spec, 9)
        assert a.fine == b.fine and a.coarse == b.coarse

    @pytest.mark.parametrize("kw", [{"coarse_types": ()}, {"rho": 1.0}, {"fine_per_coarse": 1}])
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            generate_synthetic(SyntheticSpec(**kw), 0)

    def test_sentences_bio_valid(self):
        d = generate_synthetic(SyntheticSpec(fine_sentences=100, coarse_sentences=100, rho=0.5), 2)
        for s in (*d.fine.sentences, *d.coarse.sentences):
            assert repair_bio(s.tags)[1] == 0
            assert any(t for t in s.tags) or len(s) >= 1
