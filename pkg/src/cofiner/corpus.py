"""Corpora in BIO column format: schemas, I/O, spans, K-shot sampling, synthetic data."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

OUTSIDE = "O"
DOCSTART = "-DOCSTART-"
KSHOT_PRESETS = (10, 20, 40, 80, 100)


class ConllParseError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class TagSchema:
    """Entity-type inventory and its BIO tag alphabet.

    Tag ``0`` is ``O``; entity type ``i`` owns ``B-`` at ``1 + 2i`` and ``I-``
    at ``2 + 2i``.
    """

    entity_types: tuple[str, ...]

    def __post_init__(self):
        types = tuple(self.entity_types)
        object.__setattr__(self, "entity_types", types)
        if len(set(types)) != len(types):
            raise SchemaError(f"duplicate entity types in {types}")
        for t in types:
            if not t or "-" in t or t == OUTSIDE or any(c.isspace() for c in t):
                raise SchemaError(f"invalid entity type name {t!r}")
        tags = [OUTSIDE]
        for t in types:
            tags += [f"B-{t}", f"I-{t}"]
        object.__setattr__(self, "tag_alphabet", tuple(tags))
        object.__setattr__(self, "_tag_index", {t: i for i, t in enumerate(tags)})
        object.__setattr__(self, "_type_index", {t: i for i, t in enumerate(types)})

    @classmethod
    def from_tags(cls, tags: Iterable[str]) -> "TagSchema":
        """Induce a schema (types sorted lexicographically) from tag strings."""
        types = set()
        for tag in tags:
            if tag != OUTSIDE:
                types.add(split_tag(tag)[1])
        return cls(tuple(sorted(types)))

    @property
    def num_types(self) -> int:
        return len(self.entity_types)

    @property
    def num_tags(self) -> int:
        return len(self.tag_alphabet)

    def tag_index(self, tag: str) -> int:
        try:
            return self._tag_index[tag]
        except KeyError:
            raise SchemaError(f"tag {tag!r} not in schema {self.entity_types}") from None

    def type_index(self, name: str) -> int:
        try:
            return self._type_index[name]
        except KeyError:
            raise SchemaError(f"entity type {name!r} not in schema") from None

    def tag_name(self, index: int) -> str:
        return self.tag_alphabet[index]

    def b_tag(self, type_idx: int) -> int:
        return 1 + 2 * type_idx

    def i_tag(self, type_idx: int) -> int:
        return 2 + 2 * type_idx

    def type_of(self, tag_idx: int) -> int:
        """Entity-type index of a tag, or -1 for ``O``."""
        return -1 if tag_idx == 0 else (tag_idx - 1) // 2

    def is_begin(self, tag_idx: int) -> bool:
        return tag_idx > 0 and tag_idx % 2 == 1


def split_tag(tag: str) -> tuple[str, str]:
    if tag == OUTSIDE:
        return OUTSIDE, ""
    prefix, sep, name = tag.partition("-")
    if not sep or prefix not in ("B", "I") or not name:
        raise SchemaError(f"malformed BIO tag {tag!r}")
    return prefix, name


@dataclass(frozen=True, eq=False)
class TaggedSentence:
    tokens: tuple[str, ...]
    tags: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "tags", tuple(int(t) for t in self.tags))
        if not self.tokens or len(self.tokens) != len(self.tags):
            raise ValueError("sentence needs >= 1 token and one tag per token")
        if any(not tok for tok in self.tokens):
            raise ValueError("empty token")

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        if not isinstance(other, TaggedSentence):
            return NotImplemented
        return self.tokens == other.tokens and self.tags == other.tags

    def __hash__(self):
        return hash((self.tokens, self.tags))


@dataclass(frozen=True)
class Corpus:
    schema: TagSchema
    sentences: tuple[TaggedSentence, ...]
    name: str = field(default="", compare=False)
    # load-time bookkeeping, not part of equality
    repairs: int = field(default=0, compare=False)
    docstarts: int = field(default=0, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))
        n = self.schema.num_tags
        for s in self.sentences:
            if any(t < 0 or t >= n for t in s.tags):
                raise SchemaError(f"tag index out of range for schema in corpus {self.name!r}")

    def __len__(self):
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    @property
    def num_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)

    def subset(self, indices: Sequence[int], name: str | None = None) -> "Corpus":
        return Corpus(self.schema, tuple(self.sentences[i] for i in indices),
                      self.name if name is None else name)


@dataclass(frozen=True)
class Span:
    entity_type: int
    start: int
    end: int

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid span bounds [{self.start}, {self.end})")


def repair_bio(tags: Sequence[int]) -> tuple[list[int], int]:
    """Rewrite every ``I-t`` not continuing a ``t`` entity as ``B-t``.

    Returns the repaired tag list and the number of repairs.
    """
    out = list(tags)
    fixes = 0
    prev_type = -1
    for i, t in enumerate(out):
        if t == 0:
            prev_type = -1
            continue
        typ = (t - 1) // 2
        if t % 2 == 0 and typ != prev_type:
            out[i] = t - 1
            fixes += 1
        prev_type = typ
    return out, fixes


def is_bio_valid(tags: Sequence[int]) -> bool:
    return repair_bio(tags)[1] == 0


def extract_spans(sentence: TaggedSentence | Sequence[int]) -> list[Span]:
    tags = sentence.tags if isinstance(sentence, TaggedSentence) else sentence
    spans = []
    start = typ = -1
    for i, t in enumerate(tags):
        t = int(t)
        cur = -1 if t == 0 else (t - 1) // 2
        if start >= 0 and (t == 0 or t % 2 == 1 or cur != typ):
            spans.append(Span(typ, start, i))
            start = -1
        if t != 0 and start < 0:
            start, typ = i, cur
    if start >= 0:
        spans.append(Span(typ, start, len(tags)))
    return spans


def spans_to_tags(spans: Iterable[Span], length: int) -> list[int]:
    tags = [0] * length
    for sp in spans:
        if sp.end > length:
            raise ValueError(f"span {sp} exceeds sentence length {length}")
        tags[sp.start] = 1 + 2 * sp.entity_type
        for i in range(sp.start + 1, sp.end):
            tags[i] = 2 + 2 * sp.entity_type
    return tags


# ---------------------------------------------------------------------------
# CoNLL column files


def read_conll(path, schema: TagSchema | None = None, name: str | None = None) -> Corpus:
    """Read a ``token<TAB>tag`` column file.

    Lines may also use a single space as separator. ``-DOCSTART-`` lines are
    skipped and counted. Invalid ``I-`` tags are repaired to ``B-``; the
    count is kept on ``Corpus.repairs``.
    """
    path = Path(path)
    raw: list[tuple[list[str], list[str]]] = []
    toks: list[str] = []
    tags: list[str] = []
    docstarts = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                if toks:
                    raw.append((toks, tags))
                    toks, tags = [], []
                continue
            cols = line.split("\t") if "\t" in line else line.split(" ")
            if len(cols) != 2 or not cols[0] or not cols[1]:
                raise ConllParseError(path, lineno, f"expected 2 columns, got {line!r}")
            if cols[0] == DOCSTART:
                docstarts += 1
                continue
            try:
                split_tag(cols[1])
            except SchemaError as exc:
                raise ConllParseError(path, lineno, str(exc)) from None
            toks.append(cols[0])
            tags.append(cols[1])
    if toks:
        raw.append((toks, tags))

    if schema is None:
        schema = TagSchema.from_tags(t for _, ts in raw for t in ts)
    sentences = []
    repairs = 0
    for toks, ts in raw:
        idx, fixes = repair_bio([schema.tag_index(t) for t in ts])
        repairs += fixes
        sentences.append(TaggedSentence(tuple(toks), tuple(idx)))
    if repairs:
        log.warning("%s: repaired %d invalid I- tags", path, repairs)
    return Corpus(schema, tuple(sentences), name if name is not None else path.stem,
                  repairs=repairs, docstarts=docstarts)


def format_conll(corpus: Corpus) -> str:
    alphabet = corpus.schema.tag_alphabet
    parts = []
    for s in corpus.sentences:
        parts.append("".join(f"{tok}\t{alphabet[t]}\n" for tok, t in zip(s.tokens, s.tags)))
        parts.append("\n")
    return "".join(parts)


def write_conll(corpus: Corpus, path) -> None:
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(format_conll(corpus))
    except OSError as exc:
        raise OSError(f"cannot write corpus to {path}: {exc}") from exc


def write_schema(schema: TagSchema, path) -> None:
    Path(path).write_text("".join(t + "\n" for t in schema.entity_types), encoding="utf-8")


def read_schema(path) -> TagSchema:
    return TagSchema(tuple(l for l in Path(path).read_text(encoding="utf-8").splitlines() if l))


# ---------------------------------------------------------------------------
# K~(K+5) sampling


@dataclass
class KShotResult:
    corpus: Corpus
    indices: list[int]
    counts: dict[str, int]
    exhausted: list[str]
    k: int

    @property
    def normal(self) -> bool:
        """True when every present entity type reached ``k`` occurrences."""
        return not self.exhausted


def type_counts(sentence: TaggedSentence, num_types: int) -> np.ndarray:
    c = np.zeros(num_types, dtype=np.int64)
    for sp in extract_spans(sentence):
        c[sp.entity_type] += 1
    return c


def run_kshot_sampler(corpus: Corpus, k: int, seed: int) -> KShotResult:
    """Greedy K~(K+5) sampler.

    Types are visited from rarest to most frequent. For each type, sentences
    containing it are drawn uniformly without replacement until the type has
    ``k`` occurrences; a draw is rejected when it would push any type above
    ``k + 5``. Counts accumulate over every entity in accepted sentences.
    """
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    n_types = corpus.schema.num_types
    per_sent = [type_counts(s, n_types) for s in corpus.sentences]
    freq = np.sum(per_sent, axis=0) if per_sent else np.zeros(n_types, dtype=np.int64)
    present = [t for t in range(n_types) if freq[t] > 0]
    if not present:
        raise ValueError("corpus contains no entities")
    order = sorted(present, key=lambda t: (freq[t], t))

    rng = np.random.default_rng(seed)
    count = np.zeros(n_types, dtype=np.int64)
    chosen: set[int] = set()
    exhausted = []
    cap = k + 5
    for t in order:
        if all(count[u] >= k for u in present):
            break
        if count[t] >= k:
            continue
        cands = [i for i, c in enumerate(per_sent) if c[t] > 0 and i not in chosen]
        for j in rng.permutation(len(cands)):
            i = cands[j]
            if np.any(count + per_sent[i] > cap):
                continue
            chosen.add(i)
            count += per_sent[i]
            if count[t] >= k:
                break
        if count[t] < k:
            exhausted.append(corpus.schema.entity_types[t])
    if exhausted:
        log.warning("K-shot sampler ran out of candidates for %s (K=%d)", exhausted, k)
    indices = sorted(chosen)
    counts = {corpus.schema.entity_types[t]: int(count[t]) for t in present}
    return KShotResult(corpus.subset(indices, f"{corpus.name}.{k}shot"), indices, counts, exhausted, k)


def sample_kshot(corpus: Corpus, k: int, seed: int) -> Corpus:
    return run_kshot_sampler(corpus, k, seed).corpus


# ---------------------------------------------------------------------------
# Synthetic hierarchical corpora


@dataclass(frozen=True)
class SyntheticSpec:
    coarse_types: tuple[str, ...] = ("LOC", "MISC", "ORG", "PER")
    fine_per_coarse: int = 3
    markers_per_type: int = 12
    cues_per_type: int = 2
    cue_prob: float = 0.6
    filler_vocab: int = 300
    fine_sentences: int = 1500
    coarse_sentences: int = 5000
    min_len: int = 6
    max_len: int = 14
    entity_density: float = 0.15
    max_entity_len: int = 3
    rho: float = 0.0

    def validate(self):
        if not self.coarse_types:
            raise ValueError("need at least one coarse type")
        if self.fine_per_coarse < 2:
            raise ValueError("need >= 2 fine subtypes per coarse type")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"inconsistency rate must be in [0, 1), got {self.rho}")
        if self.markers_per_type < 1 or self.filler_vocab < 1:
            raise ValueError("vocabulary sizes must be positive")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("bad sentence length range")
        if not 0.0 < self.entity_density <= 1.0 or self.max_entity_len < 1:
            raise ValueError("bad entity density / length")
        if not 0.0 <= self.cue_prob <= 1.0:
            raise ValueError("cue_prob must be a probability")


@dataclass
class SyntheticData:
    fine: Corpus
    coarse: Corpus
    hierarchy: dict[str, str]
    coarse_latent: Corpus  # fine-level gold for the coarse corpus sentences
    corrupted: list[np.ndarray]  # per coarse sentence, True where the label was corrupted

    def __iter__(self):
        return iter((self.fine, self.coarse, self.hierarchy))


def fine_type_names(spec: SyntheticSpec) -> list[tuple[str, str]]:
    return [(f"{c.lower()}{j}", c) for c in spec.coarse_types for j in range(spec.fine_per_coarse)]


def _draw_sentence(rng, spec, n_fine, markers, cues, fillers):
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    tokens: list[str] = []
    fine_types: list[int] = []  # -1 outside, else fine type index
    begins: list[bool] = []
    placed = False
    while len(tokens) < length:
        room = length - len(tokens)
        want = rng.random() < spec.entity_density or (not placed and room <= spec.max_entity_len + 1)
        if want and room >= 2:
            ft = int(rng.integers(n_fine))
            if rng.random() < spec.cue_prob:
                tokens.append(cues[ft][int(rng.integers(len(cues[ft])))])
                fine_types.append(-1)
                begins.append(False)
                room -= 1
            elen = int(rng.integers(1, min(spec.max_entity_len, room) + 1))
            for j in range(elen):
                tokens.append(markers[ft][int(rng.integers(len(markers[ft])))])
                fine_types.append(ft)
                begins.append(j == 0)
            placed = True
        else:
            tokens.append(fillers[int(rng.integers(len(fillers)))])
            fine_types.append(-1)
            begins.append(False)
    return tokens, fine_types, begins


def generate_synthetic(spec: SyntheticSpec, seed: int) -> SyntheticData:
    """Generate a fine corpus and a coarse corpus over a two-level hierarchy.

    Every fine type owns disjoint marker words (entity tokens) and a few cue
    words that may precede its mentions. Coarse labels are the parent type;
    with probability ``rho`` each coarse entity token is relabeled to a
    uniformly chosen different coarse type or ``O``.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    pairs = fine_type_names(spec)
    hierarchy = dict(pairs)
    fine_schema = TagSchema(tuple(f for f, _ in pairs))
    coarse_schema = TagSchema(tuple(spec.coarse_types))
    parent = [coarse_schema.type_index(c) for _, c in pairs]
    n_fine = len(pairs)
    markers = [[f"{f}_m{j}" for j in range(spec.markers_per_type)] for f, _ in pairs]
    cues = [[f"{f}_cue{j}" for j in range(spec.cues_per_type)] for f, _ in pairs]
    fillers = [f"w{j}" for j in range(spec.filler_vocab)]

    fine_sents = []
    for _ in range(spec.fine_sentences):
        toks, fts, begins = _draw_sentence(rng, spec, n_fine, markers, cues, fillers)
        tags = [0 if ft < 0 else (1 if b else 2) + 2 * ft for ft, b in zip(fts, begins)]
        fine_sents.append(TaggedSentence(tuple(toks), tuple(tags)))

    latent_sents, coarse_sents, corrupted = [], [], []
    n_coarse = coarse_schema.num_types
    for _ in range(spec.coarse_sentences):
        toks, fts, begins = _draw_sentence(rng, spec, n_fine, markers, cues, fillers)
        latent = [0 if ft < 0 else (1 if b else 2) + 2 * ft for ft, b in zip(fts, begins)]
        tags = []
        bad = np.zeros(len(toks), dtype=bool)
        for i, (ft, b) in enumerate(zip(fts, begins)):
            if ft < 0:
                tags.append(0)
                continue
            ct = parent[ft]
            if spec.rho > 0 and rng.random() < spec.rho:
                # other coarse types plus O, uniformly
                choice = int(rng.integers(n_coarse))
                bad[i] = True
                if choice == ct:
                    tags.append(0)
                    continue
                ct = choice
            tags.append((1 if b else 2) + 2 * ct)
        tags, _ = repair_bio(tags)
        latent_sents.append(TaggedSentence(tuple(toks), tuple(latent)))
        coarse_sents.append(TaggedSentence(tuple(toks), tuple(tags)))
        corrupted.append(bad)

    return SyntheticData(
        fine=Corpus(fine_schema, tuple(fine_sents), "synthetic-fine"),
        coarse=Corpus(coarse_schema, tuple(coarse_sents), "synthetic-coarse"),
        hierarchy=hierarchy,
        coarse_latent=Corpus(fine_schema, tuple(latent_sents), "synthetic-coarse-latent"),
        corrupted=corrupted,
    )


def corpus_type_counts(corpus: Corpus) -> Counter:
    c: Counter = Counter()
    for s in corpus.sentences:
        for sp in extract_spans(s):
            c[corpus.schema.entity_types[sp.entity_type]] += 1
    return c
