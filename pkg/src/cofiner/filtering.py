"""Inconsistency filtering of coarse labels with a frozen fine tagger."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Corpus, TaggedSentence
from .f2c import F2CMatrix
from .model import TokenClassifier, featurize, forward, marginalize, predict_probs


@dataclass
class ConsistencyMask:
    masks: list[np.ndarray]  # per sentence, True = label kept

    @property
    def total_tokens(self) -> int:
        return int(sum(len(m) for m in self.masks))

    @property
    def masked_tokens(self) -> int:
        return int(sum(int((~m).sum()) for m in self.masks))

    @property
    def masked_fraction(self) -> float:
        n = self.total_tokens
        return self.masked_tokens / n if n else 0.0

    @classmethod
    def all_true(cls, corpus: Corpus) -> "ConsistencyMask":
        return cls([np.ones(len(s), dtype=bool) for s in corpus.sentences])

    @classmethod
    def all_false(cls, corpus: Corpus) -> "ConsistencyMask":
        return cls([np.zeros(len(s), dtype=bool) for s in corpus.sentences])

    def check_aligned(self, corpus: Corpus):
        if len(self.masks) != len(corpus) or any(len(m) != len(s) for m, s in zip(self.masks, corpus.sentences)):
            raise ValueError(f"mask is not aligned with corpus {corpus.name!r}")


def coarse_argmax(fine_probs: np.ndarray, tag_matrix: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest tag index on ties
    return np.argmax(marginalize(fine_probs, tag_matrix), axis=1)


def predict_coarse(model: TokenClassifier, M: F2CMatrix, sentence: TaggedSentence | np.ndarray) -> np.ndarray:
    """Coarse tags predicted through the F2C matrix (eval mode, no dropout)."""
    if model.config.num_tags != M.tag_level.shape[0]:
        raise ValueError(f"model emits {model.config.num_tags} tags, matrix expects {M.tag_level.shape[0]}")
    feats = featurize(sentence, model.config) if isinstance(sentence, TaggedSentence) else sentence
    probs, _ = forward(model, feats, train_mode=False)
    return coarse_argmax(probs, M.tag_level)


def build_mask(model: TokenClassifier, M: F2CMatrix, coarse_corpus: Corpus,
               features: list[np.ndarray] | None = None) -> ConsistencyMask:
    """Keep a coarse label only where it equals the mapped fine prediction (full tag)."""
    if model.config.num_tags != M.tag_level.shape[0]:
        raise ValueError(f"model emits {model.config.num_tags} tags, matrix expects {M.tag_level.shape[0]}")
    if M.tag_level.shape[1] != coarse_corpus.schema.num_tags:
        raise ValueError("matrix coarse side does not match the corpus schema")
    if features is None:
        features = [featurize(s, model.config) for s in coarse_corpus.sentences]
    probs = predict_probs(model, features)
    masks = []
    for sent, p in zip(coarse_corpus.sentences, probs):
        pred = coarse_argmax(p, M.tag_level)
        masks.append(pred == np.asarray(sent.tags))
    return ConsistencyMask(masks)


@dataclass
class FilterRow:
    entity_type: str
    tokens: int
    filtered: int

    @property
    def proportion(self) -> float:
        return self.filtered / self.tokens if self.tokens else 0.0


def filtering_report(mask: ConsistencyMask, coarse_corpus: Corpus) -> list[FilterRow]:
    """Per coarse entity type: gold entity tokens and how many were filtered out."""
    mask.check_aligned(coarse_corpus)
    schema = coarse_corpus.schema
    tokens = np.zeros(schema.num_types, dtype=np.int64)
    filtered = np.zeros(schema.num_types, dtype=np.int64)
    for sent, m in zip(coarse_corpus.sentences, mask.masks):
        for tag, keep in zip(sent.tags, m):
            if tag == 0:
                continue
            t = (tag - 1) // 2
            tokens[t] += 1
            filtered[t] += not keep
    return [FilterRow(name, int(tokens[i]), int(filtered[i])) for i, name in enumerate(schema.entity_types)]


def report_tsv(rows: list[FilterRow], delta_f1: dict[str, float] | None = None) -> str:
    lines = ["coarse_type\ttokens\tfiltered\tproportion\tdelta_f1"]
    for r in rows:
        d = "" if not delta_f1 or r.entity_type not in delta_f1 else f"{delta_f1[r.entity_type]:.4f}"
        lines.append(f"{r.entity_type}\t{r.tokens}\t{r.filtered}\t{r.proportion:.6f}\t{d}")
    return "\n".join(lines) + "\n"


def write_mask(mask: ConsistencyMask, path, checkpoint_sha: str = "", matrix_provenance: str = "") -> None:
    lines = [f"# checkpoint={checkpoint_sha} matrix={matrix_provenance}"]
    lines += ["".join("1" if b else "0" for b in m) for m in mask.masks]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_mask(path) -> tuple[ConsistencyMask, str]:
    """Returns the mask and its header line."""
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    header = lines[0] if lines and lines[0].startswith("#") else ""
    body = lines[1:] if header else lines
    if body and body[-1] == "":
        body = body[:-1]
    masks = []
    for ln in body:
        if set(ln) - {"0", "1"}:
            raise ValueError(f"{path}: bad mask line {ln!r}")
        masks.append(np.frombuffer(ln.encode(), dtype=np.uint8) == ord("1"))
    return ConsistencyMask(masks), header
