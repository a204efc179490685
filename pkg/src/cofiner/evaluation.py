"""Span-level micro precision / recall / F1."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Corpus, TagSchema, extract_spans, repair_bio
from .f2c import F2CMatrix
from .filtering import coarse_argmax
from .model import TokenClassifier, featurize_corpus, predict_probs


def prf(correct: int, predicted: int, gold: int) -> tuple[float, float, float]:
    p = correct / predicted if predicted else 0.0
    r = correct / gold if gold else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


@dataclass
class TypeScore:
    gold: int = 0
    predicted: int = 0
    correct: int = 0

    @property
    def prf(self) -> tuple[float, float, float]:
        return prf(self.correct, self.predicted, self.gold)


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    per_type: dict[str, TypeScore]
    sentences: int
    schema: TagSchema
    gold: int = 0
    predicted: int = 0
    correct: int = 0

    def table(self) -> str:
        rows = [f"{'type':<16}{'gold':>7}{'pred':>7}{'corr':>7}{'P':>8}{'R':>8}{'F1':>8}"]
        for name, s in self.per_type.items():
            p, r, f = s.prf
            rows.append(f"{name:<16}{s.gold:>7}{s.predicted:>7}{s.correct:>7}{p:>8.4f}{r:>8.4f}{f:>8.4f}")
        rows.append(f"{'micro':<16}{self.gold:>7}{self.predicted:>7}{self.correct:>7}"
                    f"{self.precision:>8.4f}{self.recall:>8.4f}{self.f1:>8.4f}")
        return "\n".join(rows)

    def tsv(self) -> str:
        rows = ["type\tgold\tpredicted\tcorrect\tprecision\trecall\tf1"]
        for name, s in self.per_type.items():
            p, r, f = s.prf
            rows.append(f"{name}\t{s.gold}\t{s.predicted}\t{s.correct}\t{p:.6f}\t{r:.6f}\t{f:.6f}")
        rows.append(f"micro\t{self.gold}\t{self.predicted}\t{self.correct}\t"
                    f"{self.precision:.6f}\t{self.recall:.6f}\t{self.f1:.6f}")
        return "\n".join(rows) + "\n"


def score_sequences(gold_tags: Sequence[Sequence[int]], pred_tags: Sequence[Sequence[int]],
                    schema: TagSchema) -> EvalReport:
    """Exact (type, start, end) span matching, micro-averaged.

    Predicted sequences are BIO-repaired before span extraction.
    """
    if len(gold_tags) != len(pred_tags):
        raise ValueError("gold and predicted corpora differ in sentence count")
    per = {name: TypeScore() for name in schema.entity_types}
    names = schema.entity_types
    for g, p in zip(gold_tags, pred_tags):
        if len(g) != len(p):
            raise ValueError("gold and predicted sentences differ in length")
        gs = {(s.entity_type, s.start, s.end) for s in extract_spans(list(g))}
        ps = {(s.entity_type, s.start, s.end) for s in extract_spans(repair_bio(list(p))[0])}
        for t, _, _ in gs:
            per[names[t]].gold += 1
        for t, _, _ in ps:
            per[names[t]].predicted += 1
        for t, _, _ in gs & ps:
            per[names[t]].correct += 1
    gold = sum(s.gold for s in per.values())
    pred = sum(s.predicted for s in per.values())
    corr = sum(s.correct for s in per.values())
    p, r, f = prf(corr, pred, gold)
    return EvalReport(p, r, f, per, len(gold_tags), schema, gold, pred, corr)


def predict_tags(model: TokenClassifier, corpus: Corpus, M: F2CMatrix | None = None,
                 features: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """Argmax tag per token; with ``M`` the argmax is over the mapped coarse tags."""
    if features is None:
        features = featurize_corpus(corpus.sentences, model.config)
    probs = predict_probs(model, features)
    if M is None:
        return [np.argmax(p, axis=1) for p in probs]
    return [coarse_argmax(p, M.tag_level) for p in probs]


def evaluate(model: TokenClassifier, corpus: Corpus, M: F2CMatrix | None = None,
             features: list[np.ndarray] | None = None) -> EvalReport:
    schema = corpus.schema
    if M is None and model.config.num_tags != schema.num_tags:
        raise ValueError(f"model head has {model.config.num_tags} tags but corpus schema has "
                         f"{schema.num_tags}; pass an F2C matrix to score a coarse corpus")
    if M is not None and (M.tag_level.shape[0] != model.config.num_tags
                          or M.tag_level.shape[1] != schema.num_tags):
        raise ValueError("F2C matrix does not connect the model head to the corpus schema")
    preds = predict_tags(model, corpus, M, features)
    return score_sequences([s.tags for s in corpus.sentences], preds, schema)
