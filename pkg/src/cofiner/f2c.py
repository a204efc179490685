"""Fine-to-coarse (F2C) mapping matrices.

Counts come from a coarse tagger's predictions on fine-annotated text. Rows
are fine entity types; columns are coarse entity types plus a trailing ``O``
column that is dropped before top-k selection.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Corpus, TagSchema

log = logging.getLogger(__name__)

ALL = "all"


@dataclass
class CooccurrenceMatrix:
    counts: np.ndarray  # [n_fine_types, n_coarse_types + 1], last column = predicted O
    fine_schema: TagSchema
    coarse_schema: TagSchema

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        want = (self.fine_schema.num_types, self.coarse_schema.num_types + 1)
        if self.counts.shape != want:
            raise ValueError(f"co-occurrence shape {self.counts.shape} != {want}")
        if np.any(self.counts < 0):
            raise ValueError("negative co-occurrence count")


@dataclass
class F2CMatrix:
    type_level: np.ndarray
    fine_schema: TagSchema
    coarse_schema: TagSchema
    k_used: int | str = 1
    provenance: dict = field(default_factory=dict)
    counts: CooccurrenceMatrix | None = None

    def __post_init__(self):
        self.type_level = np.asarray(self.type_level, dtype=np.float64)
        self.tag_level = build_tag_level(self.type_level, self.fine_schema, self.coarse_schema)

    def set_type_level(self, type_level: np.ndarray):
        self.type_level = np.asarray(type_level, dtype=np.float64)
        self.tag_level = build_tag_level(self.type_level, self.fine_schema, self.coarse_schema)


def count_cooccurrence(fine_corpus: Corpus, coarse_predictions: Sequence[Sequence[int]],
                       coarse_schema: TagSchema) -> CooccurrenceMatrix:
    """Count (fine gold type, predicted coarse type) pairs over fine-entity tokens."""
    fs = fine_corpus.schema
    if len(coarse_predictions) != len(fine_corpus):
        raise ValueError(f"{len(coarse_predictions)} predicted sentences for {len(fine_corpus)} sentences")
    n_c = coarse_schema.num_types
    counts = np.zeros((fs.num_types, n_c + 1), dtype=np.int64)
    for sent, pred in zip(fine_corpus.sentences, coarse_predictions):
        if len(pred) != len(sent):
            raise ValueError("coarse predictions not aligned with fine tokens")
        for gold, p in zip(sent.tags, pred):
            if gold == 0:
                continue
            col = n_c if p == 0 else (int(p) - 1) // 2
            counts[(gold - 1) // 2, col] += 1
    return CooccurrenceMatrix(counts, fs, coarse_schema)


def refine_topk(C: CooccurrenceMatrix, k: int | str = 1) -> CooccurrenceMatrix:
    """Keep the k largest entity-column counts per row (ties -> lower column)."""
    counts = C.counts.copy()
    counts[:, -1] = 0
    if k != ALL:
        if int(k) < 1:
            raise ValueError(f"k must be >= 1 or '{ALL}', got {k}")
        k = int(k)
        ent = counts[:, :-1]
        for row in ent:
            # stable sort on -count keeps lower index first among ties
            order = np.argsort(-row, kind="stable")
            row[order[k:]] = 0
    return CooccurrenceMatrix(counts, C.fine_schema, C.coarse_schema)


def normalize(C: CooccurrenceMatrix, k_used: int | str = 1, provenance: dict | None = None) -> F2CMatrix:
    ent = C.counts[:, :-1].astype(np.float64)
    sums = ent.sum(axis=1, keepdims=True)
    n_c = ent.shape[1]
    out = np.empty_like(ent)
    for i in range(ent.shape[0]):
        if sums[i, 0] > 0:
            out[i] = ent[i] / sums[i, 0]
        else:
            log.warning("fine type %r has no coarse co-occurrence; using a uniform row",
                        C.fine_schema.entity_types[i])
            out[i] = 1.0 / n_c
    return F2CMatrix(out, C.fine_schema, C.coarse_schema, k_used, dict(provenance or {}), C)


def build_tag_level(type_level: np.ndarray, fine_schema: TagSchema, coarse_schema: TagSchema) -> np.ndarray:
    """Expand a type-level matrix to BIO tags: O->O, B->B, I->I."""
    nf, nc = fine_schema.num_types, coarse_schema.num_types
    if type_level.shape != (nf, nc):
        raise ValueError(f"type-level matrix shape {type_level.shape} != {(nf, nc)}")
    M = np.zeros((2 * nf + 1, 2 * nc + 1))
    M[0, 0] = 1.0
    M[1::2, 1::2] = type_level
    M[2::2, 2::2] = type_level
    return M


def hierarchy_matrix(hierarchy: dict[str, str], fine_schema: TagSchema, coarse_schema: TagSchema) -> np.ndarray:
    """0/1 type-level matrix of a known fine->coarse parent map."""
    M = np.zeros((fine_schema.num_types, coarse_schema.num_types))
    for f, c in hierarchy.items():
        M[fine_schema.type_index(f), coarse_schema.type_index(c)] = 1.0
    return M


class LearnableF2C:
    """Row-softmax reparameterization of an F2C matrix, trained with the model.

    The logits join the model's AdamW step under ``name`` (without weight
    decay); call ``refresh`` after each step.
    """

    def __init__(self, matrix: F2CMatrix, name: str = "f2c", floor: float = 1e-4, enabled: bool = True):
        self.matrix = matrix
        self.name = name
        self.enabled = enabled
        self.logits = np.log(np.maximum(matrix.type_level, floor))
        self.grad = np.zeros_like(self.logits)
        self._refresh()

    def _refresh(self):
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        self.matrix.set_type_level(e / e.sum(axis=1, keepdims=True))

    def _check(self):
        if not self.enabled:
            raise RuntimeError("learnable F2C mode is disabled")

    def accumulate(self, probs: np.ndarray, dpc: np.ndarray):
        """Add dL/dlogits given fine probs and dL/dp^C for one batch."""
        self._check()
        d_tag = probs.astype(np.float64).T @ dpc.astype(np.float64)
        d_type = d_tag[1::2, 1::2] + d_tag[2::2, 2::2]
        M = self.matrix.type_level
        self.grad += M * (d_type - (d_type * M).sum(axis=1, keepdims=True))

    def params(self) -> dict:
        return {self.name: self.logits}

    def grads(self) -> dict:
        return {self.name: self.grad}

    def refresh(self):
        """Re-derive the row-stochastic matrix after the logits moved."""
        self._check()
        self._refresh()


def write_matrix_tsv(M: F2CMatrix, path) -> None:
    """Heatmap-ready TSV: header of coarse types, one row per fine type."""
    lines = ["fine\t" + "\t".join(M.coarse_schema.entity_types)]
    for name, row in zip(M.fine_schema.entity_types, M.type_level):
        lines.append(name + "\t" + "\t".join(f"{v:.9f}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_matrix_tsv(path) -> F2CMatrix:
    rows = [l.split("\t") for l in Path(path).read_text(encoding="utf-8").splitlines() if l]
    coarse = TagSchema(tuple(rows[0][1:]))
    fine = TagSchema(tuple(r[0] for r in rows[1:]))
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]]).reshape(fine.num_types, coarse.num_types)
    return F2CMatrix(values, fine, coarse, provenance={"source": str(path)})


def format_matrix(M: F2CMatrix, digits: int = 2) -> str:
    names = M.coarse_schema.entity_types
    w = max(len(n) for n in M.fine_schema.entity_types)
    cw = max(max(len(n) for n in names), digits + 2)
    out = [" " * w + "  " + "  ".join(n.rjust(cw) for n in names)]
    for name, row in zip(M.fine_schema.entity_types, M.type_level):
        out.append(name.ljust(w) + "  " + "  ".join(f"{v:.{digits}f}".rjust(cw) for v in row))
    return "\n".join(out)
