"""Training pipeline: fine model, coarse reannotation models, F2C matrices,
consistency masks, and alternating joint training."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .corpus import Corpus
from .evaluation import EvalReport, evaluate
from .f2c import ALL, F2CMatrix, LearnableF2C, count_cooccurrence, normalize, refine_topk
from .filtering import ConsistencyMask, build_mask
from .model import (
    ModelConfig,
    OptimizerState,
    ProbBatch,
    TokenClassifier,
    backward,
    coarse_loss,
    featurize,
    fine_loss,
    forward,
    optimizer_step,
    predict_probs,
)

log = logging.getLogger(__name__)


@dataclass
class TrainPlan:
    fine: Corpus
    coarse: list[Corpus] = field(default_factory=list)
    dev: Corpus | None = None
    test: Corpus | None = None
    seed: int = 0
    coarse_epochs: int = 20
    fine_epochs: int = 30
    joint_epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-2
    weight_decay: float = 0.01
    topk: int | str = 1
    no_filtering: bool = False
    no_coarse: bool = False
    learnable_matrix: bool = False
    fine_first: bool = False
    reset_optimizer: bool = False
    refilter_every_epoch: bool = False
    normalize: str = "tokens"  # or "surviving"
    dev_fraction: float = 0.1
    log_dev: bool = True
    vocab_size: int = 4096
    embed_dim: int = 32
    window: int = 2
    hidden_dim: int = 64
    dropout: float = 0.1

    def validate(self):
        if min(self.coarse_epochs, self.fine_epochs, self.joint_epochs, self.batch_size) < 1:
            raise ValueError("epoch counts and batch size must be >= 1")
        if len(self.fine) == 0:
            raise ValueError("fine corpus is empty")
        names = [c.name for c in self.coarse]
        if len(set(names)) != len(names):
            raise ValueError(f"coarse corpora need distinct names, got {names}")
        for c in self.coarse:
            if not self.fine.schema.num_types > c.schema.num_types:
                raise ValueError(f"fine schema must have more entity types than coarse corpus {c.name!r}")
        if self.normalize not in ("tokens", "surviving"):
            raise ValueError(f"normalize must be 'tokens' or 'surviving', got {self.normalize!r}")
        if self.topk != ALL and int(self.topk) < 1:
            raise ValueError(f"topk must be >= 1 or '{ALL}'")

    def model_config(self, num_tags: int, seed_offset: int = 0) -> ModelConfig:
        return ModelConfig(self.vocab_size, self.embed_dim, self.window, self.hidden_dim,
                           num_tags, self.dropout, self.seed + seed_offset)

    def digest(self) -> str:
        """Hash of everything that determines the run's outputs."""
        h = hashlib.sha256()
        knobs = {k: v for k, v in asdict_shallow(self).items() if k not in ("fine", "coarse", "dev", "test")}
        h.update(json.dumps(knobs, sort_keys=True, default=str).encode())
        for c in [self.fine, *self.coarse, self.dev, self.test]:
            if c is not None:
                h.update(corpus_digest(c).encode())
        return h.hexdigest()[:16]


def asdict_shallow(obj) -> dict:
    return {f: getattr(obj, f) for f in obj.__dataclass_fields__}


def corpus_digest(corpus: Corpus) -> str:
    h = hashlib.sha256()
    h.update("\x1f".join(corpus.schema.entity_types).encode())
    for s in corpus.sentences:
        h.update("\x1f".join(s.tokens).encode())
        h.update(np.asarray(s.tags, dtype=np.int32).tobytes())
    return h.hexdigest()[:16]


@dataclass
class MetricRow:
    epoch: int
    stage: str
    corpus: str
    loss: float
    dev_span_f1: float | None
    steps: int
    skipped: int = 0


def stable_seed(*parts) -> int:
    return int.from_bytes(hashlib.sha256(repr(parts).encode()).digest()[:8], "little")


class TrainState:
    """Model, optimizer, and the random streams of one training run."""

    def __init__(self, model: TokenClassifier, lr: float, weight_decay: float, seed: int):
        self.model = model
        self.opt = OptimizerState(lr=lr, weight_decay=weight_decay)
        self.seed = seed
        self.dropout_rng = np.random.default_rng(stable_seed("dropout", seed))
        self.shuffle_rngs: dict[str, np.random.Generator] = {}
        self.epochs_done: dict[str, int] = {}
        self.log: list[MetricRow] = []
        self._features: dict[int, tuple[Corpus, list[np.ndarray]]] = {}

    def clone(self) -> "TrainState":
        other = copy.copy(self)
        other.model = self.model.copy()
        other.model.version = self.model.version
        other.opt = copy.deepcopy(self.opt)
        other.dropout_rng = copy.deepcopy(self.dropout_rng)
        other.shuffle_rngs = copy.deepcopy(self.shuffle_rngs)
        other.epochs_done = dict(self.epochs_done)
        other.log = list(self.log)
        other._features = self._features  # read-only, safe to share
        return other

    def features(self, corpus: Corpus) -> list[np.ndarray]:
        hit = self._features.get(id(corpus))
        if hit is None or hit[0] is not corpus:
            hit = (corpus, [featurize(s, self.model.config) for s in corpus.sentences])
            self._features[id(corpus)] = hit
        return hit[1]

    def shuffle_rng(self, role: str) -> np.random.Generator:
        if role not in self.shuffle_rngs:
            self.shuffle_rngs[role] = np.random.default_rng(stable_seed("shuffle", self.seed, role))
        return self.shuffle_rngs[role]

    def reset_optimizer(self):
        self.opt = OptimizerState(lr=self.opt.lr, weight_decay=self.opt.weight_decay)


def run_epoch(state: TrainState, corpus: Corpus, batch_size: int, stage: str, role: str,
              matrix: F2CMatrix | None = None, mask: ConsistencyMask | None = None,
              learnable: LearnableF2C | None = None, surviving_norm: bool = False,
              dev: Corpus | None = None) -> MetricRow:
    """One shuffled pass. Without ``matrix`` the fine loss is used."""
    model = state.model
    feats = state.features(corpus)
    n = len(corpus)
    order = state.shuffle_rng(role).permutation(n)
    losses = []
    steps = skipped = 0
    for b in range(0, n, batch_size):
        idx = order[b:b + batch_size]
        keep = None
        if mask is not None:
            keep = np.concatenate([mask.masks[i] for i in idx])
            if not keep.any():
                # every label filtered: zero loss, so the step is skipped outright
                skipped += 1
                losses.append(0.0)
                continue
        F = np.concatenate([feats[i] for i in idx])
        lengths = np.array([len(feats[i]) for i in idx])
        gold = np.concatenate([np.asarray(corpus.sentences[i].tags) for i in idx])
        sids = np.repeat(np.arange(len(idx)), lengths)
        probs, cache = forward(model, F, train_mode=True, rng=state.dropout_rng)
        if matrix is None:
            batch = ProbBatch(probs, sids, np.zeros(len(F), dtype=np.int64), lengths)
            loss, dprobs = fine_loss(batch, gold)
        else:
            denom = lengths
            if surviving_norm and keep is not None:
                denom = np.maximum(np.bincount(sids, weights=keep, minlength=len(idx)), 1)
            batch = ProbBatch(probs, sids, np.zeros(len(F), dtype=np.int64), denom)
            m = keep if mask is not None else np.ones(len(F), dtype=bool)
            loss, dprobs, dpc = coarse_loss(batch, matrix.tag_level, gold, m, with_coarse_grad=True)
            if learnable is not None:
                learnable.accumulate(probs, dpc)
        backward(model, cache, dprobs)
        model.assert_finite()
        if learnable is not None:
            optimizer_step(model, state.opt, learnable.params(), learnable.grads())
            learnable.refresh()
        else:
            optimizer_step(model, state.opt)
        losses.append(loss)
        steps += 1
    model.assert_finite()
    assert steps + skipped == math.ceil(n / batch_size)
    state.epochs_done[role] = state.epochs_done.get(role, 0) + 1
    dev_f1 = evaluate(model, dev, features=state.features(dev)).f1 if dev is not None and len(dev) else None
    row = MetricRow(state.epochs_done[role], stage, corpus.name, float(np.mean(losses)) if losses else 0.0,
                    dev_f1, steps, skipped)
    state.log.append(row)
    log.debug("%s epoch %d %s loss=%.4f dev_f1=%s", stage, row.epoch, corpus.name, row.loss, dev_f1)
    return row


# ---------------------------------------------------------------------------
# pipeline stages


def split_dev(plan: TrainPlan) -> tuple[Corpus, Corpus | None]:
    """Training sentences and dev set; holds out a fraction when no dev is given."""
    if plan.dev is not None:
        return plan.fine, plan.dev
    n = len(plan.fine)
    n_dev = int(round(plan.dev_fraction * n)) if n >= 10 else 0
    if n_dev == 0:
        return plan.fine, None
    perm = np.random.default_rng(stable_seed("dev", plan.seed)).permutation(n)
    dev_idx = sorted(perm[:n_dev])
    train_idx = sorted(perm[n_dev:])
    return plan.fine.subset(train_idx), plan.fine.subset(dev_idx, f"{plan.fine.name}.dev")


def new_fine_state(plan: TrainPlan) -> TrainState:
    model = TokenClassifier(plan.model_config(plan.fine.schema.num_tags))
    return TrainState(model, plan.lr, plan.weight_decay, plan.seed)


def train_fine(plan: TrainPlan, train: Corpus | None = None, dev: Corpus | None = None,
               state: TrainState | None = None, epochs: int | None = None) -> TrainState:
    """Step 1: fine-only training. Also the no-coarse baseline."""
    plan.validate()
    if train is None:
        train, dev = split_dev(plan)
    if len(train) == 0:
        raise ValueError("fine training corpus is empty")
    state = state or new_fine_state(plan)
    for _ in range(plan.fine_epochs if epochs is None else epochs):
        run_epoch(state, train, plan.batch_size, "fine", "fine", dev=dev if plan.log_dev else None)
    return state


def train_coarse_model(plan: TrainPlan, coarse: Corpus) -> TrainState:
    """Tagger over the coarse schema, used only to reannotate the fine corpus."""
    if len(coarse) == 0:
        raise ValueError(f"coarse corpus {coarse.name!r} is empty")
    offset = 1 + stable_seed("coarse-model", coarse.name) % 100_000
    model = TokenClassifier(plan.model_config(coarse.schema.num_tags, offset))
    state = TrainState(model, plan.lr, plan.weight_decay, plan.seed + offset)
    for _ in range(plan.coarse_epochs):
        run_epoch(state, coarse, plan.batch_size, "coarse_model", coarse.name)
    return state


def build_matrix_step(coarse_model: TokenClassifier, fine: Corpus, coarse_schema, k: int | str = 1,
                      provenance: dict | None = None) -> F2CMatrix:
    """Step 2: reannotate the fine corpus with the coarse tagger and build M."""
    if coarse_model.config.num_tags != coarse_schema.num_tags:
        raise ValueError("coarse model head does not match the coarse schema")
    probs = predict_probs(coarse_model, [featurize(s, coarse_model.config) for s in fine.sentences])
    preds = [np.argmax(p, axis=1) for p in probs]
    C = count_cooccurrence(fine, preds, coarse_schema)
    prov = {"coarse_model": coarse_model.checksum()[:16], "fine_corpus": fine.name}
    prov.update(provenance or {})
    return normalize(refine_topk(C, k), k, prov)


@dataclass
class RunArtifacts:
    plan_hash: str
    seed: int
    step1: TrainState | None = None
    coarse_models: dict[str, TrainState] = field(default_factory=dict)
    matrices: dict[str, F2CMatrix] = field(default_factory=dict)
    masks: dict[str, ConsistencyMask] = field(default_factory=dict)
    final: TrainState | None = None
    test_report: EvalReport | None = None
    dev: Corpus | None = None
    train: Corpus | None = None

    @property
    def log(self) -> list[MetricRow]:
        return self.final.log if self.final is not None else []


def train_joint(plan: TrainPlan, artifacts: RunArtifacts) -> TrainState:
    """Step 4: per epoch, one pass over each coarse corpus then one over the fine corpus."""
    if artifacts.step1 is None or artifacts.train is None:
        raise RuntimeError("joint training needs the step-1 model")
    coarse = [] if plan.no_coarse else plan.coarse
    for c in coarse:
        if c.name not in artifacts.matrices or c.name not in artifacts.masks:
            raise RuntimeError(f"missing matrix or mask for coarse corpus {c.name!r}")
    state = artifacts.step1.clone()
    if plan.reset_optimizer:
        state.reset_optimizer()
    matrices = {c.name: copy.deepcopy(artifacts.matrices[c.name]) for c in coarse}
    learnable = {}
    if plan.learnable_matrix:
        for c in coarse:
            learnable[c.name] = LearnableF2C(matrices[c.name], name=f"f2c:{c.name}")
            state.opt.no_decay.add(f"f2c:{c.name}")
    masks = dict(artifacts.masks)
    dev = artifacts.dev if plan.log_dev else None

    def coarse_passes():
        for c in coarse:
            run_epoch(state, c, plan.batch_size, "joint", c.name, matrices[c.name], masks[c.name],
                      learnable.get(c.name), plan.normalize == "surviving")

    for _ in range(plan.joint_epochs):
        if plan.refilter_every_epoch and not plan.no_filtering:
            for c in coarse:
                masks[c.name] = build_mask(state.model, matrices[c.name], c, state.features(c))
        if not plan.fine_first:
            coarse_passes()
        run_epoch(state, artifacts.train, plan.batch_size, "joint", "fine", dev=dev)
        if plan.fine_first:
            coarse_passes()
    artifacts.matrices.update({k: v for k, v in matrices.items() if plan.learnable_matrix})
    return state


def run_pipeline(plan: TrainPlan, cache: dict | None = None,
                 on_stage: Callable[[str, RunArtifacts], None] | None = None) -> RunArtifacts:
    """Steps 1-4 end to end. ``cache`` shares step-1 and coarse models across variants."""
    plan.validate()
    cache = {} if cache is None else cache
    train, dev = split_dev(plan)
    art = RunArtifacts(plan.digest(), plan.seed, dev=dev, train=train)

    step1_key = ("step1", corpus_digest(plan.fine), plan.seed, plan.fine_epochs, plan.lr,
                 plan.weight_decay, plan.batch_size, plan.dev_fraction, plan.log_dev,
                 plan.vocab_size, plan.embed_dim, plan.window, plan.hidden_dim, plan.dropout,
                 None if plan.dev is None else corpus_digest(plan.dev))
    if step1_key in cache:
        log.info("step-1 cache hit")
        art.step1 = cache[step1_key]
    else:
        art.step1 = train_fine(plan, train, dev)
        cache[step1_key] = art.step1
    if on_stage:
        on_stage("step1", art)

    if not plan.no_coarse:
        for c in plan.coarse:
            ckey = ("coarse", corpus_digest(c), plan.seed, plan.coarse_epochs, plan.lr, plan.weight_decay,
                    plan.batch_size, plan.vocab_size, plan.embed_dim, plan.window, plan.hidden_dim, plan.dropout)
            if ckey in cache:
                log.info("coarse model cache hit for %s", c.name)
            else:
                cache[ckey] = train_coarse_model(plan, c)
            art.coarse_models[c.name] = cache[ckey]
            art.matrices[c.name] = build_matrix_step(cache[ckey].model, train, c.schema, plan.topk,
                                                     {"coarse_corpus": c.name})
            if plan.no_filtering:
                art.masks[c.name] = ConsistencyMask.all_true(c)
            else:
                art.masks[c.name] = build_mask(art.step1.model, art.matrices[c.name], c,
                                               art.step1.features(c))
        if on_stage:
            on_stage("matrices", art)

    art.final = train_joint(plan, art)
    if plan.test is not None:
        art.test_report = evaluate(art.final.model, plan.test, features=art.final.features(plan.test))
    if on_stage:
        on_stage("final", art)
    return art


# ---------------------------------------------------------------------------
# ablation


def ablation_variants(plan: TrainPlan) -> list[tuple[str, TrainPlan]]:
    out = [("full", plan), ("no_filtering", replace(plan, no_filtering=True)),
           ("no_coarse", replace(plan, no_coarse=True))]
    if len(plan.coarse) > 1:
        for c in plan.coarse:
            out.append((f"without_{c.name}", replace(plan, coarse=[x for x in plan.coarse if x is not c])))
    return out


@dataclass
class AblationRow:
    variant: str
    test_f1: float
    test_precision: float
    test_recall: float
    dev_f1: float | None


def run_ablation(plan: TrainPlan, cache: dict | None = None) -> list[AblationRow]:
    """Run each ablation variant with shared seeds and shared step-1 / coarse models."""
    cache = {} if cache is None else cache
    rows = []
    for name, variant in ablation_variants(plan):
        art = run_pipeline(variant, cache)
        rep = art.test_report
        dev_f1 = art.log[-1].dev_span_f1 if art.log else None
        rows.append(AblationRow(name, rep.f1 if rep else float("nan"), rep.precision if rep else float("nan"),
                                rep.recall if rep else float("nan"), dev_f1))
    return rows


def ablation_tsv(rows: list[AblationRow]) -> str:
    lines = ["variant\ttest_f1\ttest_precision\ttest_recall\tdev_f1"]
    for r in rows:
        dev = "" if r.dev_f1 is None else f"{r.dev_f1:.6f}"
        lines.append(f"{r.variant}\t{r.test_f1:.6f}\t{r.test_precision:.6f}\t{r.test_recall:.6f}\t{dev}")
    return "\n".join(lines) + "\n"


def metrics_tsv(rows: list[MetricRow]) -> str:
    lines = ["epoch\tstage\tcorpus\tloss\tdev_span_f1"]
    for r in rows:
        dev = "" if r.dev_span_f1 is None else f"{r.dev_span_f1:.6f}"
        lines.append(f"{r.epoch}\t{r.stage}\t{r.corpus}\t{r.loss:.6f}\t{dev}")
    return "\n".join(lines) + "\n"
