"""Shared oracles for the test-suite (finite differences, brute-force scorers)."""

import numpy as np

from cofiner.model import ModelConfig, TokenClassifier

FD_STEP = 1e-3


def random_model(rng, num_tags=5, dtype=np.float64, dropout=0.0, scale=0.5):
    cfg = ModelConfig(vocab_size=int(rng.integers(3, 12)), embed_dim=int(rng.integers(1, 4)),
                      window=int(rng.integers(0, 3)), hidden_dim=int(rng.integers(2, 6)),
                      num_tags=num_tags, dropout=dropout, seed=int(rng.integers(1 << 30)))
    model = TokenClassifier(cfg, dtype=dtype)
    for v in model.params.values():
        v[...] = rng.normal(0, scale, v.shape)
    return model


def random_features(rng, config, n_tokens):
    return rng.integers(0, config.vocab_size, (n_tokens, config.width))


def random_stochastic(rng, rows, cols):
    m = rng.random((rows, cols)) + 0.05
    return m / m.sum(axis=1, keepdims=True)


def central_diff(f, x, h=FD_STEP):
    """Central finite-difference gradient of scalar ``f`` w.r.t. array ``x`` (mutated in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def rel_error(analytic, numeric):
    """Max absolute deviation relative to the gradient's largest magnitude."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def brute_span_f1(gold_seqs, pred_seqs):
    """Independent span matcher: walk tags, collect (type, start, end) sets."""
    def spans(tags):
        out = set()
        i = 0
        n = len(tags)
        fixed = list(tags)
        # repair: I-x not continuing x becomes B-x
        for j in range(n):
            t = fixed[j]
            if t and t % 2 == 0:
                prev = fixed[j - 1] if j else 0
                if prev == 0 or (prev - 1) // 2 != (t - 1) // 2:
                    fixed[j] = t - 1
        while i < n:
            t = fixed[i]
            if t == 0:
                i += 1
                continue
            typ = (t - 1) // 2
            j = i + 1
            while j < n and fixed[j] == 2 + 2 * typ:
                j += 1
            out.add((typ, i, j))
            i = j
        return out

    gold = pred = corr = 0
    for g, p in zip(gold_seqs, pred_seqs):
        gs, ps = spans(g), spans(p)
        gold += len(gs)
        pred += len(ps)
        corr += len(gs & ps)
    P = corr / pred if pred else 0.0
    R = corr / gold if gold else 0.0
    F = 2 * P * R / (P + R) if P + R else 0.0
    return P, R, F, (gold, pred, corr)
