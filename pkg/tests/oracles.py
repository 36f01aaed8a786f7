"""Independent reference implementations used as test oracles."""
from __future__ import annotations

import math

import numpy as np

from edgelora.model import forward


def zscores(values):
    n = len(values)
    mean = sum(values) / n
    std = math.sqrt(sum((v - mean) ** 2 for v in values) / n)
    if std == 0:
        return [0.0] * n
    return [(v - mean) / std for v in values]


def brute_force_aggregate(per_adapter):
    """``per_adapter``: (round_id, class_ids, raw logit list) in any order.

    Returns (prediction, {class: score}).
    """
    table = {}
    for _, classes, logits in sorted(per_adapter, key=lambda t: t[0]):
        for c, z in zip(classes, zscores(list(logits))):
            table[c] = z
    best = None
    for c in sorted(table):
        if best is None or table[c] > table[best]:
            best = c
    return best, table


def bundle_logits(backbone, bundle, sample):
    return [(a.round_id, a.class_ids, forward(backbone, a, a.head, np.asarray(sample))[0].astype(float).tolist())
            for a in bundle]


def enumerate_metrics(truth, pred, labels):
    """Accuracy and macro scores by walking the pairs, float arithmetic, 0/0 -> 0."""
    n = len(truth)
    acc = sum(1 for t, p in zip(truth, pred) if t == p) / n
    ps, rs, fs = [], [], []
    for c in labels:
        tp = sum(1 for t, p in zip(truth, pred) if t == c and p == c)
        predicted = sum(1 for p in pred if p == c)
        actual = sum(1 for t in truth if t == c)
        prec = tp / predicted if predicted else 0.0
        rec = tp / actual if actual else 0.0
        ps.append(prec)
        rs.append(rec)
        fs.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    k = len(labels)
    return acc, sum(ps) / k, sum(rs) / k, sum(fs) / k


def shape_count(cfg):
    """Count by listing every tensor shape of the architecture by hand."""
    d, f, v, m = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.max_len
    shapes = [(v, d), (m, d)]
    for _ in range(cfg.n_layers):
        shapes += [(d, d), (d,)] * 4          # q, k, v, o
        shapes += [(f, d), (f,), (d, f), (d,)]  # feed-forward
        shapes += [(d,)] * 4                   # two norms
    return sum(math.prod(s) for s in shapes)


def adapter_count(cfg, rank, n_targets=2):
    """A is r x d and B is d x r for every adapted projection."""
    return cfg.n_layers * n_targets * 2 * rank * cfg.d_model
