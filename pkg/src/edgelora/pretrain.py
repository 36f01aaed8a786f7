"""Label-free masked-token pretraining for the backbone.

Stands in for the generic language-model pretraining that the compact
backbones would otherwise inherit: a fraction of the non-special tokens of
each sequence is replaced by ``<unk>`` and predicted back through the tied
token-embedding matrix. The CLS state is trained to predict the bag of
tokens in its sequence, so the position the classifier pools carries a
summary of the whole flow before any labels are seen.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dataset import CLS_ID, PAD_ID, UNK_ID
from .errors import ConfigError, DataError
from .model import Backbone, ClassificationHead, Classifier
from .nn import AdamW, Parameter, cross_entropy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainSpec:
    epochs: int = 3
    lr: float = 1e-3
    batch_size: int = 16
    mask_prob: float = 0.15
    summary_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("pretraining epochs must be >= 0")
        if not 0.0 < self.mask_prob < 1.0:
            raise ConfigError("mask probability must lie in (0, 1)")


def mask_tokens(tokens: np.ndarray, prob: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Masked copy of ``tokens`` and the boolean mask of positions to predict.

    Every sequence with a maskable token gets at least one masked position.
    """
    maskable = (tokens != PAD_ID) & (tokens != CLS_ID)
    chosen = (rng.random(tokens.shape) < prob) & maskable
    for i in np.nonzero(~chosen.any(axis=1) & maskable.any(axis=1))[0]:
        cols = np.nonzero(maskable[i])[0]
        chosen[i, cols[int(rng.integers(len(cols)))]] = True
    masked = tokens.copy()
    masked[chosen] = UNK_ID
    return masked, chosen


def bag_targets(tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    """Row-normalised token counts over the non-special positions."""
    keep = (tokens != PAD_ID) & (tokens != CLS_ID)
    target = np.zeros((len(tokens), vocab_size))
    rows = np.repeat(np.arange(len(tokens)), tokens.shape[1]).reshape(tokens.shape)
    np.add.at(target, (rows[keep], tokens[keep]), 1.0)
    totals = target.sum(axis=1, keepdims=True)
    return target / np.where(totals > 0, totals, 1.0)


def soft_cross_entropy(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = len(logits)
    loss = float(-(target * logp).sum() / n)
    return loss, (np.exp(logp) * target.sum(axis=1, keepdims=True) - target) / n


def pretrain(backbone: Backbone, tokens: np.ndarray, spec: PretrainSpec, trim=None) -> list[float]:
    """Masked-token pretraining in place; returns the mean loss of each epoch."""
    if len(tokens) == 0:
        raise DataError("no sequences to pretrain on")
    backbone.unfreeze()
    d = backbone.config.d_model
    dtype = backbone.params["tok_emb"].value.dtype
    dummy = ClassificationHead((0,), Parameter(np.zeros((1, d), dtype=dtype), trainable=False),
                               Parameter(np.zeros(1, dtype=dtype), trainable=False))
    model = Classifier(backbone, dummy)
    table = backbone.params["tok_emb"]
    opt = AdamW(list(backbone.params.values()), lr=spec.lr)
    rng = np.random.default_rng([spec.seed, 0x4D4C4D])
    losses = []
    for epoch in range(spec.epochs):
        order = rng.permutation(len(tokens))
        total, count = 0.0, 0
        for start in range(0, len(tokens), spec.batch_size):
            batch = tokens[order[start:start + spec.batch_size]]
            if trim is not None:
                batch = trim(batch)
            masked, chosen = mask_tokens(batch, spec.mask_prob, rng)
            if not chosen.any():
                continue
            states = model.encode(masked)
            h = states[chosen]
            loss, grad = cross_entropy(h @ table.value.T, batch[chosen])
            opt.zero_grad()
            d_states = np.zeros_like(states)
            d_states[chosen] = grad @ table.value
            table.grad += (grad.T @ h).astype(table.grad.dtype)
            if spec.summary_weight:
                cls = states[:, 0]
                bag_loss, bag_grad = soft_cross_entropy(cls @ table.value.T,
                                                        bag_targets(batch, table.shape[0]))
                bag_grad = spec.summary_weight * bag_grad
                d_states[:, 0] += bag_grad @ table.value
                table.grad += (bag_grad.T @ cls).astype(table.grad.dtype)
                loss += spec.summary_weight * bag_loss
            model.backward_encoder(d_states)
            opt.step()
            total += loss * len(h)
            count += len(h)
        losses.append(total / max(count, 1))
        log.info("pretrain epoch %d loss %.4f", epoch + 1, losses[-1])
    return losses
