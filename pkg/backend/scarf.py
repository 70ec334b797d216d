#!/usr/bin/env python3
"""
scarf.py — Contrastive pretraining of a bottom model on unlabeled tabular features.

For each anchor row a corrupted view is built by resampling a random subset of
its features (each with probability corruption_rate) from the same column of a
random other row, i.e. from the empirical marginal. Anchor and view go through
encoder + projection head; InfoNCE over in-batch negatives pulls matching pairs
together. The projection head is thrown away, the encoder is returned.

No labels are touched: the input is the adversary's own feature slice.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from errors import ConfigurationError
from numerics import (
    DTYPE,
    MLPModel,
    SGDSchedule,
    init_mlp,
    make_rng,
    mlp_backward,
    mlp_forward,
    sgd_step,
)

log = logging.getLogger("scarf")

_NORM_EPS = 1e-12


@dataclass
class SSLConfig:
    corruption_rate: float = 0.6
    temperature: float = 0.07
    pretrain_epochs: int = 50
    projection_dim: int = 16
    batch_size: int = 256
    lr: float = 0.05

    def __post_init__(self) -> None:
        if not 0.0 < self.corruption_rate < 1.0:
            raise ConfigurationError(f"corruption_rate must be in (0,1), got {self.corruption_rate}")
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if self.pretrain_epochs < 1 or self.projection_dim < 1:
            raise ConfigurationError("pretrain_epochs and projection_dim must be >= 1")
        if self.batch_size < 4:
            raise ConfigurationError(f"SSL batch size must be >= 4, got {self.batch_size}")


def corrupt(features: np.ndarray, rows: np.ndarray, rate: float,
            rng: np.random.Generator) -> np.ndarray:
    """Corrupted views of features[rows]: masked entries come from random rows of the same column."""
    anchors = features[rows]
    mask = rng.random(anchors.shape) < rate
    donors = rng.integers(0, features.shape[0], size=anchors.shape)
    resampled = features[donors, np.arange(features.shape[1])[None, :]]
    return np.where(mask, resampled, anchors)


def _normalize(u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.maximum(np.linalg.norm(u, axis=1, keepdims=True), _NORM_EPS)
    return u / norms, norms


def _normalize_backward(z: np.ndarray, norms: np.ndarray, dz: np.ndarray) -> np.ndarray:
    return (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / norms


def info_nce(z_a: np.ndarray, z_b: np.ndarray, temperature: float
             ) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean InfoNCE of anchors vs views (rows already unit norm) and its gradients."""
    B = z_a.shape[0]
    logits = (z_a @ z_b.T) / temperature
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    total = e.sum(axis=1, keepdims=True)
    probs = e / total
    loss = float(np.mean(np.log(total[:, 0]) - np.diag(shifted)))
    ds = (probs - np.eye(B)) / B
    dz_a = ds @ z_b / temperature
    dz_b = ds.T @ z_a / temperature
    return loss, dz_a, dz_b


def _pair_step(encoder: MLPModel, head: MLPModel, anchors: np.ndarray, views: np.ndarray,
               temperature: float) -> Tuple[float, object, object]:
    both = np.vstack([anchors, views])
    h, enc_cache = mlp_forward(encoder, both)
    u, head_cache = mlp_forward(head, h)
    z, norms = _normalize(u)
    B = anchors.shape[0]
    loss, dz_a, dz_b = info_nce(z[:B], z[B:], temperature)
    du = _normalize_backward(z, norms, np.vstack([dz_a, dz_b]))
    head_grads, dh = mlp_backward(head, head_cache, du)
    enc_grads, _ = mlp_backward(encoder, enc_cache, dh)
    return loss, enc_grads, head_grads


def ssl_pretrain(bottom: MLPModel, features: np.ndarray, config: SSLConfig, seed: int,
                 losses: Optional[List[float]] = None) -> MLPModel:
    """Pretrained copy of `bottom`; per-epoch mean losses are appended to `losses`."""
    features = np.ascontiguousarray(features, dtype=DTYPE)
    n = features.shape[0]
    if n < 4:
        raise ConfigurationError(f"need at least 4 rows for contrastive pretraining, got {n}")
    if features.shape[1] != bottom.input_dim:
        raise ConfigurationError(
            f"features have {features.shape[1]} columns, bottom model expects {bottom.input_dim}")
    batch = min(config.batch_size, n)
    head_rng = make_rng(seed, "ssl/head")
    order_rng = make_rng(seed, "ssl/order")
    view_rng = make_rng(seed, "ssl/views")
    encoder = bottom.copy()
    head = init_mlp([bottom.output_dim, bottom.output_dim, config.projection_dim], head_rng)
    steps_per_epoch = n // batch
    total = config.pretrain_epochs * steps_per_epoch
    enc_sched = SGDSchedule(config.lr, total)
    head_sched = SGDSchedule(config.lr, total)
    for epoch in range(config.pretrain_epochs):
        order = order_rng.permutation(n)
        running = 0.0
        for s in range(steps_per_epoch):
            rows = order[s * batch:(s + 1) * batch]
            anchors = features[rows]
            views = corrupt(features, rows, config.corruption_rate, view_rng)
            loss, enc_grads, head_grads = _pair_step(encoder, head, anchors, views,
                                                     config.temperature)
            encoder = sgd_step(encoder, enc_grads, enc_sched)
            head = sgd_step(head, head_grads, head_sched)
            running += loss
        mean_loss = running / steps_per_epoch
        if losses is not None:
            losses.append(mean_loss)
        log.debug("ssl epoch %d/%d: loss %.5f", epoch + 1, config.pretrain_epochs, mean_loss)
    log.info("SSL pretraining done: %d epochs, final loss %.4f",
             config.pretrain_epochs, mean_loss)
    return encoder


def contrastive_loss(encoder: MLPModel, features: np.ndarray, config: SSLConfig, seed: int,
                     head: Optional[MLPModel] = None) -> float:
    """InfoNCE of one fixed corrupted batch; used to compare encoders."""
    rng = make_rng(seed, "ssl/eval-batch")
    n = features.shape[0]
    rows = rng.permutation(n)[:min(config.batch_size, n)]
    views = corrupt(features, rows, config.corruption_rate, rng)
    if head is None:
        head = init_mlp([encoder.output_dim, encoder.output_dim, config.projection_dim],
                        make_rng(seed, "ssl/head"))
    z_a, _ = _normalize(mlp_forward(head, mlp_forward(encoder, features[rows])[0])[0])
    z_b, _ = _normalize(mlp_forward(head, mlp_forward(encoder, views)[0])[0])
    return info_nce(z_a, z_b, config.temperature)[0]
