#!/usr/bin/env python3
"""
defenses.py — Defenses as middleware on the SplitVFL protocol.

  kind      where it acts                       parameters (defaults)
  --------  ----------------------------------  -----------------------------------------
  identity  nowhere                             -
  dpsgd     returned gradients                  sigma_g (1e-3), clip (0.2)
  gc        returned gradients                  lambda (0.3) = fraction of entries kept
  abl       per-sample loss                     e_abl (5), gamma (0.5)
  anp       top model, after training           n_p (10), epsilon (0.4), steps (200), lr (0.1),
                                                alpha (0.2), fraction (0.01)
  vflip     embeddings at inference             hidden (64), epochs (100), threshold (3.0),
                                                lr (0.05), batch_size (256)
  ep        prediction vote at inference        z (1.0), trials (100)
  limit     embeddings + top first layer        -
  anomaly   adversary embeddings at inference   detector (pca_recon), threshold (3.0)

The pure transforms (dpsgd_transform, gc_transform, abl_loss_shape, anp_prune,
limit_constrain, anomaly_scores) are usable on their own; the Defense
subclasses wire them into the engine's hooks.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.decomposition import PCA

import envelope
from errors import ConfigurationError, InternalError
from numerics import (
    DTYPE,
    MLPModel,
    SGDSchedule,
    batch_softmax_cross_entropy,
    init_mlp,
    make_rng,
    mlp_backward,
    mlp_forward,
    sgd_step,
)
from splitvfl import Defense, classify

log = logging.getLogger("defenses")

KINDS = ("identity", "dpsgd", "gc", "abl", "anp", "vflip", "ep", "limit", "anomaly")
DETECTORS = ("pca_recon", "mahalanobis")

DEFAULT_PARAMS: Dict[str, Dict[str, Any]] = {
    "identity": {},
    "dpsgd": {"sigma_g": 1e-3, "clip": 0.2},
    "gc": {"lambda": 0.3},
    "abl": {"e_abl": 5, "gamma": 0.5},
    "anp": {"n_p": 10, "epsilon": 0.4, "steps": 200, "lr": 0.1, "alpha": 0.2, "fraction": 0.01},
    "vflip": {"hidden": 64, "epochs": 100, "threshold": 3.0, "lr": 0.05, "batch_size": 256},
    "ep": {"z": 1.0, "trials": 100},
    "limit": {},
    "anomaly": {"detector": "pca_recon", "threshold": 3.0},
}


# ─── Gradient transforms ─────────────────────────────────────────────────────

def dpsgd_transform(dh: np.ndarray, clip: float, sigma_g: float,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Per-row norm clip to `clip` plus N(0, sigma_g^2) noise. Works on a vector or a batch."""
    if not clip > 0:
        raise ConfigurationError(f"clip must be > 0, got {clip}")
    if sigma_g < 0:
        raise ConfigurationError(f"sigma_g must be >= 0, got {sigma_g}")
    g = np.asarray(dh, dtype=DTYPE)
    rows = np.atleast_2d(g)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        factor = np.where(norms > clip, clip / np.where(norms == 0, 1.0, norms), 1.0)
    out = rows * factor
    if sigma_g > 0:
        if rng is None:
            raise ConfigurationError("dpsgd noise needs an rng")
        out = out + rng.normal(0.0, sigma_g, size=out.shape)
    return out.reshape(g.shape)


def kept_count(length: int, lam: float) -> int:
    # 1e-9 absorbs products like 0.3 * 10 = 3.0000000000000004
    return min(length, max(1, int(math.ceil(lam * length - 1e-9))))


def gc_transform(dh: np.ndarray, lam: float) -> np.ndarray:
    """Keep the ceil(lam * len) largest-magnitude entries of each row (ties: lower index)."""
    if not 0.0 < lam <= 1.0:
        raise ConfigurationError(f"lambda must be in (0,1], got {lam}")
    g = np.asarray(dh, dtype=DTYPE)
    if lam == 1.0:
        return g
    rows = np.atleast_2d(g)
    keep = kept_count(rows.shape[1], lam)
    order = np.argsort(-np.abs(rows), axis=1, kind="stable")[:, :keep]
    mask = np.zeros(rows.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return np.where(mask, rows, 0.0).reshape(g.shape)


# ─── ABL loss shaping ────────────────────────────────────────────────────────

def abl_loss_shape(losses: np.ndarray, gamma: float, epoch: int, e_abl: int,
                   flagged: Optional[np.ndarray] = None
                   ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(shaped losses, gradient multipliers, below-gamma mask) for one batch.

    Epochs <= e_abl: loss' = |loss - gamma| + gamma, i.e. multiplier sign(loss - gamma).
    Later epochs: flagged samples get loss' = -loss (multiplier -1), others unchanged.
    """
    losses = np.asarray(losses, dtype=DTYPE)
    below = losses < gamma
    if epoch <= e_abl:
        shaped = np.abs(losses - gamma) + gamma
        multipliers = np.sign(losses - gamma)
    else:
        flags = np.zeros(losses.shape, dtype=bool) if flagged is None else np.asarray(flagged, bool)
        multipliers = np.where(flags, -1.0, 1.0)
        shaped = losses * multipliers
    return shaped, multipliers, below


# ─── ANP pruning ─────────────────────────────────────────────────────────────

def _scaled_top(top: MLPModel, scales: Sequence[np.ndarray]) -> MLPModel:
    """Top model with hidden layer l's outputs multiplied by scales[l]."""
    weights = [w.copy() for w in top.weights]
    for l, s in enumerate(scales):
        weights[l + 1] = weights[l + 1] * s[None, :]
    return MLPModel(weights, [b.copy() for b in top.biases])


def _scale_gradients(top: MLPModel, scales: Sequence[np.ndarray], inputs: np.ndarray,
                     labels: np.ndarray) -> Tuple[float, List[np.ndarray]]:
    scaled = _scaled_top(top, scales)
    logits, cache = mlp_forward(scaled, inputs)
    ce = batch_softmax_cross_entropy(logits, labels)
    grads, _ = mlp_backward(scaled, cache, ce.errors / len(labels))
    out = [np.sum(grads.weights[l + 1] * top.weights[l + 1], axis=0) for l in range(len(scales))]
    return ce.mean_loss, out


def prune_neurons(top: MLPModel, neurons: Sequence[Tuple[int, int]]) -> MLPModel:
    """Zero the outgoing weights of (hidden layer, neuron) pairs."""
    weights = [w.copy() for w in top.weights]
    for layer, idx in neurons:
        weights[layer + 1][:, idx] = 0.0
    return MLPModel(weights, [b.copy() for b in top.biases])


def anp_prune(top: MLPModel, clean_embeddings: np.ndarray, labels: np.ndarray, n_p: int,
              rng: np.random.Generator, epsilon: float = 0.4, steps: int = 200,
              lr: float = 0.1, alpha: float = 0.2) -> Tuple[MLPModel, List[np.ndarray]]:
    """Adversarial neuron pruning of the top model's hidden neurons.

    Masks m in [0,1] are optimised to keep the clean loss low both as-is and
    under a worst-case multiplicative neuron perturbation (1 + delta),
    |delta| <= epsilon. The n_p neurons with the smallest mask are pruned.
    """
    hidden = top.hidden_widths
    total = int(sum(hidden))
    if n_p < 0:
        raise ConfigurationError(f"n_p must be >= 0, got {n_p}")
    if n_p == 0:
        return top.copy(), [np.ones(h, dtype=DTYPE) for h in hidden]
    if n_p >= total:
        raise ConfigurationError(f"cannot prune {n_p} of {total} hidden neurons")
    inputs = np.asarray(clean_embeddings, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    masks = [np.ones(h, dtype=DTYPE) for h in hidden]
    for _ in range(steps):
        deltas = [rng.uniform(-epsilon, epsilon, size=h) for h in hidden]
        _, g = _scale_gradients(top, [m * (1 + d) for m, d in zip(masks, deltas)], inputs, labels)
        deltas = [np.clip(d + epsilon * np.sign(gs * m), -epsilon, epsilon)
                  for d, gs, m in zip(deltas, g, masks)]
        _, g_nat = _scale_gradients(top, masks, inputs, labels)
        _, g_rob = _scale_gradients(top, [m * (1 + d) for m, d in zip(masks, deltas)],
                                    inputs, labels)
        masks = [np.clip(m - lr * (alpha * gn + (1 - alpha) * gr * (1 + d)), 0.0, 1.0)
                 for m, gn, gr, d in zip(masks, g_nat, g_rob, deltas)]
    flat = np.concatenate(masks)
    owners = [(l, j) for l, h in enumerate(hidden) for j in range(h)]
    lowest = np.argsort(flat, kind="stable")[:n_p]
    pruned = prune_neurons(top, [owners[i] for i in lowest])
    log.info("ANP: pruned %d of %d hidden neurons (mask range %.3f..%.3f)",
             n_p, total, float(flat.min()), float(flat.max()))
    return pruned, masks


# ─── LIMIT ───────────────────────────────────────────────────────────────────

def limit_embeddings(embeddings: List[np.ndarray], active_index: int,
                     adversary_index: int) -> List[np.ndarray]:
    """Rescale the adversary's rows so their mean norm equals the active party's."""
    if len(embeddings) < 2:
        raise ConfigurationError("LIMIT needs at least two parties")
    out = list(embeddings)
    act = np.linalg.norm(embeddings[active_index], axis=1).mean()
    adv = np.linalg.norm(embeddings[adversary_index], axis=1).mean()
    if adv > 0 and act != adv:
        out[adversary_index] = embeddings[adversary_index] * (act / adv)
    return out


def limit_weights(top: MLPModel, active_index: int, adversary_index: int,
                  dims: Sequence[int]) -> MLPModel:
    """Rescale the first-layer column block of the adversary to the active block's Frobenius norm."""
    bounds = np.cumsum([0] + list(dims))
    adv = slice(int(bounds[adversary_index]), int(bounds[adversary_index + 1]))
    w = top.weights[0]
    w_act = np.linalg.norm(w[:, bounds[active_index]:bounds[active_index + 1]])
    w_adv = np.linalg.norm(w[:, adv])
    if w_adv == 0 or w_act == w_adv:
        return top
    w = w.copy()
    w[:, adv] *= w_act / w_adv
    return MLPModel([w] + [x.copy() for x in top.weights[1:]], [b.copy() for b in top.biases])


def limit_constrain(embeddings: List[np.ndarray], top: MLPModel, active_index: int,
                    adversary_index: int, dims: Sequence[int]
                    ) -> Tuple[List[np.ndarray], MLPModel]:
    return (limit_embeddings(embeddings, active_index, adversary_index),
            limit_weights(top, active_index, adversary_index, dims))


# ─── Anomaly detectors ───────────────────────────────────────────────────────

@dataclass
class AnomalyScore:
    scores: np.ndarray
    population_mean: float
    population_std: float
    detector: str

    @property
    def threshold_1std(self) -> float:
        return self.population_mean + self.population_std


class PCADetector:
    """Reconstruction error from the principal subspace explaining 95% of variance."""

    name = "pca_recon"

    def __init__(self, variance: float = 0.95):
        self.variance = variance
        self.pca: Optional[PCA] = None

    def fit(self, reference: np.ndarray) -> "PCADetector":
        self.pca = PCA(n_components=self.variance, svd_solver="full").fit(reference)
        return self

    def score(self, rows: np.ndarray) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(rows, dtype=DTYPE))
        recon = self.pca.inverse_transform(self.pca.transform(rows))
        return np.linalg.norm(rows - recon, axis=1)

    def sections(self) -> Dict[str, np.ndarray]:
        return {"pca/mean": self.pca.mean_, "pca/components": self.pca.components_}


class MahalanobisDetector:
    """sqrt((e - mu)^T S^-1 (e - mu)) with S ridge-regularised by 1e-6 * trace(S) / d."""

    name = "mahalanobis"

    def __init__(self, ridge: float = 1e-6):
        self.ridge = ridge
        self.mean: Optional[np.ndarray] = None
        self.precision: Optional[np.ndarray] = None

    def fit(self, reference: np.ndarray) -> "MahalanobisDetector":
        self.mean = reference.mean(axis=0)
        cov = np.atleast_2d(np.cov(reference, rowvar=False))
        d = cov.shape[0]
        cov = cov + np.eye(d) * self.ridge * np.trace(cov) / d
        try:
            self.precision = np.linalg.inv(cov)
        except np.linalg.LinAlgError as e:
            raise InternalError(f"singular covariance after ridge: {e}") from e
        if not np.all(np.isfinite(self.precision)):
            raise InternalError("singular covariance after ridge")
        return self

    def score(self, rows: np.ndarray) -> np.ndarray:
        diff = np.atleast_2d(np.asarray(rows, dtype=DTYPE)) - self.mean
        return np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", diff, self.precision, diff), 0.0))

    def sections(self) -> Dict[str, np.ndarray]:
        return {"mahalanobis/mean": self.mean, "mahalanobis/precision": self.precision}


def make_detector(detector: str):
    if detector == "pca_recon":
        return PCADetector()
    if detector == "mahalanobis":
        return MahalanobisDetector()
    raise ConfigurationError(f"unknown detector {detector!r} (expected one of {DETECTORS})")


def fit_detector(reference: np.ndarray, detector: str):
    reference = np.atleast_2d(np.asarray(reference, dtype=DTYPE))
    if reference.shape[0] < 10 * reference.shape[1]:
        raise ConfigurationError(
            f"reference population of {reference.shape[0]} rows is below 10x the "
            f"embedding dim {reference.shape[1]}")
    return make_detector(detector).fit(reference)


def anomaly_scores(embeddings: np.ndarray, reference: np.ndarray, detector: str,
                   fitted=None) -> AnomalyScore:
    """Scores of `embeddings` plus population stats of the reference's own scores."""
    model = fitted if fitted is not None else fit_detector(reference, detector)
    population = model.score(reference)
    return AnomalyScore(model.score(embeddings), float(population.mean()),
                        float(population.std()), model.name)


def export_detector(path: Union[str, Path], detector, population: AnomalyScore) -> Path:
    sections = dict(detector.sections())
    sections["population"] = np.array([population.population_mean, population.population_std])
    return envelope.write_envelope(path, envelope.MAGIC_TRACE, sections)


# ─── Defense middleware ──────────────────────────────────────────────────────

class DPSGDDefense(Defense):
    kind = "dpsgd"

    def __init__(self, sigma_g: float, clip: float, seed: int):
        dpsgd_transform(np.zeros(1), clip, sigma_g, make_rng(seed, "defense/dpsgd/check"))
        self.sigma_g = sigma_g
        self.clip = clip
        self.rng = make_rng(seed, "defense/dpsgd")

    def transform_gradients(self, dh, sample_ids, epoch):
        return dpsgd_transform(dh, self.clip, self.sigma_g, self.rng)


class GCDefense(Defense):
    kind = "gc"

    def __init__(self, lam: float):
        gc_transform(np.zeros(1), lam)
        self.lam = lam

    def transform_gradients(self, dh, sample_ids, epoch):
        return gc_transform(dh, self.lam)


class ABLDefense(Defense):
    kind = "abl"

    def __init__(self, e_abl: int, gamma: float, sample_count: int, epochs: int):
        if not 1 <= e_abl < epochs:
            raise ConfigurationError(f"e_abl must be in [1, {epochs}), got {e_abl}")
        self.e_abl = e_abl
        self.gamma = gamma
        self.persistent = np.ones(sample_count, dtype=bool)
        self.flagged = np.zeros(sample_count, dtype=bool)

    def loss_multipliers(self, losses, sample_ids, epoch):
        shaped, mult, below = abl_loss_shape(losses, self.gamma, epoch, self.e_abl,
                                             self.flagged[sample_ids])
        if epoch <= self.e_abl:
            self.persistent[sample_ids] &= below
        return mult

    def on_epoch_start(self, epoch: int) -> None:
        if epoch == self.e_abl + 1:
            self.flagged = self.persistent.copy()
            log.info("ABL: %d samples flagged for unlearning", int(self.flagged.sum()))

    @property
    def flagged_ids(self) -> np.ndarray:
        return np.flatnonzero(self.flagged)

    def summary(self) -> Dict[str, float]:
        return {"abl_flagged": float(self.flagged.sum())}


class ANPDefense(Defense):
    kind = "anp"

    def __init__(self, n_p: int, seed: int, epsilon=0.4, steps=200, lr=0.1, alpha=0.2,
                 fraction=0.01):
        if n_p < 0 or not 0 < fraction <= 1:
            raise ConfigurationError("anp: n_p must be >= 0 and fraction in (0,1]")
        self.n_p, self.epsilon, self.steps, self.lr, self.alpha = n_p, epsilon, steps, lr, alpha
        self.fraction = fraction
        self.seed = seed
        self.masks: List[np.ndarray] = []

    def bind(self, system, partition):
        total = sum(system.top_model.hidden_widths)
        if self.n_p and self.n_p >= total:
            raise ConfigurationError(f"cannot prune {self.n_p} of {total} hidden neurons")

    def after_training(self, system, record):
        if record is None:
            raise InternalError("ANP needs the final epoch's embeddings")
        rng = make_rng(self.seed, "defense/anp")
        n = record.labels.shape[0]
        count = max(1, int(math.ceil(self.fraction * n)))
        rows = np.sort(rng.choice(n, size=count, replace=False))
        inputs = np.hstack([e[rows] for e in record.embeddings])
        system.top_model, self.masks = anp_prune(
            system.top_model, inputs, record.labels[rows], self.n_p, rng,
            self.epsilon, self.steps, self.lr, self.alpha)

    def summary(self):
        return {"anp_pruned": float(self.n_p)}


class MAE:
    """Masked auto-encoder over standardized concatenated embeddings."""

    def __init__(self, model: MLPModel, mean: np.ndarray, std: np.ndarray, dims: Sequence[int]):
        self.model = model
        self.mean = mean
        self.std = std
        self.bounds = np.cumsum([0] + list(dims))

    def block(self, k: int) -> slice:
        return slice(int(self.bounds[k]), int(self.bounds[k + 1]))

    def reconstruct(self, concatenated: np.ndarray, k: int) -> np.ndarray:
        """Standardized reconstruction of party k's block with that block masked."""
        x = (concatenated - self.mean) / self.std
        x[:, self.block(k)] = 0.0
        return mlp_forward(self.model, x)[0][:, self.block(k)]

    def deviation(self, concatenated: np.ndarray, k: int) -> np.ndarray:
        target = ((concatenated - self.mean) / self.std)[:, self.block(k)]
        return np.linalg.norm(self.reconstruct(concatenated, k) - target, axis=1)


def vflip_fit(embeddings: Sequence[np.ndarray], seed: int, hidden: int = 64, epochs: int = 100,
              lr: float = 0.05, batch_size: int = 256, threshold: float = 3.0
              ) -> Tuple[MAE, np.ndarray]:
    """Fit the MAE on per-party embeddings; returns (mae, per-party deviation threshold)."""
    if len(embeddings) < 2:
        raise ConfigurationError("VFLIP needs at least two parties to mask one")
    dims = [e.shape[1] for e in embeddings]
    x = np.hstack(embeddings).astype(DTYPE)
    n, D = x.shape
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), 1e-8)
    xs = (x - mean) / std
    rng = make_rng(seed, "defense/vflip")
    model = init_mlp([D, hidden, D], rng)
    K = len(dims)
    batch = min(batch_size, n)
    steps = int(math.ceil(n / batch))
    sched = SGDSchedule(lr, epochs * steps * K)
    bounds = np.cumsum([0] + dims)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(steps):
            rows = xs[order[s * batch:(s + 1) * batch]]
            for k in range(K):
                lo, hi = bounds[k], bounds[k + 1]
                masked = rows.copy()
                masked[:, lo:hi] = 0.0
                out, cache = mlp_forward(model, masked)
                err = np.zeros_like(out)
                err[:, lo:hi] = 2.0 * (out[:, lo:hi] - rows[:, lo:hi]) / (rows.shape[0] * (hi - lo))
                grads, _ = mlp_backward(model, cache, err)
                model = sgd_step(model, grads, sched)
    mae = MAE(model, mean, std, dims)
    thresholds = np.empty(K, dtype=DTYPE)
    for k in range(K):
        dev = mae.deviation(x, k)
        thresholds[k] = dev.mean() + threshold * dev.std()
    log.info("VFLIP fitted on %d embeddings; thresholds %s", n, np.round(thresholds, 4).tolist())
    return mae, thresholds


def vflip_filter(mae: MAE, thresholds: np.ndarray, embeddings: List[np.ndarray],
                 parties: Sequence[int]) -> Tuple[List[np.ndarray], np.ndarray]:
    """Replace flagged party embeddings by their reconstruction. Returns (embeddings, flags[n, K])."""
    x = np.hstack(embeddings)
    out = list(embeddings)
    flags = np.zeros((x.shape[0], len(embeddings)), dtype=bool)
    for k in parties:
        dev = mae.deviation(x, k)
        flagged = dev > thresholds[k]
        flags[:, k] = flagged
        if flagged.any():
            sl = mae.block(k)
            recon = mae.reconstruct(x[flagged], k) * mae.std[sl] + mae.mean[sl]
            fixed = embeddings[k].copy()
            fixed[flagged] = recon
            out[k] = fixed
    return out, flags


class VFLIPDefense(Defense):
    kind = "vflip"

    def __init__(self, seed: int, hidden=64, epochs=100, threshold=3.0, lr=0.05, batch_size=256):
        self.seed = seed
        self.hidden, self.epochs, self.threshold = hidden, epochs, threshold
        self.lr, self.batch_size = lr, batch_size
        self.mae: Optional[MAE] = None
        self.thresholds: Optional[np.ndarray] = None
        self.checked = 0
        self.flagged = 0

    def bind(self, system, partition):
        if partition.party_count < 2:
            raise ConfigurationError("VFLIP needs at least two parties")
        self.active_index = partition.active_index

    def after_training(self, system, record):
        if record is None:
            raise InternalError("VFLIP needs the final epoch's embeddings")
        self.mae, self.thresholds = vflip_fit(record.embeddings, self.seed, self.hidden,
                                              self.epochs, self.lr, self.batch_size,
                                              self.threshold)

    def transform_embeddings(self, embeddings, phase, system):
        if phase != "inference" or self.mae is None:
            return embeddings
        passive = [k for k in range(len(embeddings)) if k != self.active_index]
        out, flags = vflip_filter(self.mae, self.thresholds, embeddings, passive)
        self.checked += flags.shape[0] * len(passive)
        self.flagged += int(flags.sum())
        return out

    def reset_counts(self) -> None:
        self.checked = 0
        self.flagged = 0

    def summary(self):
        return {"vflip_flag_rate": self.flagged / self.checked if self.checked else 0.0}


def ep_predict(top: MLPModel, embeddings: List[np.ndarray], adversary_index: int, z: float,
               adversary_std: np.ndarray, rng: np.random.Generator, trials: int = 100,
               class_count: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Majority vote over `trials` passes with Gaussian noise on the adversary's embeddings."""
    if z < 0 or trials < 1:
        raise ConfigurationError("EP needs z >= 0 and trials >= 1")
    if z == 0:
        return classify(top, embeddings)
    C = class_count or top.output_dim
    n = embeddings[0].shape[0]
    votes = np.zeros((n, C), dtype=np.int64)
    noisy = list(embeddings)
    scale = z * np.asarray(adversary_std, dtype=DTYPE)
    rows = np.arange(n)
    for _ in range(trials):
        noisy[adversary_index] = embeddings[adversary_index] + \
            rng.normal(0.0, 1.0, size=embeddings[adversary_index].shape) * scale
        cls, _ = classify(top, noisy)
        votes[rows, cls] += 1
    return np.argmax(votes, axis=1), votes / trials


class EPDefense(Defense):
    kind = "ep"

    def __init__(self, z: float, trials: int, seed: int):
        if z < 0 or trials < 1:
            raise ConfigurationError("EP needs z >= 0 and trials >= 1")
        self.z = z
        self.trials = trials
        self.seed = seed
        self.calls = 0
        self.adversary_std: Optional[np.ndarray] = None

    def after_training(self, system, record):
        if record is None:
            raise InternalError("EP needs the final epoch's embeddings")
        self.adversary_std = record.embeddings[system.adversary_index].std(axis=0)

    def vote(self, system, embeddings):
        if self.z == 0:
            return None
        if self.adversary_std is None:
            raise InternalError("EP used before training finished")
        rng = make_rng(self.seed, f"defense/ep/{self.calls}")
        self.calls += 1
        return ep_predict(system.top_model, embeddings, system.adversary_index, self.z,
                          self.adversary_std, rng, self.trials, system.class_count)


class LIMITDefense(Defense):
    kind = "limit"

    def bind(self, system, partition):
        if partition.party_count < 2:
            raise ConfigurationError("LIMIT needs at least two parties")
        self.active_index = partition.active_index
        self.dims = partition.embedding_dims

    def transform_embeddings(self, embeddings, phase, system):
        return limit_embeddings(embeddings, self.active_index, system.adversary_index)

    def after_top_step(self, system):
        system.top_model = limit_weights(system.top_model, self.active_index,
                                         system.adversary_index, self.dims)


class AnomalyDefense(Defense):
    """Replaces adversary embeddings scoring above mean + threshold * std by the population mean."""

    kind = "anomaly"

    def __init__(self, detector: str, threshold: float):
        if detector not in DETECTORS:
            raise ConfigurationError(f"unknown detector {detector!r}")
        self.detector_kind = detector
        self.threshold = threshold
        self.detector = None
        self.cutoff = math.inf
        self.center: Optional[np.ndarray] = None
        self.checked = 0
        self.flagged = 0

    def after_training(self, system, record):
        if record is None:
            raise InternalError("anomaly filter needs the final epoch's embeddings")
        reference = record.embeddings[system.adversary_index]
        self.detector = fit_detector(reference, self.detector_kind)
        population = anomaly_scores(reference[:1], reference, self.detector_kind, self.detector)
        self.cutoff = population.population_mean + self.threshold * population.population_std
        self.center = reference.mean(axis=0)

    def transform_embeddings(self, embeddings, phase, system):
        if phase != "inference" or self.detector is None:
            return embeddings
        adv = system.adversary_index
        scores = self.detector.score(embeddings[adv])
        flagged = scores > self.cutoff
        self.checked += flagged.size
        self.flagged += int(flagged.sum())
        if not flagged.any():
            return embeddings
        out = list(embeddings)
        fixed = embeddings[adv].copy()
        fixed[flagged] = self.center
        out[adv] = fixed
        return out

    def summary(self):
        return {"anomaly_flag_rate": self.flagged / self.checked if self.checked else 0.0}


# ─── Construction from config ────────────────────────────────────────────────

def resolve_params(kind: str, params: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    if kind not in KINDS:
        raise ConfigurationError(f"unknown defense kind {kind!r} (expected one of {KINDS})")
    resolved = dict(DEFAULT_PARAMS[kind])
    for key, value in (params or {}).items():
        if key not in resolved:
            raise ConfigurationError(f"defense {kind}: unknown parameter {key!r}")
        resolved[key] = value
    return resolved


def build_defense(kind: str, params: Optional[Dict[str, Any]], seed: int,
                  sample_count: int, epochs: int) -> Defense:
    p = resolve_params(kind, params)
    if kind == "identity":
        return Defense()
    if kind == "dpsgd":
        return DPSGDDefense(float(p["sigma_g"]), float(p["clip"]), seed)
    if kind == "gc":
        return GCDefense(float(p["lambda"]))
    if kind == "abl":
        return ABLDefense(int(p["e_abl"]), float(p["gamma"]), sample_count, epochs)
    if kind == "anp":
        return ANPDefense(int(p["n_p"]), seed, float(p["epsilon"]), int(p["steps"]),
                          float(p["lr"]), float(p["alpha"]), float(p["fraction"]))
    if kind == "vflip":
        return VFLIPDefense(seed, int(p["hidden"]), int(p["epochs"]), float(p["threshold"]),
                            float(p["lr"]), int(p["batch_size"]))
    if kind == "ep":
        return EPDefense(float(p["z"]), int(p["trials"]), seed)
    if kind == "limit":
        return LIMITDefense()
    return AnomalyDefense(str(p["detector"]), float(p["threshold"]))
