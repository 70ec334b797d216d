#!/usr/bin/env python3
"""
numerics.py — Numeric substrate for the SplitVFL testbed.

Everything is float64 numpy:
  DenseMatrix     a 2-D C-contiguous float64 ndarray (features, embeddings, weights, gradients)
  MLPModel        affine layers with ReLU between them, identity after the last
  softmax CE      per-sample and batched, returning probabilities and s - y errors
  SGDSchedule     plain SGD with cosine annealing
  make_rng        named, seedable random streams so every stochastic call is replayable

Weights are stored as (out_dim, in_dim) so that a layer computes x @ W.T + b and the
gradient w.r.t. its input is upstream @ W (the w^T eps form).
"""
from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from errors import ConfigurationError, DivergenceError, InputError, InternalError

DTYPE = np.float64


class DegenerateGradientWarning(UserWarning):
    """Cosine similarity requested on a zero-norm vector."""


# ─── Random streams ──────────────────────────────────────────────────────────

def make_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for a named stream of one seed.

    The same (seed, stream) pair always yields the same sequence, and adding a
    new stream never shifts the draws of an existing one.
    """
    digest = hashlib.sha256(f"{int(seed)}|{stream}".encode("utf-8")).digest()
    entropy = int.from_bytes(digest[:16], "little")
    return np.random.default_rng(np.random.SeedSequence(entropy))


def split_rng(rng: np.random.Generator, count: int) -> List[np.random.Generator]:
    """Split a generator into `count` independent children."""
    return list(rng.spawn(count))


# ─── DenseMatrix helpers ─────────────────────────────────────────────────────

def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array; 1-D input becomes a single row."""
    arr = np.ascontiguousarray(values, dtype=DTYPE)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise InputError(f"{name}: expected a 2-D matrix, got shape {arr.shape}")
    check_finite(arr, name)
    return arr


def as_vector(values, name: str = "vector") -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=DTYPE).reshape(-1)
    check_finite(arr, name)
    return arr


def check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"{name}: non-finite entries (NaN/Inf)")


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    """Bit-for-bit equality (distinguishes -0.0 from 0.0, unlike array_equal)."""
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


# ─── MLP model ───────────────────────────────────────────────────────────────

@dataclass
class MLPModel:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.weights) < 1:
            raise ConfigurationError("MLPModel needs at least one layer")
        if len(self.weights) != len(self.biases):
            raise ConfigurationError(
                f"{len(self.weights)} weight matrices but {len(self.biases)} bias vectors")
        self.weights = [np.ascontiguousarray(w, dtype=DTYPE) for w in self.weights]
        self.biases = [np.ascontiguousarray(b, dtype=DTYPE).reshape(-1) for b in self.biases]
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2:
                raise ConfigurationError(f"layer {l}: weight must be 2-D, got {w.shape}")
            if b.shape[0] != w.shape[0]:
                raise ConfigurationError(
                    f"layer {l}: bias length {b.shape[0]} != weight rows {w.shape[0]}")
            if l > 0 and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ConfigurationError(
                    f"layer {l}: input dim {w.shape[1]} does not chain with "
                    f"layer {l - 1} output dim {self.weights[l - 1].shape[0]}")

    @property
    def layer_count(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def dims(self) -> List[int]:
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    @property
    def hidden_widths(self) -> List[int]:
        return [w.shape[0] for w in self.weights[:-1]]

    def copy(self) -> "MLPModel":
        return MLPModel([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def identical_to(self, other: "MLPModel") -> bool:
        if self.layer_count != other.layer_count:
            return False
        return all(bits_equal(a, b) for a, b in zip(self.weights, other.weights)) and \
            all(bits_equal(a, b) for a, b in zip(self.biases, other.biases))


def init_mlp(dims: Sequence[int], rng: np.random.Generator) -> MLPModel:
    """Uniform(+-sqrt(6/fan_in)) weights, zero biases."""
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ConfigurationError(f"invalid layer dims {dims}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out, dtype=DTYPE))
    return MLPModel(weights, biases)


def identity_mlp(dim: int) -> MLPModel:
    return MLPModel([np.eye(dim, dtype=DTYPE)], [np.zeros(dim, dtype=DTYPE)])


@dataclass
class ForwardCache:
    inputs: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)


@dataclass
class ParamGrads:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def scaled(self, factor: float) -> "ParamGrads":
        return ParamGrads([w * factor for w in self.weights], [b * factor for b in self.biases])

    def added(self, other: "ParamGrads") -> "ParamGrads":
        return ParamGrads([a + b for a, b in zip(self.weights, other.weights)],
                          [a + b for a, b in zip(self.biases, other.biases)])


def mlp_forward(model: MLPModel, x) -> Tuple[np.ndarray, ForwardCache]:
    x = as_matrix(x, "mlp input")
    if x.shape[1] != model.input_dim:
        raise ConfigurationError(
            f"input has {x.shape[1]} columns, model expects {model.input_dim}")
    cache = ForwardCache()
    a = x
    last = model.layer_count - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        cache.inputs.append(a)
        z = a @ w.T + b
        cache.pre_activations.append(z)
        a = relu(z) if l < last else z
    check_finite(a, "mlp output")
    return a, cache


def mlp_backward(model: MLPModel, cache: ForwardCache, upstream) -> Tuple[ParamGrads, np.ndarray]:
    """Backprop `upstream` (d objective / d output) through a cached forward pass.

    Parameter gradients are sums over the rows of `upstream`; callers that
    optimise a batch mean pass an upstream already divided by the batch size.
    """
    g = as_matrix(upstream, "upstream gradient")
    L = model.layer_count
    if len(cache.inputs) != L or len(cache.pre_activations) != L:
        raise InternalError(f"stale cache: {len(cache.inputs)} cached layers for a {L}-layer model")
    if cache.pre_activations[-1].shape != g.shape:
        raise InternalError(
            f"stale cache: upstream shape {g.shape} != cached output shape "
            f"{cache.pre_activations[-1].shape}")
    weight_grads: List[np.ndarray] = [None] * L  # type: ignore[list-item]
    bias_grads: List[np.ndarray] = [None] * L  # type: ignore[list-item]
    for l in reversed(range(L)):
        w = model.weights[l]
        a_in = cache.inputs[l]
        if a_in.shape[1] != w.shape[1] or cache.pre_activations[l].shape[1] != w.shape[0]:
            raise InternalError(f"stale cache: layer {l} shapes do not match the model")
        if l < L - 1:
            g = g * (cache.pre_activations[l] > 0.0)
        weight_grads[l] = g.T @ a_in
        bias_grads[l] = g.sum(axis=0)
        g = g @ w
    return ParamGrads(weight_grads, bias_grads), g


# ─── Softmax cross-entropy ───────────────────────────────────────────────────

@dataclass
class SoftmaxCEResult:
    loss: float
    probabilities: np.ndarray
    error: np.ndarray


@dataclass
class BatchCE:
    losses: np.ndarray          # (B,)
    probabilities: np.ndarray   # (B, C)
    errors: np.ndarray          # (B, C), s - one_hot(y)

    @property
    def mean_loss(self) -> float:
        return float(self.losses.mean())


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(np.asarray(logits, dtype=DTYPE))
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def batch_softmax_cross_entropy(logits, labels) -> BatchCE:
    z = as_matrix(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    B, C = z.shape
    if C < 2:
        raise InputError(f"need at least 2 classes, got {C}")
    if labels.shape[0] != B:
        raise InputError(f"{labels.shape[0]} labels for {B} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise InputError(f"label out of range [0, {C})")
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    e = np.exp(shifted)
    total = e.sum(axis=1, keepdims=True)
    probs = e / total
    rows = np.arange(B)
    losses = np.log(total[:, 0]) - shifted[rows, labels]
    errors = probs.copy()
    errors[rows, labels] -= 1.0
    return BatchCE(losses=losses, probabilities=probs, errors=errors)


def softmax_cross_entropy(logits, label: int) -> SoftmaxCEResult:
    z = as_vector(logits, "logits")
    if z.shape[0] < 2:
        raise InputError(f"need at least 2 classes, got {z.shape[0]}")
    if not 0 <= int(label) < z.shape[0]:
        raise InputError(f"label {label} out of range [0, {z.shape[0]})")
    res = batch_softmax_cross_entropy(z.reshape(1, -1), [int(label)])
    return SoftmaxCEResult(loss=float(res.losses[0]),
                           probabilities=res.probabilities[0],
                           error=res.errors[0])


# ─── Cosine similarity ───────────────────────────────────────────────────────

def cosine_similarity(a, b) -> float:
    """a.b / (|a||b|); zero-norm input gives 0.0 and a DegenerateGradientWarning."""
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise InputError(f"cosine of vectors with lengths {a.shape[0]} and {b.shape[0]}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine similarity of a zero-norm vector; defined as 0",
                      DegenerateGradientWarning, stacklevel=2)
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_to_reference(reference, rows) -> Tuple[np.ndarray, np.ndarray]:
    """Cosine of every row against one reference vector.

    Returns (scores, degenerate) where degenerate rows (or a zero reference) score 0.
    """
    ref = as_vector(reference, "reference")
    mat = as_matrix(rows, "rows")
    if mat.shape[1] != ref.shape[0]:
        raise InputError(f"rows have {mat.shape[1]} columns, reference has {ref.shape[0]}")
    row_norms = np.linalg.norm(mat, axis=1)
    ref_norm = float(np.linalg.norm(ref))
    degenerate = (row_norms == 0.0) | (ref_norm == 0.0)
    denom = np.where(degenerate, 1.0, row_norms * (ref_norm if ref_norm > 0 else 1.0))
    scores = np.where(degenerate, 0.0, (mat @ ref) / denom)
    return np.clip(scores, -1.0, 1.0), degenerate


# ─── SGD with cosine annealing ───────────────────────────────────────────────

@dataclass
class SGDSchedule:
    base_lr: float
    total_steps: int
    current_step: int = 0

    def __post_init__(self) -> None:
        if not self.base_lr > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.base_lr}")
        if self.total_steps < 1:
            raise ConfigurationError(f"total_steps must be >= 1, got {self.total_steps}")

    def lr(self, step: int | None = None) -> float:
        t = self.current_step if step is None else step
        return 0.5 * self.base_lr * (1.0 + math.cos(math.pi * t / self.total_steps))


def sgd_step(model: MLPModel, grads: ParamGrads, schedule: SGDSchedule) -> MLPModel:
    """One SGD step at lr(t); returns the updated model and advances the schedule."""
    if schedule.current_step >= schedule.total_steps:
        raise ConfigurationError(
            f"schedule exhausted: step {schedule.current_step} of {schedule.total_steps}")
    if len(grads.weights) != model.layer_count:
        raise ConfigurationError("gradient layer count does not match the model")
    lr = schedule.lr()
    weights, biases = [], []
    for w, b, gw, gb in zip(model.weights, model.biases, grads.weights, grads.biases):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ConfigurationError(f"gradient shape {gw.shape} does not match weight {w.shape}")
        weights.append(w - lr * gw)
        biases.append(b - lr * gb)
    schedule.current_step += 1
    for w in weights:
        check_finite(w, "updated weights")
    return MLPModel(weights, biases)
