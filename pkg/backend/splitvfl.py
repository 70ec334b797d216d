#!/usr/bin/env python3
"""
splitvfl.py — The SplitVFL protocol engine.

One training round per batch:
  1. every party k runs its bottom model f_k on its own feature slice -> h_k
  2. the adversary hook (if any) may substitute its own slice of the batch
  3. inference-time/embedding defenses transform the submitted embeddings
  4. the active party concatenates h_1 || ... || h_K, runs the top model g and the CE loss
  5. loss-shaping defenses rescale the per-sample errors, the top model backprops -> dh
  6. gradient defenses transform dh, which is sliced per party and returned
  7. every party backprops its slice and steps; the top model steps
  8. the adversary hook receives its returned slice

Epoch numbers handed to hooks are 1-based (epoch 1 is the first pass); the
`epoch_index` argument of train_epoch is 0-based.

Passive parties only ever see their own features, embeddings and returned
gradient slices: the hook interface carries nothing else.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np

import envelope
from data import LabeledDataset, VerticalPartition
from errors import ConfigurationError, DivergenceError, InputError, InternalError
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
    softmax,
)

log = logging.getLogger("splitvfl")

TOP_HIDDEN_DEFAULT = 64
BOTTOM_HIDDEN_DEFAULT = 64


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass
class PartyState:
    party_id: int
    bottom_model: MLPModel
    feature_slice: Tuple[int, int]
    embedding_dim: int
    optimizer: SGDSchedule

    def __post_init__(self) -> None:
        width = self.feature_slice[1] - self.feature_slice[0]
        if self.bottom_model.input_dim != width:
            raise ConfigurationError(
                f"party {self.party_id}: bottom input dim {self.bottom_model.input_dim} "
                f"!= slice width {width}")
        if self.bottom_model.output_dim != self.embedding_dim:
            raise ConfigurationError(
                f"party {self.party_id}: bottom output dim {self.bottom_model.output_dim} "
                f"!= embedding dim {self.embedding_dim}")

    def features_of(self, features: np.ndarray) -> np.ndarray:
        return features[:, self.feature_slice[0]:self.feature_slice[1]]

    def embed(self, own_features: np.ndarray) -> np.ndarray:
        return mlp_forward(self.bottom_model, own_features)[0]


@dataclass
class BatchExchange:
    epoch: int
    batch_index: int
    sample_ids: np.ndarray
    embeddings: List[np.ndarray]
    concatenated: np.ndarray
    returned: np.ndarray
    slices: List[np.ndarray]
    losses: np.ndarray
    substituted: np.ndarray


@dataclass
class EpochRecord:
    """Everything submitted during one epoch, indexed by sample id (active-party view)."""
    epoch: int
    embeddings: List[np.ndarray]
    labels: np.ndarray
    substituted: np.ndarray


@dataclass
class EpochSummary:
    epoch: int
    mean_loss: float
    batches: int
    hooks_fired: int
    seconds: float


class PartyHook:
    """Adversary hook bound to one passive party. The default is a no-op."""

    def bind(self, party: PartyState, own_features: np.ndarray) -> None:
        pass

    def on_epoch_start(self, epoch: int) -> None:
        pass

    def submit(self, epoch: int, batch_index: int, sample_ids: np.ndarray,
               embeddings: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Return (embeddings to submit, positions that were substituted)."""
        return embeddings, np.zeros(0, dtype=np.int64)

    def receive(self, epoch: int, batch_index: int, sample_ids: np.ndarray,
                gradient: np.ndarray) -> None:
        pass

    def on_epoch_end(self, epoch: int) -> None:
        pass


class Defense:
    """Middleware on the protocol. The base class is the identity defense."""

    kind = "identity"

    def bind(self, system: "VFLSystem", partition: VerticalPartition) -> None:
        pass

    def on_epoch_start(self, epoch: int) -> None:
        pass

    def transform_embeddings(self, embeddings: List[np.ndarray], phase: str,
                             system: "VFLSystem") -> List[np.ndarray]:
        return embeddings

    def loss_multipliers(self, losses: np.ndarray, sample_ids: np.ndarray,
                         epoch: int) -> Optional[np.ndarray]:
        return None

    def transform_gradients(self, dh: np.ndarray, sample_ids: np.ndarray,
                            epoch: int) -> np.ndarray:
        return dh

    def after_top_step(self, system: "VFLSystem") -> None:
        pass

    def after_training(self, system: "VFLSystem", record: Optional[EpochRecord]) -> None:
        pass

    def vote(self, system: "VFLSystem",
             embeddings: List[np.ndarray]) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        return None

    def summary(self) -> Dict[str, float]:
        return {}


class EventLog:
    """Per-batch TSV: epoch, batch, loss, attacker_fired."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh: Optional[TextIO] = open(self.path, "w", encoding="utf-8")
        self._fh.write("epoch\tbatch\tloss\tattacker_fired\n")

    def write(self, epoch: int, batch: int, loss: float, fired: bool) -> None:
        if self._fh is not None:
            self._fh.write(f"{epoch}\t{batch}\t{loss:.10g}\t{int(fired)}\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "EventLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


@dataclass
class VFLSystem:
    top_model: MLPModel
    parties: List[PartyState]
    active_optimizer: SGDSchedule
    batch_size: int
    epochs: int
    class_count: int
    seed: int
    defense_stack: List[Defense] = field(default_factory=list)
    attacker: Optional[PartyHook] = None
    adversary_index: int = 1
    event_log: Optional[EventLog] = None
    record_final_epoch: bool = True
    last_epoch: Optional[EpochRecord] = None
    exchange_observer: Optional[Callable[[BatchExchange], None]] = None

    def __post_init__(self) -> None:
        total = sum(p.embedding_dim for p in self.parties)
        if self.top_model.input_dim != total:
            raise ConfigurationError(
                f"top model input dim {self.top_model.input_dim} != sum of embedding dims {total}")
        if self.top_model.output_dim != self.class_count:
            raise ConfigurationError(
                f"top model output dim {self.top_model.output_dim} != class count {self.class_count}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be >= 1")

    @property
    def embedding_dims(self) -> List[int]:
        return [p.embedding_dim for p in self.parties]

    def attach_attacker(self, hook: PartyHook, train: LabeledDataset) -> None:
        party = self.parties[self.adversary_index]
        hook.bind(party, party.features_of(train.features))
        self.attacker = hook

    def attach_defenses(self, defenses: Sequence[Defense], partition: VerticalPartition) -> None:
        self.defense_stack = list(defenses)
        for d in self.defense_stack:
            d.bind(self, partition)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return int(math.ceil(n / batch_size))


def build_system(partition: VerticalPartition, class_count: int, n_train: int, *,
                 lr: float = 0.05, batch_size: int = 32, epochs: int = 10,
                 top_layers: int = 3, top_hidden: int = TOP_HIDDEN_DEFAULT,
                 bottom_layers: int = 2, bottom_hidden: int = BOTTOM_HIDDEN_DEFAULT,
                 seed: int = 0,
                 bottom_overrides: Optional[Dict[int, MLPModel]] = None) -> VFLSystem:
    """Fresh system with seeded initialisation (bottoms in party order, then top)."""
    if not 1 <= top_layers <= 5:
        raise ConfigurationError(f"top model depth must be in [1,5], got {top_layers}")
    if bottom_layers < 1:
        raise ConfigurationError(f"bottom model depth must be >= 1, got {bottom_layers}")
    rng = make_rng(seed, "init")
    total_steps = epochs * steps_per_epoch(n_train, batch_size)
    parties = []
    for k, (sl, h) in enumerate(zip(partition.party_slices, partition.embedding_dims)):
        dims = [sl[1] - sl[0]] + [bottom_hidden] * (bottom_layers - 1) + [h]
        model = init_mlp(dims, rng)
        if bottom_overrides and k in bottom_overrides:
            model = bottom_overrides[k].copy()
        parties.append(PartyState(k, model, sl, h, SGDSchedule(lr, total_steps)))
    top_dims = [partition.total_embedding_dim] + [top_hidden] * (top_layers - 1) + [class_count]
    top = init_mlp(top_dims, rng)
    return VFLSystem(top_model=top, parties=parties,
                     active_optimizer=SGDSchedule(lr, total_steps),
                     batch_size=batch_size, epochs=epochs, class_count=class_count,
                     seed=seed, adversary_index=partition.adversary_index)


# ---------------------------------------------------------------------------
# Gradient slicing
# ---------------------------------------------------------------------------

def slice_gradient(dh: np.ndarray, dims: Sequence[int]) -> List[np.ndarray]:
    """Contiguous per-party slices of dh (a vector or a batch of row vectors)."""
    dh = np.asarray(dh, dtype=DTYPE)
    width = dh.shape[-1]
    if width != sum(dims):
        raise InternalError(f"gradient length {width} != sum of party dims {sum(dims)}")
    bounds = np.cumsum([0] + list(dims))
    return [dh[..., bounds[k]:bounds[k + 1]] for k in range(len(dims))]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def epoch_order(system: VFLSystem, n: int, epoch_index: int) -> np.ndarray:
    return make_rng(system.seed, f"shuffle/{epoch_index}").permutation(n)


def train_epoch(system: VFLSystem, train: LabeledDataset, partition: VerticalPartition,
                epoch_index: int) -> EpochSummary:
    if not 0 <= epoch_index < system.epochs:
        raise ConfigurationError(f"epoch index {epoch_index} outside [0, {system.epochs})")
    if train.class_count != system.class_count:
        raise ConfigurationError("dataset class count does not match the system")
    epoch = epoch_index + 1
    t0 = time.time()
    n, B = train.n, system.batch_size
    dims = partition.embedding_dims
    adv = system.adversary_index
    hook = system.attacker
    order = epoch_order(system, n, epoch_index)
    recording = system.record_final_epoch and epoch == system.epochs
    record = None
    if recording:
        record = EpochRecord(epoch, [np.zeros((n, h), dtype=DTYPE) for h in dims],
                             train.labels.copy(), np.zeros(n, dtype=bool))

    for d in system.defense_stack:
        d.on_epoch_start(epoch)
    if hook is not None:
        hook.on_epoch_start(epoch)

    loss_sum = 0.0
    fired = 0
    batches = 0
    for batch_index, start in enumerate(range(0, n, B)):
        ids = order[start:start + B]
        labels = train.labels[ids]
        rows = train.features[ids]

        embeddings, caches = [], []
        for party in system.parties:
            h, cache = mlp_forward(party.bottom_model, party.features_of(rows))
            embeddings.append(h)
            caches.append(cache)

        substituted = np.zeros(0, dtype=np.int64)
        if hook is not None:
            submitted, substituted = hook.submit(epoch, batch_index, ids, embeddings[adv])
            embeddings[adv] = np.asarray(submitted, dtype=DTYPE)
            substituted = np.asarray(substituted, dtype=np.int64)
            fired += int(substituted.size)

        for d in system.defense_stack:
            embeddings = d.transform_embeddings(embeddings, "train", system)

        concatenated = np.hstack(embeddings)
        logits, top_cache = mlp_forward(system.top_model, concatenated)
        ce = batch_softmax_cross_entropy(logits, labels)
        if not np.all(np.isfinite(ce.losses)):
            raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {batch_index}")

        errors = ce.errors
        for d in system.defense_stack:
            mult = d.loss_multipliers(ce.losses, ids, epoch)
            if mult is not None:
                errors = errors * np.asarray(mult, dtype=DTYPE)[:, None]
        upstream = errors / len(ids)
        top_grads, dh = mlp_backward(system.top_model, top_cache, upstream)

        for d in system.defense_stack:
            dh = d.transform_gradients(dh, ids, epoch)
        slices = slice_gradient(dh, dims)

        for k, party in enumerate(system.parties):
            grad_k = slices[k]
            if k == adv and substituted.size:
                grad_k = grad_k.copy()
                grad_k[substituted] = 0.0
            party_grads, _ = mlp_backward(party.bottom_model, caches[k], grad_k)
            party.bottom_model = sgd_step(party.bottom_model, party_grads, party.optimizer)
        system.top_model = sgd_step(system.top_model, top_grads, system.active_optimizer)
        for d in system.defense_stack:
            d.after_top_step(system)

        if hook is not None:
            hook.receive(epoch, batch_index, ids, slices[adv])

        if record is not None:
            for k in range(len(dims)):
                record.embeddings[k][ids] = embeddings[k]
            record.substituted[ids[substituted]] = True
        if system.exchange_observer is not None:
            system.exchange_observer(BatchExchange(
                epoch, batch_index, ids, embeddings, concatenated, dh, slices,
                ce.losses, substituted))

        batch_loss = float(ce.losses.sum())
        loss_sum += batch_loss
        batches += 1
        if system.event_log is not None:
            system.event_log.write(epoch, batch_index, batch_loss / len(ids), substituted.size > 0)

    if hook is not None:
        hook.on_epoch_end(epoch)
    if record is not None:
        system.last_epoch = record
    summary = EpochSummary(epoch, loss_sum / n, batches, fired, time.time() - t0)
    log.debug("epoch %d: loss %.5f, %d batches, %d substitutions",
              epoch, summary.mean_loss, batches, fired)
    return summary


def train(system: VFLSystem, train_set: LabeledDataset, partition: VerticalPartition,
          epochs: Optional[int] = None,
          on_epoch_end: Optional[Callable[[VFLSystem, EpochSummary], None]] = None,
          ) -> List[EpochSummary]:
    """Run epochs 1..epochs (default: all) and fire post-training defenses at the end."""
    last = system.epochs if epochs is None else min(int(epochs), system.epochs)
    summaries = []
    for epoch_index in range(last):
        summary = train_epoch(system, train_set, partition, epoch_index)
        summaries.append(summary)
        log.info("epoch %2d/%d  loss %.5f  substitutions %d  (%.1fs)",
                 summary.epoch, system.epochs, summary.mean_loss,
                 summary.hooks_fired, summary.seconds)
        if on_epoch_end is not None:
            on_epoch_end(system, summary)
    if last == system.epochs:
        for d in system.defense_stack:
            d.after_training(system, system.last_epoch)
    return summaries


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def party_embeddings(system: VFLSystem, features_by_party: Sequence[np.ndarray]) -> List[np.ndarray]:
    if len(features_by_party) != len(system.parties):
        raise ConfigurationError(
            f"{len(features_by_party)} feature blocks for {len(system.parties)} parties")
    return [mlp_forward(p.bottom_model, x)[0] for p, x in zip(system.parties, features_by_party)]


def classify(top_model: MLPModel, embeddings: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Argmax of softmax(top logits); ties resolve to the lowest class index."""
    logits, _ = mlp_forward(top_model, np.hstack(embeddings))
    probs = softmax(logits)
    return np.argmax(probs, axis=1), probs


def predict(system: VFLSystem, features_by_party: Sequence[np.ndarray],
            overrides: Optional[Dict[int, np.ndarray]] = None,
            apply_defenses: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Predicted classes and probability vectors.

    `overrides` maps a party index to one embedding submitted for every row
    (the adversary's h_adv at test time).
    """
    embeddings = party_embeddings(system, features_by_party)
    for k, vector in (overrides or {}).items():
        vec = np.asarray(vector, dtype=DTYPE).reshape(1, -1)
        if vec.shape[1] != embeddings[k].shape[1]:
            raise ConfigurationError(
                f"override for party {k} has dim {vec.shape[1]}, expected {embeddings[k].shape[1]}")
        embeddings[k] = np.repeat(vec, embeddings[k].shape[0], axis=0)
    if apply_defenses:
        for d in system.defense_stack:
            embeddings = d.transform_embeddings(embeddings, "inference", system)
        for d in system.defense_stack:
            voted = d.vote(system, embeddings)
            if voted is not None:
                return voted
    return classify(system.top_model, embeddings)


def accuracy(predicted: np.ndarray, truth: np.ndarray) -> float:
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if truth.size == 0:
        raise InputError("empty evaluation set")
    return float(np.mean(predicted == truth))


def f1_binary(predicted: np.ndarray, truth: np.ndarray, positive: int = 1) -> float:
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if truth.size == 0:
        raise InputError("empty evaluation set")
    tp = int(np.sum((predicted == positive) & (truth == positive)))
    fp = int(np.sum((predicted == positive) & (truth != positive)))
    fn = int(np.sum((predicted != positive) & (truth == positive)))
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


def evaluate(system: VFLSystem, test: LabeledDataset, partition: VerticalPartition,
             overrides: Optional[Dict[int, np.ndarray]] = None) -> float:
    """Main-task metric: F1 on class 1 for binary tasks, accuracy otherwise."""
    if test.n == 0:
        raise InputError("empty test set")
    predicted, _ = predict(system, partition.split_features(test.features), overrides)
    if test.class_count == 2:
        return f1_binary(predicted, test.labels)
    return accuracy(predicted, test.labels)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _model_sections(prefix: str, model: MLPModel) -> Dict[str, np.ndarray]:
    out = {}
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        out[f"{prefix}/W{l}"] = w
        out[f"{prefix}/b{l}"] = b
    return out


def _model_from_sections(prefix: str, sections: Dict[str, np.ndarray]) -> MLPModel:
    weights, biases = [], []
    l = 0
    while f"{prefix}/W{l}" in sections:
        weights.append(sections[f"{prefix}/W{l}"])
        biases.append(sections[f"{prefix}/b{l}"])
        l += 1
    if not weights:
        raise InputError(f"checkpoint has no model section {prefix!r}")
    return MLPModel(weights, biases)


def save_checkpoint(path: Union[str, Path], system: VFLSystem) -> Path:
    sections: Dict[str, np.ndarray] = {}
    sections.update(_model_sections("top", system.top_model))
    for p in system.parties:
        sections.update(_model_sections(f"party{p.party_id}", p.bottom_model))
    sections["steps"] = np.array([system.active_optimizer.current_step]
                                 + [p.optimizer.current_step for p in system.parties], dtype=DTYPE)
    return envelope.write_envelope(path, envelope.MAGIC_DATA, sections)


def load_checkpoint(path: Union[str, Path], system: VFLSystem) -> VFLSystem:
    """Restore models and optimizer step counters into a system of the same shape."""
    _, sections = envelope.read_envelope(path, envelope.MAGIC_DATA)
    top = _model_from_sections("top", sections)
    if top.dims != system.top_model.dims:
        raise ConfigurationError(f"checkpoint top dims {top.dims} != system {system.top_model.dims}")
    system.top_model = top
    for p in system.parties:
        model = _model_from_sections(f"party{p.party_id}", sections)
        if model.dims != p.bottom_model.dims:
            raise ConfigurationError(f"checkpoint party {p.party_id} dims do not match")
        p.bottom_model = model
    steps = sections["steps"].astype(np.int64)
    system.active_optimizer.current_step = int(steps[0])
    for p, s in zip(system.parties, steps[1:]):
        p.optimizer.current_step = int(s)
    return system
