#!/usr/bin/env python3
"""
lia.py — Gradient-direction label inference from the adversary's returned slices.

The adversary knows one sample of the target label (known_id). From epoch 2 up to
the attack epoch E_a it keeps every gradient slice it receives, scores each sample
by the cosine similarity of its slice to the known sample's slice, and keeps the
top floor(n / (C * r)) samples as the inferred target set.

  hassle   score = mean cosine over epochs 2..E_a
  ds       score = cosine at epoch E_a only

Traces can be exported as a VFLT1 envelope for offline analysis.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

import envelope
from errors import ConfigurationError, InputError, InternalError
from numerics import DTYPE, DegenerateGradientWarning, cosine_to_reference, make_rng
from splitvfl import PartyHook, VFLSystem, train

log = logging.getLogger("lia")

MODES = ("hassle", "ds")


@dataclass
class LIAConfig:
    known_id: int
    attack_epoch: int
    ratio: float
    class_count: int
    sample_count: int
    mode: str = "hassle"
    target_label: int = 1

    def __post_init__(self) -> None:
        if self.attack_epoch < 2:
            raise ConfigurationError(f"attack epoch must be >= 2, got {self.attack_epoch}")
        if not self.ratio >= 1:
            raise ConfigurationError(f"filtering ratio r must be >= 1, got {self.ratio}")
        if self.class_count < 2:
            raise ConfigurationError(f"class count must be >= 2, got {self.class_count}")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown LIA mode {self.mode!r} (expected one of {MODES})")
        if not 0 <= self.known_id < self.sample_count:
            raise ConfigurationError(f"known id {self.known_id} outside [0, {self.sample_count})")

    @property
    def quota(self) -> int:
        return int(math.floor(self.sample_count / (self.class_count * self.ratio)))


@dataclass
class GradientTrace:
    """Adversary gradient slices per recorded epoch, indexed by sample id."""
    sample_count: int
    dim: int
    known_id: int
    attack_epoch: int
    epochs: Dict[int, np.ndarray] = field(default_factory=dict)
    filled: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def recorded_epochs(self) -> List[int]:
        return sorted(self.epochs)

    @property
    def epochs_recorded(self) -> int:
        return len(self.epochs)

    def record_batch(self, epoch: int, sample_ids: np.ndarray, slices: np.ndarray) -> bool:
        """Store one batch; returns False for epochs outside [2, attack_epoch]."""
        if epoch < 2 or epoch > self.attack_epoch:
            return False
        ids = np.asarray(sample_ids, dtype=np.int64)
        grads = np.asarray(slices, dtype=DTYPE)
        if grads.shape != (ids.size, self.dim):
            raise InternalError(f"slice shape {grads.shape} for {ids.size} ids of dim {self.dim}")
        if epoch not in self.epochs:
            self.epochs[epoch] = np.zeros((self.sample_count, self.dim), dtype=DTYPE)
            self.filled[epoch] = np.zeros(self.sample_count, dtype=bool)
        mask = self.filled[epoch]
        if np.unique(ids).size != ids.size or mask[ids].any():
            dup = ids[mask[ids]] if mask[ids].any() else ids
            raise InternalError(f"sample {int(dup[0])} recorded twice in epoch {epoch}")
        self.epochs[epoch][ids] = grads
        mask[ids] = True
        return True

    def is_complete(self) -> bool:
        expected = list(range(2, self.attack_epoch + 1))
        return self.recorded_epochs == expected and all(m.all() for m in self.filled.values())

    def check_complete(self) -> None:
        if not self.is_complete():
            raise InternalError(
                f"trace incomplete: epochs {self.recorded_epochs} recorded, "
                f"expected 2..{self.attack_epoch} with every sample")


def new_trace(config: LIAConfig, dim: int) -> GradientTrace:
    return GradientTrace(config.sample_count, dim, config.known_id, config.attack_epoch)


def record_epoch(trace: GradientTrace, epoch: int,
                 batch_exchanges: Iterable[Tuple[np.ndarray, np.ndarray]]) -> GradientTrace:
    """Record one epoch of (sample_ids, adversary slices) pairs. Epoch 1 is skipped."""
    for ids, slices in batch_exchanges:
        trace.record_batch(epoch, ids, slices)
    return trace


# ─── Scoring and selection ───────────────────────────────────────────────────

@dataclass
class LIAScores:
    scores: np.ndarray
    degenerate: np.ndarray
    epochs_used: List[int]


@dataclass
class LIAResult:
    scores: np.ndarray
    selected_ids: np.ndarray
    precision: Optional[float]
    quota: int
    degenerate_count: int = 0


def _epoch_cosines(trace: GradientTrace, epoch: int) -> Tuple[np.ndarray, np.ndarray]:
    grads = trace.epochs[epoch]
    return cosine_to_reference(grads[trace.known_id], grads)


def score_samples(trace: GradientTrace, config: LIAConfig,
                  upto_epoch: Optional[int] = None) -> LIAScores:
    """Cosine scores of every sample against the known sample.

    `upto_epoch` scores a prefix of the trace (epochs 2..upto_epoch).
    """
    last = config.attack_epoch if upto_epoch is None else upto_epoch
    if upto_epoch is None:
        trace.check_complete()
    if config.mode == "ds":
        epochs = [last]
    else:
        epochs = list(range(2, last + 1))
    missing = [e for e in epochs if e not in trace.epochs]
    if missing:
        raise InternalError(f"trace has no data for epochs {missing}")
    total = np.zeros(trace.sample_count, dtype=DTYPE)
    degenerate = np.zeros(trace.sample_count, dtype=bool)
    for e in epochs:
        cos, bad = _epoch_cosines(trace, e)
        total += cos
        degenerate |= bad
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} samples had a zero-norm gradient; "
                      f"those epochs score 0", DegenerateGradientWarning, stacklevel=2)
    return LIAScores(total / len(epochs), degenerate, epochs)


def select_targets(scores: Union[LIAScores, np.ndarray], config: LIAConfig,
                   labels: Optional[np.ndarray] = None) -> LIAResult:
    """Top-quota sample ids by score; the known sample always comes first, ties by lower id.

    `labels` (evaluation only) enables the precision measurement.
    """
    values = scores.scores if isinstance(scores, LIAScores) else np.asarray(scores, dtype=DTYPE)
    if values.shape != (config.sample_count,):
        raise InputError(f"{values.shape[0]} scores for {config.sample_count} samples")
    quota = config.quota
    if quota < 1:
        raise ConfigurationError(
            f"selection quota floor({config.sample_count}/({config.class_count}*{config.ratio})) is 0")
    ids = np.arange(config.sample_count)
    not_known = (ids != config.known_id).astype(np.int64)
    order = np.lexsort((ids, -values, not_known))
    selected = np.sort(order[:quota])
    precision = None
    if labels is not None:
        labels = np.asarray(labels)
        precision = float(np.mean(labels[selected] == config.target_label))
    degenerate = int(scores.degenerate.sum()) if isinstance(scores, LIAScores) else 0
    return LIAResult(values, selected, precision, quota, degenerate)


def infer_labels(trace: GradientTrace, config: LIAConfig,
                 labels: Optional[np.ndarray] = None) -> LIAResult:
    result = select_targets(score_samples(trace, config), config, labels)
    if result.precision is not None:
        log.info("LIA (%s, r=%g): %d ids selected, precision %.4f",
                 config.mode, config.ratio, result.quota, result.precision)
    return result


def precision_by_epoch(trace: GradientTrace, config: LIAConfig,
                       labels: np.ndarray) -> Dict[str, List[float]]:
    """DS and averaged precision after each recorded epoch 2..E_a."""
    curves: Dict[str, List[float]] = {"ds": [], "hassle": []}
    for e in range(2, config.attack_epoch + 1):
        for mode in MODES:
            cfg = LIAConfig(config.known_id, config.attack_epoch, config.ratio,
                            config.class_count, config.sample_count, mode, config.target_label)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegenerateGradientWarning)
                scored = score_samples(trace, cfg, upto_epoch=e)
            curves[mode].append(select_targets(scored, cfg, labels).precision)
    return curves


def direction_label_agreement(trace: GradientTrace, labels: np.ndarray, epoch: int,
                              pairs: int = 10_000, seed: int = 0) -> float:
    """Fraction of random sample pairs where cos(dh_i, dh_j) > 0 iff labels match."""
    if epoch not in trace.epochs:
        raise InternalError(f"epoch {epoch} not recorded")
    grads = trace.epochs[epoch]
    rng = make_rng(seed, "lia/pairs")
    i = rng.integers(0, trace.sample_count, size=pairs)
    j = rng.integers(0, trace.sample_count, size=pairs)
    keep = i != j
    i, j = i[keep], j[keep]
    norms = np.linalg.norm(grads, axis=1)
    dots = np.einsum("ij,ij->i", grads[i], grads[j])
    valid = (norms[i] > 0) & (norms[j] > 0)
    positive = (dots > 0) & valid
    same = np.asarray(labels)[i] == np.asarray(labels)[j]
    return float(np.mean(positive == same))


# ─── Recording hook ──────────────────────────────────────────────────────────

class GradientRecorder(PartyHook):
    """Passive adversary that only listens: records its slices into a trace."""

    def __init__(self, trace: GradientTrace):
        self.trace = trace

    def receive(self, epoch: int, batch_index: int, sample_ids: np.ndarray,
                gradient: np.ndarray) -> None:
        self.trace.record_batch(epoch, sample_ids, gradient)


def lia_precision_sweep(builder: Callable[[int], Tuple[VFLSystem, object, object]],
                        layer_counts: Sequence[int], config: LIAConfig,
                        labels: np.ndarray) -> Dict[int, float]:
    """Precision per top-model depth.

    `builder(depth)` returns (system, train_set, partition) with every other
    setting held; each run trains through the attack epoch.
    """
    out: Dict[int, float] = {}
    for depth in layer_counts:
        if not 1 <= depth <= 5:
            raise ConfigurationError(f"top-model depth {depth} outside [1,5]")
        system, train_set, partition = builder(depth)
        trace = new_trace(config, system.parties[system.adversary_index].embedding_dim)
        system.attach_attacker(GradientRecorder(trace), train_set)
        train(system, train_set, partition, epochs=config.attack_epoch)
        out[depth] = infer_labels(trace, config, labels).precision
        log.info("depth %d: precision %.4f", depth, out[depth])
    return out


# ─── Trace export ────────────────────────────────────────────────────────────

def export_trace(path: Union[str, Path], trace: GradientTrace) -> Path:
    sections = {"meta": np.array([trace.sample_count, trace.dim, trace.known_id,
                                  trace.attack_epoch], dtype=DTYPE)}
    for e in trace.recorded_epochs:
        sections[f"epoch{e}"] = trace.epochs[e]
    return envelope.write_envelope(path, envelope.MAGIC_TRACE, sections)


def load_trace(path: Union[str, Path]) -> GradientTrace:
    _, sections = envelope.read_envelope(path, envelope.MAGIC_TRACE)
    if "meta" not in sections:
        raise InputError(f"{path}: not a gradient trace (no meta section)")
    n, dim, known, attack = (int(v) for v in sections.pop("meta"))
    trace = GradientTrace(n, dim, known, attack)
    for name, arr in sections.items():
        e = int(name[len("epoch"):])
        trace.epochs[e] = arr
        trace.filled[e] = np.ones(n, dtype=bool)
    return trace
