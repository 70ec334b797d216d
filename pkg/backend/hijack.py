#!/usr/bin/env python3
"""
hijack.py — Label-inference-guided hijacking by one passive party.

Attack timeline for one training run (epochs are 1-based):
  before epoch 1     hassle mode only: contrastive pretraining of the adversary's bottom model
  epochs 2..E_a      record returned gradient slices (label inference)
  start of E_a + 1   select the inferred target set I_t
  epochs > E_a       submit h_adv for every sample in I_t, then move h_adv against
                     the mean returned slice and clip its norm to the running mean
                     norm of the adversary's clean embeddings
  test time          submit h_adv for every test sample -> ASR

Modes:
  hassle    SSL pretraining + gradient-driven h_adv
  grad      as hassle without SSL pretraining
  replace   h_adv frozen to the known sample's embedding at the start of E_a + 1;
            nothing is modified during training
  none      no adversary (clean run)

Usage:
    python3 backend/hijack.py --config configs/synth10-hassle.json --seed 0
"""
from __future__ import annotations

import argparse
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import envelope
from config import ExperimentConfig, load_config
from data import (
    DEFAULT_INCOME_CSV,
    CACHE_DIR,
    LabeledDataset,
    VerticalPartition,
    adversary_share_ratios,
    load_income,
    synth_blobs,
    vertical_partition,
)
from defenses import ABLDefense, anomaly_scores, build_defense
from errors import ConfigurationError, InputError, VFLError
from lia import (
    GradientTrace,
    LIAConfig,
    LIAResult,
    export_trace,
    new_trace,
    precision_by_epoch,
    score_samples,
    select_targets,
)
from numerics import DTYPE, MLPModel, make_rng, mlp_backward, mlp_forward
from scarf import ssl_pretrain
from splitvfl import (
    EventLog,
    PartyHook,
    PartyState,
    VFLSystem,
    build_system,
    evaluate,
    party_embeddings,
    predict,
    train,
)

log = logging.getLogger("hijack")

MODES = ("hassle", "grad", "replace", "none")


# ─── Types ───────────────────────────────────────────────────────────────────

@dataclass
class AdversarialEmbedding:
    vector: np.ndarray
    norm_cap: float
    update_count: int = 0
    frozen: bool = False

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))


@dataclass
class AttackPlan:
    target_label: int
    known_id: int
    attack_epoch: int
    mode: str = "hassle"
    inferred_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown attack mode {self.mode!r} (expected one of {MODES})")
        if self.attack_epoch < 2:
            raise ConfigurationError(f"attack epoch must be >= 2, got {self.attack_epoch}")
        self.inferred_ids = np.asarray(self.inferred_ids, dtype=np.int64)

    def poisons(self, epoch: int) -> bool:
        return self.mode in ("hassle", "grad") and epoch > self.attack_epoch


# ─── Operations ──────────────────────────────────────────────────────────────

def init_adv_embedding(bottom: MLPModel, known_row: np.ndarray, norm_cap: float) -> AdversarialEmbedding:
    """h_adv = f_adv(x_known) under the current bottom weights."""
    vector = mlp_forward(bottom, np.asarray(known_row, dtype=DTYPE).reshape(1, -1))[0][0]
    return AdversarialEmbedding(vector.copy(), float(norm_cap))


def poison_batch(sample_ids: np.ndarray, embeddings: np.ndarray, plan: AttackPlan,
                 h_adv: AdversarialEmbedding, epoch: int) -> Tuple[np.ndarray, np.ndarray]:
    """Replace the rows of inferred target samples with h_adv. Returns (rows, positions)."""
    if not plan.poisons(epoch):
        return embeddings, np.zeros(0, dtype=np.int64)
    positions = np.flatnonzero(np.isin(sample_ids, plan.inferred_ids))
    if positions.size == 0:
        return embeddings, positions
    modified = np.array(embeddings, dtype=DTYPE, copy=True)
    modified[positions] = h_adv.vector
    return modified, positions


def update_adv(h_adv: AdversarialEmbedding, slices: np.ndarray) -> AdversarialEmbedding:
    """h_adv - mean(slices), then scaled down (never up) to norm_cap."""
    if h_adv.frozen:
        return h_adv
    slices = np.atleast_2d(np.asarray(slices, dtype=DTYPE))
    if slices.shape[0] == 0:
        raise InputError("update_adv needs at least one poisoned position")
    vector = h_adv.vector - slices.mean(axis=0)
    norm = float(np.linalg.norm(vector))
    if norm > h_adv.norm_cap:
        vector = vector * (h_adv.norm_cap / norm)
    return AdversarialEmbedding(vector, h_adv.norm_cap, h_adv.update_count + 1, False)


def evaluate_asr(system: VFLSystem, test: LabeledDataset, partition: VerticalPartition,
                 h_adv: np.ndarray, target_label: int) -> float:
    """Fraction of non-target test samples predicted as the target with h_adv submitted."""
    eligible = np.flatnonzero(test.labels != target_label)
    if eligible.size == 0:
        raise InputError(f"no test samples with a label other than {target_label}")
    features = partition.split_features(test.features[eligible])
    predicted, _ = predict(system, features, overrides={system.adversary_index: h_adv})
    return float(np.mean(predicted == target_label))


def saliency(gradient: np.ndarray, embedding: np.ndarray) -> np.ndarray:
    """||g ⊙ h|| per row."""
    g = np.atleast_2d(np.asarray(gradient, dtype=DTYPE))
    h = np.atleast_2d(np.asarray(embedding, dtype=DTYPE))
    return np.linalg.norm(g * h, axis=1)


@dataclass
class SaliencyResult:
    per_party: List[np.ndarray]
    ratio: float


def feature_saliency(system: VFLSystem, features_by_party: Sequence[np.ndarray],
                     labels: np.ndarray, passive_index: Optional[int] = None,
                     active_index: int = 0) -> SaliencyResult:
    """Per-sample saliency of every party w.r.t. the ground-truth logit; ratio passive / active."""
    passive = system.adversary_index if passive_index is None else passive_index
    embeddings = party_embeddings(system, features_by_party)
    logits, cache = mlp_forward(system.top_model, np.hstack(embeddings))
    upstream = np.zeros_like(logits)
    upstream[np.arange(logits.shape[0]), np.asarray(labels, dtype=np.int64)] = 1.0
    _, dh = mlp_backward(system.top_model, cache, upstream)
    bounds = np.cumsum([0] + system.embedding_dims)
    per_party = [saliency(dh[:, bounds[k]:bounds[k + 1]], h) for k, h in enumerate(embeddings)]
    active_mean = float(per_party[active_index].mean())
    ratio = float(per_party[passive].mean()) / active_mean if active_mean > 0 else float("inf")
    return SaliencyResult(per_party, ratio)


# ─── Attacker hook ───────────────────────────────────────────────────────────

class HassleAttacker(PartyHook):
    """The adversary's side of the protocol: only its own features, embeddings and slices."""

    def __init__(self, plan: AttackPlan, lia_config: LIAConfig,
                 inferred_override: Optional[np.ndarray] = None):
        self.plan = plan
        self.lia_config = lia_config
        self.inferred_override = inferred_override
        self.trace: Optional[GradientTrace] = None
        self.lia: Optional[LIAResult] = None
        self.h_adv: Optional[AdversarialEmbedding] = None
        self.party: Optional[PartyState] = None
        self.features: Optional[np.ndarray] = None
        self.norm_cap = 0.0
        self.clip_violations = 0
        self.substitutions: Dict[int, int] = {}
        self.stealth_population: List[np.ndarray] = []
        self.stealth_submitted: List[np.ndarray] = []
        self._norm_sum = 0.0
        self._norm_rows = 0
        self._pending = np.zeros(0, dtype=np.int64)

    def bind(self, party: PartyState, own_features: np.ndarray) -> None:
        self.party = party
        self.features = own_features
        if self.plan.mode != "replace":
            self.trace = new_trace(self.lia_config, party.embedding_dim)

    def on_epoch_start(self, epoch: int) -> None:
        self._norm_sum = 0.0
        self._norm_rows = 0
        if epoch != self.plan.attack_epoch + 1:
            return
        if self.plan.mode == "replace":
            self.h_adv = init_adv_embedding(self.party.bottom_model,
                                            self.features[self.plan.known_id], self.norm_cap)
            self.h_adv.frozen = True
            log.info("replace: h_adv frozen (norm %.4f)", self.h_adv.norm)
            return
        self.lia = select_targets(score_samples(self.trace, self.lia_config), self.lia_config)
        ids = self.lia.selected_ids if self.inferred_override is None else self.inferred_override
        self.plan.inferred_ids = np.asarray(ids, dtype=np.int64)
        log.info("attack epoch %d reached: %d samples inferred as label %d",
                 self.plan.attack_epoch, self.plan.inferred_ids.size, self.plan.target_label)

    def submit(self, epoch, batch_index, sample_ids, embeddings):
        self._norm_sum += float(np.linalg.norm(embeddings, axis=1).sum())
        self._norm_rows += embeddings.shape[0]
        self._pending = np.zeros(0, dtype=np.int64)
        if not self.plan.poisons(epoch):
            return embeddings, self._pending
        if epoch == self.plan.attack_epoch + 1:
            self.stealth_population.append(embeddings.copy())
        if self.h_adv is None and np.isin(sample_ids, self.plan.inferred_ids).any():
            self.h_adv = init_adv_embedding(self.party.bottom_model,
                                            self.features[self.plan.known_id], self.norm_cap)
        if self.h_adv is None:
            return embeddings, self._pending
        if self.h_adv.norm_cap != self.norm_cap:
            self.h_adv.norm_cap = self.norm_cap
        modified, positions = poison_batch(sample_ids, embeddings, self.plan, self.h_adv, epoch)
        self._pending = positions
        self.substitutions[epoch] = self.substitutions.get(epoch, 0) + int(positions.size)
        if epoch == self.plan.attack_epoch + 1 and positions.size:
            self.stealth_submitted.append(modified[positions].copy())
        return modified, positions

    def receive(self, epoch, batch_index, sample_ids, gradient):
        if epoch <= self.plan.attack_epoch:
            if self.trace is not None:
                self.trace.record_batch(epoch, sample_ids, gradient)
            return
        if self._pending.size and self.h_adv is not None and not self.h_adv.frozen:
            self.h_adv = update_adv(self.h_adv, gradient[self._pending])
            if self.h_adv.norm > self.h_adv.norm_cap + 1e-12:
                self.clip_violations += 1

    def on_epoch_end(self, epoch: int) -> None:
        if self._norm_rows:
            self.norm_cap = self._norm_sum / self._norm_rows


# ─── End-to-end run ──────────────────────────────────────────────────────────

@dataclass
class HassleResult:
    seed: int
    mode: str
    status: str = "ok"
    error: Optional[str] = None
    lia_precision: Optional[float] = None
    lia_precision_ds: Optional[float] = None
    lia_precision_curve: Optional[List[float]] = None
    selected_count: Optional[int] = None
    poison_rate: Optional[float] = None
    substitutions_per_epoch: Optional[Dict[int, int]] = None
    asr: Optional[float] = None
    mta: Optional[float] = None
    clean_mta: Optional[float] = None
    saliency_ratio: Optional[float] = None
    saliency_trace: Optional[List[float]] = None
    h_adv_norm: Optional[float] = None
    norm_cap: Optional[float] = None
    clip_violations: Optional[int] = None
    stealth: Optional[Dict[str, float]] = None
    abl_flagged: Optional[int] = None
    abl_overlap: Optional[int] = None
    vflip_flag_rate: Optional[float] = None
    anomaly_flag_rate: Optional[float] = None
    seconds: float = 0.0


def prepare_data(config: ExperimentConfig) -> Tuple[LabeledDataset, LabeledDataset, VerticalPartition]:
    ds = config.dataset
    if ds.kind == "income":
        path = Path(ds.path) if ds.path else DEFAULT_INCOME_CSV
        train_set, test_set = load_income(path, cache_dir=CACHE_DIR)
    else:
        train_set, test_set = synth_blobs(ds.n, ds.classes, ds.dim, ds.cluster_std, ds.seed,
                                          ds.test_fraction, ds.separation)
    p = config.partition
    if p.feature_ratio is not None:
        ratios = adversary_share_ratios(p.parties, p.adversary_index, p.feature_ratio)
    elif p.ratios is not None:
        ratios = list(p.ratios)
    else:
        ratios = [1.0 / p.parties] * p.parties
    # the adversary holds the same share of the concatenated embedding as of the columns
    proportional = p.proportional_embeddings or p.feature_ratio is not None
    partition = vertical_partition(train_set, ratios, config.model.embedding_dim,
                                   p.adversary_index, proportional)
    return train_set, test_set, partition


def choose_known_id(train_set: LabeledDataset, target_label: int, seed: int) -> int:
    candidates = np.flatnonzero(train_set.labels == target_label)
    if candidates.size == 0:
        raise InputError(f"no training sample has the target label {target_label}")
    return int(make_rng(seed, "known-id").choice(candidates))


def _system_for(config: ExperimentConfig, train_set: LabeledDataset, partition: VerticalPartition,
                seed: int, bottom_overrides: Optional[Dict[int, MLPModel]] = None) -> VFLSystem:
    m, t = config.model, config.training
    system = build_system(partition, train_set.class_count, train_set.n, lr=t.lr,
                          batch_size=t.batch_size, epochs=t.epochs, top_layers=m.top_layers,
                          top_hidden=m.top_hidden, bottom_layers=m.bottom_layers,
                          bottom_hidden=m.bottom_hidden, seed=seed,
                          bottom_overrides=bottom_overrides)
    defenses = [build_defense(d.kind, d.params, seed, train_set.n, t.epochs)
                for d in config.defenses]
    system.attach_defenses(defenses, partition)
    return system


def _stealth_summary(attacker: HassleAttacker) -> Optional[Dict[str, float]]:
    if not attacker.stealth_population or not attacker.stealth_submitted:
        return None
    population = np.vstack(attacker.stealth_population)
    submitted = np.vstack(attacker.stealth_submitted)
    out: Dict[str, float] = {}
    for detector in ("pca_recon", "mahalanobis"):
        try:
            scored = anomaly_scores(submitted, population, detector)
        except ConfigurationError as e:
            log.warning("stealth summary skipped for %s: %s", detector, e)
            continue
        out[f"{detector}_pop_mean"] = scored.population_mean
        out[f"{detector}_pop_std"] = scored.population_std
        out[f"{detector}_adv_max"] = float(scored.scores.max())
        out[f"{detector}_adv_mean"] = float(scored.scores.mean())
        out[f"{detector}_adv_std"] = float(scored.scores.std())
    return out


def run_hassle(config: ExperimentConfig, seed: int,
               data: Optional[Tuple[LabeledDataset, LabeledDataset, VerticalPartition]] = None,
               artifacts_dir: Optional[Path] = None,
               inferred_override: Optional[np.ndarray] = None) -> HassleResult:
    """One seed of an experiment: clean baseline, attacked run, metrics."""
    t0 = time.time()
    mode = config.attack.mode
    train_set, test_set, partition = data if data is not None else prepare_data(config)
    adv = partition.adversary_index
    result = HassleResult(seed=seed, mode=mode)
    target = config.attack.target_label
    if not 0 <= target < train_set.class_count:
        raise ConfigurationError(f"target label {target} outside [0, {train_set.class_count})")
    if config.attack.attack_epoch > config.training.epochs:
        raise ConfigurationError(
            f"attack epoch {config.attack.attack_epoch} exceeds {config.training.epochs} epochs")

    test_parties = partition.split_features(test_set.features)
    sal_rows = make_rng(seed, "saliency").permutation(test_set.n)[:config.saliency_samples]
    sal_features = [x[sal_rows] for x in test_parties]
    sal_labels = test_set.labels[sal_rows]

    if config.baseline:
        clean = _system_for(config, train_set, partition, seed)
        train(clean, train_set, partition)
        result.clean_mta = evaluate(clean, test_set, partition)
        log.info("seed %d clean MTA %.4f", seed, result.clean_mta)

    overrides = None
    if mode == "hassle":
        init = build_system(partition, train_set.class_count, train_set.n, seed=seed,
                            epochs=config.training.epochs,
                            bottom_layers=config.model.bottom_layers,
                            bottom_hidden=config.model.bottom_hidden)
        own = partition.party_features(train_set.features, adv)
        overrides = {adv: ssl_pretrain(init.parties[adv].bottom_model, own, config.ssl, seed)}
    system = _system_for(config, train_set, partition, seed, overrides)

    attacker = None
    lia_config = None
    if mode != "none":
        known = config.attack.known_id if config.attack.known_id is not None else \
            choose_known_id(train_set, target, seed)
        lia_config = LIAConfig(known, config.attack.attack_epoch, config.attack.ratio,
                               train_set.class_count, train_set.n, config.attack.lia_mode, target)
        plan = AttackPlan(target, known, config.attack.attack_epoch, mode)
        attacker = HassleAttacker(plan, lia_config, inferred_override)
        system.attach_attacker(attacker, train_set)

    trace: List[float] = []

    def on_epoch_end(sys_: VFLSystem, _summary) -> None:
        trace.append(feature_saliency(sys_, sal_features, sal_labels, adv,
                                      partition.active_index).ratio)

    event_log = None
    if config.event_log and artifacts_dir is not None:
        event_log = EventLog(Path(artifacts_dir) / f"events-seed{seed}.tsv")
        system.event_log = event_log
    try:
        train(system, train_set, partition, on_epoch_end=on_epoch_end)
    finally:
        if event_log is not None:
            event_log.close()

    result.saliency_trace = trace
    result.saliency_ratio = trace[-1] if trace else None
    result.mta = evaluate(system, test_set, partition)

    if attacker is not None:
        if attacker.lia is not None:
            selected = attacker.lia.selected_ids
            result.lia_precision = float(np.mean(train_set.labels[selected] == target))
            result.selected_count = int(selected.size)
            ds_config = LIAConfig(lia_config.known_id, lia_config.attack_epoch, lia_config.ratio,
                                  lia_config.class_count, lia_config.sample_count, "ds", target)
            result.lia_precision_ds = select_targets(
                score_samples(attacker.trace, ds_config), ds_config, train_set.labels).precision
            result.lia_precision_curve = precision_by_epoch(
                attacker.trace, lia_config, train_set.labels)["hassle"]
            result.poison_rate = attacker.plan.inferred_ids.size / train_set.n
            result.substitutions_per_epoch = dict(sorted(attacker.substitutions.items()))
            result.clip_violations = attacker.clip_violations
        if attacker.h_adv is not None:
            for d in system.defense_stack:
                if hasattr(d, "reset_counts"):
                    d.reset_counts()
            result.asr = evaluate_asr(system, test_set, partition, attacker.h_adv.vector, target)
            result.h_adv_norm = attacker.h_adv.norm
            result.norm_cap = attacker.h_adv.norm_cap
        result.stealth = _stealth_summary(attacker)
        if artifacts_dir is not None:
            _export_artifacts(Path(artifacts_dir), seed, attacker)

    for d in system.defense_stack:
        summary = d.summary()
        if "vflip_flag_rate" in summary:
            result.vflip_flag_rate = summary["vflip_flag_rate"]
        if "anomaly_flag_rate" in summary:
            result.anomaly_flag_rate = summary["anomaly_flag_rate"]
        if isinstance(d, ABLDefense):
            result.abl_flagged = int(d.flagged.sum())
            if attacker is not None:
                result.abl_overlap = int(np.intersect1d(d.flagged_ids,
                                                        attacker.plan.inferred_ids).size)
    result.seconds = time.time() - t0
    log.info("seed %d %s: precision %s  ASR %s  MTA %.4f",
             seed, mode, _fmt(result.lia_precision), _fmt(result.asr), result.mta)
    return result


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def _export_artifacts(out: Path, seed: int, attacker: HassleAttacker) -> None:
    if attacker.trace is not None and attacker.trace.epochs:
        export_trace(out / f"trace-seed{seed}.vflt", attacker.trace)
    if attacker.h_adv is not None:
        envelope.write_envelope(out / f"hadv-seed{seed}.vflt", envelope.MAGIC_TRACE, {
            "h_adv": attacker.h_adv.vector,
            "norm_cap": np.array([attacker.h_adv.norm_cap]),
        })


# ─── Main ────────────────────────────────────────────────────────────────────

def main() -> None:
    parser = argparse.ArgumentParser(description="Run one seed of a hijacking experiment")
    parser.add_argument("--config", required=True, help="Experiment config (JSON)")
    parser.add_argument("--seed", type=int, default=None, help="Seed (default: first in config)")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s  %(levelname)-7s  %(message)s")

    config = load_config(args.config)
    seed = config.seeds[0] if args.seed is None else args.seed
    try:
        result = run_hassle(config, seed)
    except VFLError as e:
        log.error("seed %d failed: %s", seed, e)
        raise SystemExit(1)

    print(f"\n{'='*60}")
    print(f"  {config.name} — seed {seed} ({result.mode})")
    print(f"{'='*60}")
    print(f"  LIA precision:  {_fmt(result.lia_precision)}")
    print(f"  ASR:            {_fmt(result.asr)}")
    print(f"  MTA:            {_fmt(result.mta)}")
    print(f"  Clean MTA:      {_fmt(result.clean_mta)}")
    print(f"  Saliency ratio: {_fmt(result.saliency_ratio)}")
    print(f"  Time:           {result.seconds:.1f}s")


if __name__ == "__main__":
    main()
