#!/usr/bin/env python3
"""
data.py — Datasets and vertical feature partitioning for the SplitVFL testbed.

  load_income          UCI Adult census CSV -> 104 standardized features, binary label
                       (>50K = class 1), 36178/9044 train/test split
  synth_blobs          seeded Gaussian clusters, the desk-scale stand-in for image datasets
  vertical_partition   contiguous column slices (one per party) + per-party embedding dims

Preprocessing of the Adult file is pinned in INCOME_MANIFEST: rows with a "?" marker are
dropped, every categorical column is one-hot encoded against a fixed category list, and
all columns are standardized with train-split statistics. A category outside the list is
an ingestion error naming its column.

Usage:
    python data.py --income data/adult.csv          # Ingest, print shapes, write the VFLD1 cache
    python data.py --synth 2000 10 32 --std 1.0     # Generate and describe synthetic blobs
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.preprocessing import OneHotEncoder, StandardScaler

import envelope
from errors import ConfigurationError, IngestionError, InputError
from numerics import DTYPE, make_rng

log = logging.getLogger("data")

PROJECT_ROOT = Path(__file__).resolve().parent.parent
DATA_DIR = PROJECT_ROOT / "data"
DEFAULT_INCOME_CSV = DATA_DIR / "adult.csv"
CACHE_DIR = DATA_DIR / "cache"

# ---------------------------------------------------------------------------
# Income preprocessing manifest
# ---------------------------------------------------------------------------

INCOME_MANIFEST = {
    "version": 1,
    "missing_marker": "?",
    "label_column": "income",
    "positive_label": ">50K",
    "negative_label": "<=50K",
    "train_fraction": 0.8,
    "split_seed": 0,
    "continuous": ["age", "fnlwgt", "education-num", "capital-gain",
                   "capital-loss", "hours-per-week"],
    # Never-worked only occurs on rows with a missing occupation, so it never survives.
    "categorical": {
        "workclass": ["Private", "Self-emp-not-inc", "Self-emp-inc", "Federal-gov",
                      "Local-gov", "State-gov", "Without-pay"],
        "education": ["Bachelors", "Some-college", "11th", "HS-grad", "Prof-school",
                      "Assoc-acdm", "Assoc-voc", "9th", "7th-8th", "12th", "Masters",
                      "1st-4th", "10th", "Doctorate", "5th-6th", "Preschool"],
        "marital-status": ["Married-civ-spouse", "Divorced", "Never-married", "Separated",
                           "Widowed", "Married-spouse-absent", "Married-AF-spouse"],
        "occupation": ["Tech-support", "Craft-repair", "Other-service", "Sales",
                       "Exec-managerial", "Prof-specialty", "Handlers-cleaners",
                       "Machine-op-inspct", "Adm-clerical", "Farming-fishing",
                       "Transport-moving", "Priv-house-serv", "Protective-serv",
                       "Armed-Forces"],
        "relationship": ["Wife", "Own-child", "Husband", "Not-in-family",
                         "Other-relative", "Unmarried"],
        "race": ["White", "Asian-Pac-Islander", "Amer-Indian-Eskimo", "Other", "Black"],
        "sex": ["Female", "Male"],
        "native-country": ["United-States", "Cambodia", "England", "Puerto-Rico", "Canada",
                           "Germany", "Outlying-US(Guam-USVI-etc)", "India", "Japan",
                           "Greece", "South", "China", "Cuba", "Iran", "Honduras",
                           "Philippines", "Italy", "Poland", "Jamaica", "Vietnam",
                           "Mexico", "Portugal", "Ireland", "France",
                           "Dominican-Republic", "Laos", "Ecuador", "Taiwan", "Haiti",
                           "Columbia", "Hungary", "Guatemala", "Nicaragua", "Scotland",
                           "Thailand", "Yugoslavia", "El-Salvador", "Trinadad&Tobago",
                           "Peru", "Hong", "Holand-Netherlands"],
    },
}

# Column order of the headerless UCI adult.data / adult.test files.
UCI_COLUMNS = ["age", "workclass", "fnlwgt", "education", "education-num",
               "marital-status", "occupation", "relationship", "race", "sex",
               "capital-gain", "capital-loss", "hours-per-week", "native-country",
               "income"]

COLUMN_ALIASES = {
    "educational-num": "education-num",
    "education_num": "education-num",
    "marital_status": "marital-status",
    "native_country": "native-country",
    "capital_gain": "capital-gain",
    "capital_loss": "capital-loss",
    "hours_per_week": "hours-per-week",
    "gender": "sex",
    "class": "income",
}


def income_feature_count(manifest: Dict = INCOME_MANIFEST) -> int:
    return len(manifest["continuous"]) + sum(len(v) for v in manifest["categorical"].values())


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"
    feature_names: Optional[List[str]] = None

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=DTYPE)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.ndim != 2:
            raise InputError(f"features must be 2-D, got {self.features.shape}")
        n = self.features.shape[0]
        if n == 0:
            raise InputError(f"{self.split} split is empty")
        if self.labels.shape[0] != n:
            raise InputError(f"{self.labels.shape[0]} labels for {n} feature rows")
        if self.class_count < 2:
            raise InputError(f"class_count must be >= 2, got {self.class_count}")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise InputError(f"labels outside [0, {self.class_count})")
        if self.split not in ("train", "test"):
            raise InputError(f"split must be train|test, got {self.split!r}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def subset(self, ids: Sequence[int]) -> "LabeledDataset":
        ids = np.asarray(ids, dtype=np.int64)
        return LabeledDataset(self.features[ids], self.labels[ids], self.class_count,
                              self.split, self.feature_names)


@dataclass
class VerticalPartition:
    party_slices: List[Tuple[int, int]]
    adversary_index: int
    embedding_dims: List[int]
    feature_count: int
    active_index: int = 0

    def __post_init__(self) -> None:
        K = len(self.party_slices)
        if K < 2:
            raise ConfigurationError(f"vertical FL needs at least 2 parties, got {K}")
        if len(self.embedding_dims) != K:
            raise ConfigurationError(f"{len(self.embedding_dims)} embedding dims for {K} parties")
        cursor = 0
        for k, (start, stop) in enumerate(self.party_slices):
            if start != cursor or stop <= start:
                raise ConfigurationError(
                    f"party {k} slice [{start},{stop}) is empty or not contiguous")
            cursor = stop
        if cursor != self.feature_count:
            raise ConfigurationError(
                f"slices cover [0,{cursor}) but the dataset has {self.feature_count} columns")
        if min(self.embedding_dims) < 1:
            raise ConfigurationError(f"embedding dims must be >= 1, got {self.embedding_dims}")
        if not 0 <= self.adversary_index < K or self.adversary_index == self.active_index:
            raise ConfigurationError(
                f"adversary index {self.adversary_index} must name a passive party in [1,{K})")

    @property
    def party_count(self) -> int:
        return len(self.party_slices)

    @property
    def slice_widths(self) -> List[int]:
        return [stop - start for start, stop in self.party_slices]

    @property
    def total_embedding_dim(self) -> int:
        return int(sum(self.embedding_dims))

    @property
    def embedding_offsets(self) -> List[int]:
        return [int(v) for v in np.concatenate([[0], np.cumsum(self.embedding_dims)[:-1]])]

    def embedding_range(self, k: int) -> Tuple[int, int]:
        start = self.embedding_offsets[k]
        return start, start + self.embedding_dims[k]

    def party_features(self, features: np.ndarray, k: int) -> np.ndarray:
        start, stop = self.party_slices[k]
        return features[:, start:stop]

    def split_features(self, features: np.ndarray) -> List[np.ndarray]:
        return [self.party_features(features, k) for k in range(self.party_count)]


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------

def standardize(train: np.ndarray, test: np.ndarray) -> Tuple[np.ndarray, np.ndarray, StandardScaler]:
    """Zero-mean / unit-std columns from train statistics, applied to both splits."""
    scaler = StandardScaler()
    train_std = scaler.fit_transform(np.asarray(train, dtype=DTYPE))
    test_std = scaler.transform(np.asarray(test, dtype=DTYPE))
    return np.ascontiguousarray(train_std), np.ascontiguousarray(test_std), scaler


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# ---------------------------------------------------------------------------
# Income
# ---------------------------------------------------------------------------

def _read_income_frame(csv_path: Path) -> pd.DataFrame:
    with open(csv_path, "r", encoding="utf-8") as fh:
        first = fh.readline()
    has_header = "age" in [c.strip().lower() for c in first.split(",")]
    frame = pd.read_csv(csv_path, header=0 if has_header else None,
                        names=None if has_header else UCI_COLUMNS,
                        skipinitialspace=True, dtype=str, comment="|",
                        encoding="utf-8", keep_default_na=False)
    frame.columns = [COLUMN_ALIASES.get(c.strip().lower(), c.strip().lower())
                     for c in frame.columns]
    return frame


def _income_matrix(frame: pd.DataFrame, manifest: Dict) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    label_col = manifest["label_column"]
    needed = manifest["continuous"] + list(manifest["categorical"]) + [label_col]
    for col in needed:
        if col not in frame.columns:
            raise IngestionError(f"missing column {col!r}", column=col)
    frame = frame[needed].apply(lambda s: s.str.strip())
    frame = frame.dropna(how="all")
    frame = frame[(frame != "").all(axis=1)]
    missing = (frame == manifest["missing_marker"]).any(axis=1)
    frame = frame[~missing].reset_index(drop=True)

    labels_raw = frame[label_col].str.rstrip(".")
    unknown = ~labels_raw.isin([manifest["positive_label"], manifest["negative_label"]])
    if unknown.any():
        raise IngestionError(
            f"column {label_col!r}: unexpected value {labels_raw[unknown].iloc[0]!r}",
            column=label_col)
    labels = (labels_raw == manifest["positive_label"]).to_numpy(dtype=np.int64)

    try:
        continuous = frame[manifest["continuous"]].astype(DTYPE).to_numpy()
    except ValueError as e:
        bad = next(c for c in manifest["continuous"]
                   if pd.to_numeric(frame[c], errors="coerce").isna().any())
        raise IngestionError(f"column {bad!r}: non-numeric value", column=bad) from e

    for col, categories in manifest["categorical"].items():
        drift = ~frame[col].isin(categories)
        if drift.any():
            raise IngestionError(
                f"column {col!r}: unexpected category {frame[col][drift].iloc[0]!r}",
                column=col)
    cat_cols = list(manifest["categorical"])
    encoder = OneHotEncoder(categories=[manifest["categorical"][c] for c in cat_cols],
                            handle_unknown="error", sparse_output=False, dtype=DTYPE)
    onehot = encoder.fit_transform(frame[cat_cols].to_numpy())
    names = list(manifest["continuous"]) + [
        f"{c}={v}" for c in cat_cols for v in manifest["categorical"][c]]
    return np.hstack([continuous, onehot]), labels, names


def _income_cache_path(csv_path: Path, cache_dir: Path, manifest: Dict) -> Path:
    h = hashlib.sha256()
    h.update(csv_path.read_bytes())
    h.update(json.dumps(manifest, sort_keys=True).encode("utf-8"))
    return cache_dir / f"income-v{manifest['version']}-{h.hexdigest()[:16]}.vfld"


def load_income(csv_path: Union[str, Path] = DEFAULT_INCOME_CSV,
                cache_dir: Optional[Union[str, Path]] = None,
                manifest: Dict = INCOME_MANIFEST) -> Tuple[LabeledDataset, LabeledDataset]:
    """Ingest the Adult census CSV into standardized train/test splits."""
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise FileNotFoundError(f"Income CSV not found: {csv_path}")

    cache_path = None
    if cache_dir is not None:
        cache_path = _income_cache_path(csv_path, Path(cache_dir), manifest)
        if cache_path.exists():
            log.info("loading cached Income dataset %s", cache_path.name)
            return load_dataset_pair(cache_path)

    frame = _read_income_frame(csv_path)
    features, labels, names = _income_matrix(frame, manifest)
    n = features.shape[0]
    order = make_rng(manifest["split_seed"], "income-split").permutation(n)
    n_train = _half_up(manifest["train_fraction"] * n)
    train_ids, test_ids = order[:n_train], order[n_train:]
    train_x, test_x, _ = standardize(features[train_ids], features[test_ids])
    train = LabeledDataset(train_x, labels[train_ids], 2, "train", names)
    test = LabeledDataset(test_x, labels[test_ids], 2, "test", names)
    log.info("Income: %d retained rows -> train %d / test %d, %d features, positive rate %.3f",
             n, train.n, test.n, train.d, float(train.labels.mean()))
    if cache_path is not None:
        save_dataset_pair(cache_path, train, test)
    return train, test


# ---------------------------------------------------------------------------
# Synthetic blobs
# ---------------------------------------------------------------------------

def _blob_means(C: int, d: int, separation: float) -> np.ndarray:
    """C pairwise-equidistant means on basis vectors spread evenly over the d axes; a circle when C > d."""
    means = np.zeros((C, d), dtype=DTYPE)
    if C <= d:
        means[np.arange(C), np.arange(C) * (d // C)] = separation / math.sqrt(2.0)
    else:
        angles = 2.0 * math.pi * np.arange(C) / C
        radius = separation / (2.0 * math.sin(math.pi / C))
        means[:, 0] = radius * np.cos(angles)
        means[:, 1] = radius * np.sin(angles)
    return means


def synth_blobs(n: int, C: int, d: int, cluster_std: float, seed: int,
                test_fraction: float = 0.2,
                separation: float = 4.0) -> Tuple[LabeledDataset, LabeledDataset]:
    """`n` training rows (plus a test split) drawn from C Gaussian clusters."""
    if n < C:
        raise ConfigurationError(f"need n >= C, got n={n}, C={C}")
    if d < 2:
        raise ConfigurationError(f"need d >= 2, got {d}")
    if cluster_std < 0:
        raise ConfigurationError(f"cluster_std must be >= 0, got {cluster_std}")
    rng = make_rng(seed, "synth-blobs")
    means = _blob_means(C, d, separation)
    n_test = max(C, _half_up(n * test_fraction))

    def draw(count: int) -> Tuple[np.ndarray, np.ndarray]:
        labels = rng.permutation(np.arange(count) % C)
        noise = rng.standard_normal((count, d))
        return means[labels] + cluster_std * noise, labels

    train_x, train_y = draw(n)
    test_x, test_y = draw(n_test)
    train_x, test_x, _ = standardize(train_x, test_x)
    return (LabeledDataset(train_x, train_y, C, "train"),
            LabeledDataset(test_x, test_y, C, "test"))


# ---------------------------------------------------------------------------
# Vertical partition
# ---------------------------------------------------------------------------

def _split_sizes(total: int, ratios: Sequence[float]) -> List[int]:
    sizes = [_half_up(r * total) for r in ratios[:-1]]
    sizes.append(total - sum(sizes))
    return sizes


def adversary_share_ratios(party_count: int, adversary_index: int, share: float) -> List[float]:
    """Ratios giving the adversary `share` and splitting the rest equally."""
    if party_count < 2:
        raise ConfigurationError("need at least 2 parties")
    if not 0.0 < share < 1.0:
        raise ConfigurationError(f"feature ratio must be in (0,1), got {share}")
    rest = (1.0 - share) / (party_count - 1)
    return [share if k == adversary_index else rest for k in range(party_count)]


def vertical_partition(dataset: Union[LabeledDataset, int], ratios: Sequence[float],
                       embedding_dim: int = 10, adversary_index: int = 1,
                       proportional_embeddings: bool = False) -> VerticalPartition:
    """Contiguous column slices sized round(ratio * d), remainder to the last party."""
    d = dataset if isinstance(dataset, int) else dataset.d
    ratios = [float(r) for r in ratios]
    if len(ratios) < 2:
        raise ConfigurationError(f"vertical FL needs K >= 2 parties, got ratios {ratios}")
    if any(r <= 0 for r in ratios):
        raise ConfigurationError(f"every ratio must be > 0, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"ratios must sum to 1, got {sum(ratios)!r}")
    sizes = _split_sizes(d, ratios)
    if min(sizes) < 1:
        raise ConfigurationError(f"a party receives zero columns: sizes {sizes} for d={d}")
    slices, cursor = [], 0
    for size in sizes:
        slices.append((cursor, cursor + size))
        cursor += size
    if proportional_embeddings:
        dims = _split_sizes(embedding_dim * len(ratios), ratios)
        if min(dims) < 1:
            raise ConfigurationError(f"a party receives a zero-width embedding: {dims}")
    else:
        dims = [int(embedding_dim)] * len(ratios)
    return VerticalPartition(slices, adversary_index, dims, d)


# ---------------------------------------------------------------------------
# VFLD1 dataset cache
# ---------------------------------------------------------------------------

def save_dataset_pair(path: Union[str, Path], train: LabeledDataset, test: LabeledDataset) -> Path:
    return envelope.write_envelope(path, envelope.MAGIC_DATA, {
        "class_count": np.array([train.class_count], dtype=DTYPE),
        "train/features": train.features,
        "train/labels": train.labels.astype(DTYPE),
        "test/features": test.features,
        "test/labels": test.labels.astype(DTYPE),
    })


def load_dataset_pair(path: Union[str, Path]) -> Tuple[LabeledDataset, LabeledDataset]:
    _, s = envelope.read_envelope(path, envelope.MAGIC_DATA)
    C = int(s["class_count"][0])
    return (LabeledDataset(s["train/features"], s["train/labels"].astype(np.int64), C, "train"),
            LabeledDataset(s["test/features"], s["test/labels"].astype(np.int64), C, "test"))


# ---------------------------------------------------------------------------
# Main
# ---------------------------------------------------------------------------

def main() -> None:
    parser = argparse.ArgumentParser(description="SplitVFL testbed datasets")
    parser.add_argument("--income", type=str, default=None, metavar="CSV",
                        help="Ingest the Adult census CSV and write the cache")
    parser.add_argument("--synth", type=int, nargs=3, default=None, metavar=("N", "C", "D"),
                        help="Generate synthetic blobs")
    parser.add_argument("--std", type=float, default=1.0, help="Cluster std (default: 1.0)")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s  %(levelname)-7s  %(message)s")

    if args.income:
        train, test = load_income(args.income, cache_dir=CACHE_DIR)
    elif args.synth:
        n, C, d = args.synth
        train, test = synth_blobs(n, C, d, args.std, args.seed)
    else:
        parser.error("one of --income / --synth is required")
        return
    print(f"{'='*60}")
    print(f"  Train:    {train.n} rows x {train.d} cols")
    print(f"  Test:     {test.n} rows")
    print(f"  Classes:  {train.class_count}  counts={train.class_counts().tolist()}")
    print(f"{'='*60}")


if __name__ == "__main__":
    main()
