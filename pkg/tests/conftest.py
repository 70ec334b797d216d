"""Shared fixtures: backend/ on sys.path, small seeded datasets and systems."""

import os
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "backend"))

import data  # noqa: E402
import splitvfl  # noqa: E402


def income_csv():
    """Path of the Adult CSV if present, else None."""
    path = Path(os.environ.get("VFL_INCOME_CSV", ROOT / "data" / "adult.csv"))
    return path if path.exists() else None


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def blobs():
    """4-class separable blobs, 12 features."""
    return data.synth_blobs(400, 4, 12, 0.8, seed=3)


@pytest.fixture
def partition(blobs):
    train, _ = blobs
    return data.vertical_partition(train, [0.5, 0.5], embedding_dim=4)


@pytest.fixture
def small_system(blobs, partition):
    train, _ = blobs
    return splitvfl.build_system(partition, train.class_count, train.n, lr=0.05,
                                 batch_size=32, epochs=3, top_hidden=16,
                                 bottom_hidden=16, seed=7)
