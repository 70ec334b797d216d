"""End-to-end checks on the real Adult census CSV (skipped when it is not present)."""

import json

import pytest

import data
import hijack
import lia
from config import config_from_dict
from conftest import ROOT, income_csv

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(income_csv() is None, reason="data/adult.csv not present (set VFL_INCOME_CSV)"),
]


def _income(name, **extra):
    raw = json.loads((ROOT / "configs" / f"{name}.json").read_text())
    raw["dataset"]["path"] = str(income_csv())
    raw.update(extra)
    return config_from_dict(raw)


@pytest.fixture(scope="module")
def income_config():
    return _income("income-hassle")


@pytest.fixture(scope="module")
def income_data(income_config):
    return hijack.prepare_data(income_config)


@pytest.fixture(scope="module")
def hassle_result(income_config, income_data):
    return hijack.run_hassle(income_config, 0, data=income_data)


def test_ingestion_shape(income_data):
    train, test, partition = income_data
    assert (train.n, test.n, train.d) == (36178, 9044, 104)
    assert train.class_count == 2
    assert partition.party_slices == [(0, 52), (52, 104)]


def test_selection_quota():
    assert lia.LIAConfig(0, 2, 8, 2, 36178).quota == 2261


def test_hijack_reproduction(hassle_result):
    assert hassle_result.status == "ok"
    assert 0.60 <= hassle_result.clean_mta <= 0.75
    assert hassle_result.asr >= 0.95
    assert abs(hassle_result.mta - hassle_result.clean_mta) <= 0.08
    assert hassle_result.selected_count == 2261


@pytest.mark.parametrize("detector", ["pca_recon", "mahalanobis"])
def test_adversarial_embedding_stays_within_population(hassle_result, detector):
    stats = hassle_result.stealth
    assert stats[f"{detector}_adv_max"] < stats[f"{detector}_pop_mean"] + stats[f"{detector}_pop_std"]


def test_pretrained_bottom_raises_saliency(hassle_result, income_data):
    assert hassle_result.saliency_ratio > 1.0
    random_init = hijack.run_hassle(_income("income-grad", baseline=False), 0, data=income_data)
    assert random_init.saliency_ratio < hassle_result.saliency_ratio


def test_limit_lowers_asr(hassle_result, income_data):
    limited = hijack.run_hassle(_income("income-limit", baseline=False), 0, data=income_data)
    assert limited.asr < hassle_result.asr


def test_ingestion_cache(tmp_path):
    first = data.load_income(income_csv(), cache_dir=tmp_path)
    second = data.load_income(income_csv(), cache_dir=tmp_path)
    assert len(list(tmp_path.glob("*.vfld"))) == 1
    assert (second[0].features == first[0].features).all()
    assert (second[1].labels == first[1].labels).all()
