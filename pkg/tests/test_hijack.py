"""Tests for hijack.py: h_adv lifecycle, poisoning, ASR, saliency, end-to-end runs per mode."""

import json

import numpy as np
import pytest

import hijack as hj
import numerics as nx
import splitvfl as sv
from config import config_from_dict
from conftest import ROOT
from errors import ConfigurationError, InputError
from lia import LIAConfig
from report import row_from_result


def tiny_config(mode="hassle", **extra):
    raw = {
        "name": f"tiny-{mode}",
        "dataset": {"kind": "synth", "n": 240, "classes": 3, "dim": 6, "cluster_std": 1.0},
        "model": {"embedding_dim": 3, "top_hidden": 8, "bottom_hidden": 8},
        "training": {"batch_size": 32, "epochs": 4},
        "attack": {"mode": mode, "attack_epoch": 2, "ratio": 2},
        "ssl": {"pretrain_epochs": 2, "batch_size": 32},
        "saliency_samples": 20,
    }
    raw.update(extra)
    return config_from_dict(raw)


@pytest.fixture(scope="module")
def tiny_data():
    return hj.prepare_data(tiny_config())


class TestAdversarialEmbedding:

    def test_init_is_bottom_forward(self, rng):
        bottom = nx.init_mlp([5, 4, 3], rng)
        row = rng.standard_normal(5)
        h = hj.init_adv_embedding(bottom, row, 2.0)
        expected, _ = nx.mlp_forward(bottom, row)
        np.testing.assert_array_equal(h.vector, expected[0])
        assert h.norm_cap == 2.0 and h.update_count == 0

    def test_update_moves_against_mean_gradient(self):
        h = hj.AdversarialEmbedding(np.array([3.0, 4.0]), norm_cap=10.0)
        out = hj.update_adv(h, np.array([[-1.0, 0.0], [-1.0, 2.0]]))
        np.testing.assert_allclose(out.vector, [4.0, 3.0])
        assert out.update_count == 1

    def test_update_clips_down_only(self):
        h = hj.AdversarialEmbedding(np.array([3.0, 4.0]), norm_cap=1.0)
        out = hj.update_adv(h, np.zeros((1, 2)))
        assert out.norm == pytest.approx(1.0)
        np.testing.assert_allclose(out.vector, [0.6, 0.8])
        small = hj.AdversarialEmbedding(np.array([0.3, 0.4]), norm_cap=1.0)
        assert hj.update_adv(small, np.zeros((1, 2))).norm == pytest.approx(0.5)

    def test_frozen_is_untouched(self):
        h = hj.AdversarialEmbedding(np.array([1.0, 1.0]), 5.0, frozen=True)
        assert hj.update_adv(h, np.ones((2, 2))) is h

    def test_empty_update(self):
        with pytest.raises(InputError):
            hj.update_adv(hj.AdversarialEmbedding(np.ones(2), 5.0), np.zeros((0, 2)))


class TestPoisoning:

    def test_only_inferred_rows(self):
        plan = hj.AttackPlan(1, 0, 2, "grad", inferred_ids=np.array([4, 9]))
        h = hj.AdversarialEmbedding(np.array([7.0, 7.0]), 10.0)
        embs = np.zeros((3, 2))
        out, positions = hj.poison_batch(np.array([9, 2, 4]), embs, plan, h, 3)
        assert positions.tolist() == [0, 2]
        np.testing.assert_array_equal(out, [[7, 7], [0, 0], [7, 7]])
        assert np.all(embs == 0.0)

    def test_not_before_attack_epoch(self):
        plan = hj.AttackPlan(1, 0, 2, "grad", inferred_ids=np.array([0]))
        h = hj.AdversarialEmbedding(np.ones(2), 10.0)
        out, positions = hj.poison_batch(np.array([0]), np.zeros((1, 2)), plan, h, 2)
        assert positions.size == 0 and np.all(out == 0.0)

    def test_replace_never_poisons_training(self):
        plan = hj.AttackPlan(1, 0, 2, "replace", inferred_ids=np.array([0]))
        assert not plan.poisons(5)

    def test_invalid_plan(self):
        with pytest.raises(ConfigurationError):
            hj.AttackPlan(1, 0, 2, "villain")
        with pytest.raises(ConfigurationError):
            hj.AttackPlan(1, 0, 1)


class TestMetrics:

    def test_asr_matches_manual_predict(self, small_system, blobs, partition):
        _, test = blobs
        h_adv = np.array([0.5, -1.0, 2.0, 0.0])
        asr = hj.evaluate_asr(small_system, test, partition, h_adv, 1)
        eligible = test.labels != 1
        predicted, _ = sv.predict(small_system, partition.split_features(test.features[eligible]),
                                  overrides={1: h_adv})
        assert asr == pytest.approx(np.mean(predicted == 1))

    def test_asr_no_eligible_samples(self, small_system, blobs, partition):
        _, test = blobs
        only_target = test.subset(np.flatnonzero(test.labels == 1))
        with pytest.raises(InputError):
            hj.evaluate_asr(small_system, only_target, partition, np.zeros(4), 1)

    def test_saliency(self):
        out = hj.saliency(np.array([[1.0, 2.0]]), np.array([[3.0, 0.0]]))
        np.testing.assert_allclose(out, [3.0])

    def test_feature_saliency_single_layer(self, blobs, partition):
        train, test = blobs
        system = sv.build_system(partition, 4, train.n, top_layers=1, seed=2)
        features = partition.split_features(test.features)
        result = hj.feature_saliency(system, features, test.labels)
        embs = sv.party_embeddings(system, features)
        W = system.top_model.weights[0]
        expected = np.linalg.norm(W[test.labels][:, 4:] * embs[1], axis=1)
        np.testing.assert_allclose(result.per_party[1], expected, atol=1e-12)
        assert result.ratio == pytest.approx(expected.mean() / result.per_party[0].mean())


class TestRunHassle:

    def test_hassle_mode(self, tiny_data, tmp_path):
        result = hj.run_hassle(tiny_config(), 0, data=tiny_data, artifacts_dir=tmp_path)
        assert result.status == "ok"
        assert 0.0 <= result.lia_precision <= 1.0
        assert 0.0 <= result.lia_precision_ds <= 1.0
        assert result.selected_count == 40
        assert result.poison_rate == pytest.approx(40 / 240)
        assert result.substitutions_per_epoch == {3: 40, 4: 40}
        assert len(result.lia_precision_curve) == 1
        assert 0.0 <= result.asr <= 1.0
        assert 0.0 <= result.mta <= 1.0 and 0.0 <= result.clean_mta <= 1.0
        assert len(result.saliency_trace) == 4
        assert result.h_adv_norm <= result.norm_cap + 1e-9
        assert result.clip_violations == 0
        assert "pca_recon_adv_max" in result.stealth and "mahalanobis_pop_std" in result.stealth
        assert (tmp_path / "trace-seed0.vflt").read_bytes()[:5] == b"VFLT1"
        assert (tmp_path / "hadv-seed0.vflt").exists()

    def test_replace_mode(self, tiny_data):
        result = hj.run_hassle(tiny_config("replace", baseline=False), 0, data=tiny_data)
        assert result.lia_precision is None
        assert result.substitutions_per_epoch is None
        assert result.clean_mta is None
        assert 0.0 <= result.asr <= 1.0
        assert result.h_adv_norm is not None

    def test_no_attacker(self, tiny_data):
        result = hj.run_hassle(tiny_config("none", baseline=False), 0, data=tiny_data)
        assert result.asr is None and result.lia_precision is None
        assert 0.0 <= result.mta <= 1.0

    def test_deterministic(self, tiny_data):
        config = tiny_config("grad", baseline=False)
        a = row_from_result(hj.run_hassle(config, 3, data=tiny_data))
        b = row_from_result(hj.run_hassle(config, 3, data=tiny_data))
        assert a == b

    def test_inferred_override(self, tiny_data):
        train, _, _ = tiny_data
        truth = np.flatnonzero(train.labels == 1)
        config = tiny_config("grad", baseline=False)
        result = hj.run_hassle(config, 0, data=tiny_data, inferred_override=truth)
        assert result.poison_rate == pytest.approx(truth.size / train.n)
        assert result.substitutions_per_epoch == {3: truth.size, 4: truth.size}

    def test_abl_report(self, tiny_data):
        config = tiny_config("grad", baseline=False, defenses=[{"kind": "abl", "params": {"e_abl": 1}}])
        result = hj.run_hassle(config, 0, data=tiny_data)
        assert result.abl_flagged is not None and result.abl_overlap is not None
        assert result.abl_overlap <= result.abl_flagged

    def test_event_log(self, tiny_data, tmp_path):
        config = tiny_config("grad", baseline=False, event_log=True)
        hj.run_hassle(config, 0, data=tiny_data, artifacts_dir=tmp_path)
        lines = (tmp_path / "events-seed0.tsv").read_text().splitlines()
        assert len(lines) == 1 + 4 * 8
        assert any(line.endswith("\t1") for line in lines[1:])

    def test_target_label_out_of_range(self, tiny_data):
        config = tiny_config(attack={"mode": "grad", "target_label": 5, "attack_epoch": 2, "ratio": 2})
        with pytest.raises(ConfigurationError):
            hj.run_hassle(config, 0, data=tiny_data)

    def test_known_id_choice(self, tiny_data):
        train, _, _ = tiny_data
        known = hj.choose_known_id(train, 1, seed=0)
        assert train.labels[known] == 1
        assert known == hj.choose_known_id(train, 1, seed=0)

    def test_replace_leaves_main_task_untouched(self, tiny_data):
        result = hj.run_hassle(tiny_config("replace"), 0, data=tiny_data)
        assert result.mta == result.clean_mta

    def test_empty_inferred_set_matches_clean_run(self, tiny_data):
        train, _, part = tiny_data

        def fresh():
            return sv.build_system(part, train.class_count, train.n, epochs=4,
                                   top_hidden=8, bottom_hidden=8, seed=2)

        clean, attacked = fresh(), fresh()
        known = hj.choose_known_id(train, 1, seed=2)
        attacker = hj.HassleAttacker(hj.AttackPlan(1, known, 2, "grad"),
                                     LIAConfig(known, 2, 2, train.class_count, train.n),
                                     inferred_override=np.zeros(0, dtype=np.int64))
        attacked.attach_attacker(attacker, train)
        sv.train(clean, train, part)
        sv.train(attacked, train, part)
        assert attacker.substitutions == {}
        assert clean.top_model.identical_to(attacked.top_model)
        for a, b in zip(clean.parties, attacked.parties):
            assert a.bottom_model.identical_to(b.bottom_model)

    def test_ep_without_noise_keeps_predictions(self, tiny_data):
        plain = hj.run_hassle(tiny_config("grad", baseline=False), 0, data=tiny_data)
        ep = hj.run_hassle(tiny_config("grad", baseline=False,
                                       defenses=[{"kind": "ep", "params": {"z": 0.0}}]),
                           0, data=tiny_data)
        assert ep.mta == plain.mta
        assert ep.asr == plain.asr


class TestFeatureRatio:

    def test_adversary_embedding_share_follows_feature_share(self):
        config = tiny_config(partition={"feature_ratio": 0.3},
                             model={"embedding_dim": 10, "top_hidden": 8, "bottom_hidden": 8})
        _, _, part = hj.prepare_data(config)
        assert part.slice_widths == [4, 2]
        assert part.embedding_dims == [14, 6]
        assert part.embedding_dims[1] / part.total_embedding_dim == pytest.approx(0.3)

    def test_equal_split_keeps_configured_dims(self):
        config = tiny_config(model={"embedding_dim": 10, "top_hidden": 8, "bottom_hidden": 8})
        _, _, part = hj.prepare_data(config)
        assert part.embedding_dims == [10, 10]


@pytest.mark.slow
def test_gradient_hijacking_beats_replay():
    raw = {
        "dataset": {"kind": "synth", "n": 800, "classes": 4, "dim": 12, "cluster_std": 1.5},
        "model": {"embedding_dim": 4, "top_hidden": 32, "bottom_hidden": 32},
        "training": {"batch_size": 32, "epochs": 8},
        "attack": {"attack_epoch": 2, "ratio": 2},
        "baseline": False,
        "saliency_samples": 50,
    }
    asr = {}
    for mode in ("grad", "replace"):
        config = config_from_dict(dict(raw, attack=dict(raw["attack"], mode=mode)))
        asr[mode] = hj.run_hassle(config, 0).asr
    assert asr["grad"] >= asr["replace"]


def _synth10(mode="hassle", **extra):
    raw = json.loads((ROOT / "configs" / "synth10-hassle.json").read_text())
    raw["attack"] = dict(raw["attack"], mode=mode)
    raw["baseline"] = False
    raw.update(extra)
    return config_from_dict(raw)


@pytest.fixture(scope="module")
def synth10_data():
    return hj.prepare_data(_synth10())


@pytest.mark.slow
def test_ablation_ordering_on_synth10(synth10_data):
    asr = {mode: [] for mode in ("hassle", "grad", "replace")}
    for seed in (0, 1):
        for mode in asr:
            asr[mode].append(hj.run_hassle(_synth10(mode), seed, data=synth10_data).asr)
    mean = {mode: float(np.mean(values)) for mode, values in asr.items()}
    assert mean["hassle"] >= mean["grad"] >= mean["replace"]
    assert mean["hassle"] - mean["replace"] >= 0.20


@pytest.mark.slow
def test_ep_noise_lowers_asr_on_synth10(synth10_data):
    plain = hj.run_hassle(_synth10(), 0, data=synth10_data)
    noisy = hj.run_hassle(_synth10(defenses=[{"kind": "ep", "params": {"z": 1.0}}]),
                          0, data=synth10_data)
    assert noisy.asr < plain.asr
