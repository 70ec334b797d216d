"""Tests for lia.py: trace recording, cosine scoring, quota selection, gradient-direction properties."""

import numpy as np
import pytest

import data
import lia
import numerics as nx
import splitvfl as sv
from errors import ConfigurationError, InputError, InternalError


def _config(n=8, known=0, attack=2, ratio=1.0, C=2, mode="hassle"):
    return lia.LIAConfig(known, attack, ratio, C, n, mode=mode)


def _filled_trace(config, per_epoch):
    trace = lia.new_trace(config, per_epoch[0].shape[1])
    for e, grads in enumerate(per_epoch, start=2):
        trace.record_batch(e, np.arange(config.sample_count), grads)
    return trace


class TestConfig:

    def test_quota(self):
        assert lia.LIAConfig(0, 2, 4, 10, 1000).quota == 25
        assert lia.LIAConfig(0, 2, 8, 2, 36178).quota == 2261

    @pytest.mark.parametrize("kw", [dict(attack_epoch=1), dict(ratio=0.5),
                                    dict(class_count=1), dict(mode="spectral"),
                                    dict(known_id=50)])
    def test_invalid(self, kw):
        args = dict(known_id=0, attack_epoch=2, ratio=2, class_count=2, sample_count=10)
        args.update(kw)
        with pytest.raises(ConfigurationError):
            lia.LIAConfig(**args)


class TestTrace:

    def test_first_epoch_skipped(self):
        trace = lia.new_trace(_config(n=4), 3)
        assert trace.record_batch(1, np.arange(4), np.ones((4, 3))) is False
        assert trace.epochs_recorded == 0

    def test_epochs_after_attack_skipped(self):
        trace = lia.new_trace(_config(n=4, attack=2), 3)
        assert trace.record_batch(3, np.arange(4), np.ones((4, 3))) is False

    def test_counting(self):
        config = _config(n=5, attack=7)
        trace = _filled_trace(config, [np.ones((5, 2))] * 6)
        assert trace.epochs_recorded == 6
        assert sum(g.shape[0] for g in trace.epochs.values()) == 30
        assert trace.is_complete()

    def test_duplicate_sample(self):
        trace = lia.new_trace(_config(n=4), 2)
        trace.record_batch(2, [0, 1], np.ones((2, 2)))
        with pytest.raises(InternalError):
            trace.record_batch(2, [1, 2], np.ones((2, 2)))

    def test_record_epoch(self):
        trace = lia.new_trace(_config(n=4), 2)
        batches = [(np.array([2, 0]), np.ones((2, 2))), (np.array([1, 3]), np.ones((2, 2)))]
        lia.record_epoch(trace, 2, batches)
        assert trace.is_complete()
        lia.record_epoch(trace, 1, batches)
        assert trace.recorded_epochs == [2]

    def test_incomplete_trace_is_not_scored(self):
        config = _config(n=4)
        trace = lia.new_trace(config, 2)
        trace.record_batch(2, [0, 1], np.ones((2, 2)))
        with pytest.raises(InternalError):
            lia.score_samples(trace, config)

    def test_export_round_trip(self, tmp_path, rng):
        config = _config(n=6, attack=3)
        trace = _filled_trace(config, [rng.standard_normal((6, 3)) for _ in range(2)])
        path = lia.export_trace(tmp_path / "trace.vflt", trace)
        assert path.read_bytes()[:5] == b"VFLT1"
        loaded = lia.load_trace(path)
        assert loaded.known_id == 0 and loaded.attack_epoch == 3
        np.testing.assert_array_equal(loaded.epochs[3], trace.epochs[3])
        assert loaded.is_complete()


class TestScoring:

    def test_known_scores_one(self, rng):
        for mode in lia.MODES:
            config = _config(n=6, attack=3, mode=mode)
            trace = _filled_trace(config, [rng.standard_normal((6, 4)) for _ in range(2)])
            assert lia.score_samples(trace, config).scores[0] == pytest.approx(1.0)

    def test_opposite_scores_minus_one(self):
        config = _config(n=2)
        trace = _filled_trace(config, [np.array([[1.0, 2.0], [-1.0, -2.0]])])
        assert lia.score_samples(trace, config).scores[1] == pytest.approx(-1.0)

    def test_arithmetic_mean_over_epochs(self):
        config = _config(n=2, attack=3)
        e2 = np.array([[1.0, 0.0], [0.8, 0.6]])
        e3 = np.array([[1.0, 0.0], [0.4, np.sqrt(1 - 0.16)]])
        trace = _filled_trace(config, [e2, e3])
        assert lia.score_samples(trace, config).scores[1] == pytest.approx(0.6)

    def test_ds_uses_last_epoch(self):
        config = _config(n=2, attack=3, mode="ds")
        e2 = np.array([[1.0, 0.0], [0.8, 0.6]])
        e3 = np.array([[1.0, 0.0], [0.4, np.sqrt(1 - 0.16)]])
        scored = lia.score_samples(_filled_trace(config, [e2, e3]), config)
        assert scored.scores[1] == pytest.approx(0.4)
        assert scored.epochs_used == [3]

    def test_zero_gradient_flagged(self):
        config = _config(n=3)
        trace = _filled_trace(config, [np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]])])
        with pytest.warns(nx.DegenerateGradientWarning):
            scored = lia.score_samples(trace, config)
        assert scored.scores[1] == 0.0
        assert scored.degenerate.tolist() == [False, True, False]

    def test_scale_invariance(self, rng):
        config = _config(n=20, attack=3, ratio=2.0)
        grads = [rng.standard_normal((20, 4)) for _ in range(2)]
        a = lia.select_targets(lia.score_samples(_filled_trace(config, grads), config), config)
        scaled = [g * 37.5 for g in grads]
        b = lia.select_targets(lia.score_samples(_filled_trace(config, scaled), config), config)
        np.testing.assert_array_equal(a.selected_ids, b.selected_ids)


class TestSelection:

    def test_precision(self):
        config = lia.LIAConfig(0, 2, 1, 2, 8)
        scores = np.array([1.0, 0.9, 0.8, 0.7, 0.1, 0.0, -0.5, -1.0])
        labels = np.array([1, 1, 1, 0, 1, 0, 0, 0])
        result = lia.select_targets(scores, config, labels)
        assert result.selected_ids.tolist() == [0, 1, 2, 3]
        assert result.precision == pytest.approx(0.75)

    def test_known_always_selected(self):
        config = lia.LIAConfig(5, 2, 4, 2, 8)
        scores = np.array([0.9, 0.9, 0.8, 0.7, 0.1, -0.2, -0.5, -1.0])
        assert 5 in lia.select_targets(scores, config).selected_ids

    def test_ties_by_lower_id(self):
        config = lia.LIAConfig(0, 2, 1, 2, 8)
        scores = np.array([1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.0, 0.0])
        assert lia.select_targets(scores, config).selected_ids.tolist() == [0, 1, 2, 3]

    def test_larger_ratio_is_subset(self, rng):
        scores = rng.uniform(-1, 1, size=200)
        loose = lia.select_targets(scores, lia.LIAConfig(0, 2, 2, 4, 200))
        tight = lia.select_targets(scores, lia.LIAConfig(0, 2, 5, 4, 200))
        assert set(tight.selected_ids) <= set(loose.selected_ids)

    def test_zero_quota(self):
        with pytest.raises(ConfigurationError):
            lia.select_targets(np.zeros(5), lia.LIAConfig(0, 2, 4, 2, 5))

    def test_score_count(self):
        with pytest.raises(InputError):
            lia.select_targets(np.zeros(5), lia.LIAConfig(0, 2, 1, 2, 8))


class TestGradientDirection:

    def test_uniform_probabilities_give_label_weight_form(self, rng):
        C, H = 4, 6
        top = nx.MLPModel([rng.standard_normal((C, H))], [np.zeros(C)])
        x = np.zeros((C, H))
        logits, cache = nx.mlp_forward(top, x)
        labels = np.arange(C)
        ce = nx.batch_softmax_cross_entropy(logits, labels)
        np.testing.assert_allclose(ce.probabilities, 1.0 / C, atol=1e-15)
        _, dh = nx.mlp_backward(top, cache, ce.errors)
        W = top.weights[0]
        for y in labels:
            others = sum(W[c] for c in range(C) if c != y)
            expected = -(1 - 1 / C) * W[y] + others / C
            np.testing.assert_allclose(dh[y], expected, atol=1e-12)

    @pytest.fixture
    def binary_task(self):
        train, _ = data.synth_blobs(400, 2, 8, 1.0, seed=4)
        part = data.vertical_partition(train, [0.5, 0.5], embedding_dim=4)
        known = int(np.flatnonzero(train.labels == 1)[0])
        return train, part, known

    def _builder(self, train, part):
        def build(depth):
            system = sv.build_system(part, 2, train.n, top_layers=depth, epochs=4,
                                     top_hidden=16, bottom_hidden=16, seed=1)
            return system, train, part
        return build

    def test_sign_agreement_single_layer(self, binary_task):
        train, part, known = binary_task
        config = lia.LIAConfig(known, 2, 2, 2, train.n)
        system, _, _ = self._builder(train, part)(1)
        trace = lia.new_trace(config, 4)
        system.attach_attacker(lia.GradientRecorder(trace), train)
        sv.train(system, train, part, epochs=2)
        assert lia.direction_label_agreement(trace, train.labels, 2, pairs=5000) >= 0.95

    def test_single_layer_precision(self, binary_task):
        train, part, known = binary_task
        config = lia.LIAConfig(known, 2, 2, 2, train.n)
        out = lia.lia_precision_sweep(self._builder(train, part), [1], config, train.labels)
        assert out[1] >= 0.99

    def test_sweep_depth_range(self, binary_task):
        train, part, known = binary_task
        config = lia.LIAConfig(known, 2, 2, 2, train.n)
        with pytest.raises(ConfigurationError):
            lia.lia_precision_sweep(self._builder(train, part), [6], config, train.labels)

    def test_precision_by_epoch(self, binary_task):
        train, part, known = binary_task
        config = lia.LIAConfig(known, 4, 2, 2, train.n)
        system, _, _ = self._builder(train, part)(2)
        trace = lia.new_trace(config, 4)
        system.attach_attacker(lia.GradientRecorder(trace), train)
        sv.train(system, train, part, epochs=4)
        curves = lia.precision_by_epoch(trace, config, train.labels)
        assert len(curves["ds"]) == len(curves["hassle"]) == 3
        assert curves["ds"][0] == curves["hassle"][0]
        assert all(0.0 <= p <= 1.0 for p in curves["hassle"])
