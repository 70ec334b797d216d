"""Tests for config.py and report.py: schema, validation, hashing, sweeps, CSV/JSON reports."""

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

import config as cfg
import report as rp
from errors import ConfigurationError, InputError


class TestConfig:

    def test_defaults(self):
        config = cfg.config_from_dict({})
        assert config.training.batch_size == 32
        assert config.training.lr == 0.05
        assert config.training.epochs == 10
        assert config.model.embedding_dim == 10
        assert config.model.top_layers == 3
        assert config.attack.ratio == 8.0 and config.attack.attack_epoch == 2
        assert config.attack.target_label == 1
        assert config.ssl.corruption_rate == 0.6

    def test_unknown_key_names_path(self):
        with pytest.raises(ConfigurationError, match=r"training\.lrr: unknown key"):
            cfg.config_from_dict({"training": {"lrr": 0.1}})
        with pytest.raises(ConfigurationError, match="unknown key"):
            cfg.config_from_dict({"trainng": {}})

    def test_type_errors(self):
        with pytest.raises(ConfigurationError, match="training.epochs"):
            cfg.config_from_dict({"training": {"epochs": "ten"}})
        with pytest.raises(ConfigurationError):
            cfg.config_from_dict({"baseline": "yes"})

    @pytest.mark.parametrize("raw", [
        {"model": {"top_layers": 6}},
        {"partition": {"adversary_index": 0}},
        {"partition": {"ratios": [0.3, 0.3]}},
        {"attack": {"attack_epoch": 11}},
        {"attack": {"ratio": 0.5}},
        {"attack": {"mode": "villain"}},
        {"dataset": {"kind": "cifar10"}},
        {"seeds": [1, 1]},
        {"ssl": {"corruption_rate": 1.5}},
        {"defenses": [{"kind": "abl", "params": {"e_abl": 10}}]},
        {"defenses": [{"kind": "coae"}]},
        {"defenses": [{"kind": "gc", "params": {"lam": 0.2}}]},
        {"schema_version": 2},
    ])
    def test_invalid(self, raw):
        with pytest.raises(ConfigurationError):
            cfg.config_from_dict(raw)

    def test_defense_params_resolved(self):
        config = cfg.config_from_dict({"defenses": [{"kind": "ep", "params": {"z": 2}}]})
        assert config.defenses[0].params == {"z": 2, "trials": 100}

    def test_load_reports_json_position(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "name": "x",\n  "seeds": [0,]\n}\n')
        with pytest.raises(ConfigurationError, match=r"bad\.json:3:"):
            cfg.load_config(path)

    def test_load_missing(self, tmp_path):
        with pytest.raises(ConfigurationError, match="not found"):
            cfg.load_config(tmp_path / "missing.json")

    def test_hash_is_stable_and_sensitive(self):
        a = cfg.config_from_dict({"name": "a"})
        b = cfg.config_from_dict({"name": "a", "training": {"epochs": 10}})
        c = cfg.config_from_dict({"name": "a", "training": {"epochs": 9}})
        assert cfg.config_hash(a) == cfg.config_hash(b)
        assert cfg.config_hash(a) != cfg.config_hash(c)
        assert len(cfg.config_hash(a)) == 64
        assert cfg.canonical_json(a) == json.dumps(cfg.to_dict(a), sort_keys=True,
                                                   separators=(",", ":"))

    def test_shipped_configs_validate(self):
        for path in sorted(Path(__file__).resolve().parent.parent.glob("configs/*.json")):
            cfg.load_config(path)


class TestOverrides:

    def test_section_axis(self):
        base = cfg.config_from_dict({"name": "base"})
        point = cfg.with_override(base, "top_layers", 1)
        assert point.model.top_layers == 1
        assert point.name == "base[top_layers=1]"
        assert base.model.top_layers == 3

    def test_defense_axis_adds_defense(self):
        point = cfg.with_override(cfg.config_from_dict({}), "σ_g", 0.002)
        assert [d.kind for d in point.defenses] == ["dpsgd"]
        assert point.defenses[0].params == {"sigma_g": 0.002, "clip": 0.2}

    def test_defense_axis_updates_existing(self):
        base = cfg.config_from_dict({"defenses": [{"kind": "ep"}, {"kind": "limit"}]})
        point = cfg.with_override(base, "z", 0.5)
        assert len(point.defenses) == 2
        assert point.defenses[0].params["z"] == 0.5

    def test_party_count_drops_explicit_ratios(self):
        base = cfg.config_from_dict({"partition": {"ratios": [0.4, 0.6]}})
        point = cfg.with_override(base, "K", 3)
        assert point.partition.parties == 3 and point.partition.ratios is None

    def test_unknown_axis(self):
        with pytest.raises(ConfigurationError):
            cfg.with_override(cfg.config_from_dict({}), "momentum", 0.9)

    def test_parse_axis_value(self):
        assert cfg.parse_axis_value("top_layers", "3") == 3
        assert cfg.parse_axis_value("sigma_g", "1e-3") == 0.001
        with pytest.raises(ConfigurationError):
            cfg.parse_axis_value("K", "two")


def _row(seed, **metrics):
    row = {c: None for c in rp.COLUMNS}
    row.update(seed=seed, status="ok", mode="grad", **metrics)
    return row


class TestReport:

    def test_aggregate_population_std(self):
        rows = [_row(0, asr=0.9, mta=0.7), _row(1, asr=0.7, mta=0.7),
                rp.failed_row(2, "grad", "DivergenceError: nan")]
        mean, std = rp.aggregate(rows)
        assert mean["asr"] == pytest.approx(0.8)
        assert std["asr"] == pytest.approx(np.std([0.9, 0.7]))
        assert std["mta"] == 0.0
        assert mean["lia_precision"] is None
        assert mean["status"] == "2/3"

    def test_row_from_result(self):
        row = rp.row_from_result({"seed": 0, "status": "ok", "mode": "hassle",
                                  "saliency_ratio": float("inf"),
                                  "stealth": {"pca_recon_adv_max": 1.5},
                                  "substitutions_per_epoch": {3: 10}})
        assert row["saliency_ratio"] is None
        assert row["pca_recon_adv_max"] == 1.5
        assert row["substitutions_per_epoch"] == {"3": 10}

    def test_emit(self, tmp_path):
        config = cfg.config_from_dict({"name": "r"})
        report = rp.new_report(config)
        report.rows = [_row(0, asr=0.5), _row(1, asr=1.0)]
        csv_path, json_path = rp.emit_report(report, tmp_path)
        frame = pd.read_csv(csv_path, keep_default_na=False)
        assert list(frame.columns) == ["config_hash"] + rp.COLUMNS
        assert frame["seed"].tolist() == ["0", "1", "mean", "std"]
        assert frame["lia_precision"].tolist() == ["n/a"] * 4
        assert set(frame["config_hash"]) == {cfg.config_hash(config)}
        summary = json.loads(json_path.read_text())
        assert summary["config_hash"] == cfg.config_hash(config)
        assert summary["version"] == rp.CODE_VERSION
        assert len(summary["aggregates"]) == 2

    def test_emit_is_byte_stable(self, tmp_path):
        config = cfg.config_from_dict({})
        report = rp.new_report(config)
        report.rows = [_row(0, asr=0.123456789)]
        rp.emit_report(report, tmp_path / "a")
        rp.emit_report(report, tmp_path / "b")
        for name in ("report.csv", "report.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_sweep_groups(self, tmp_path):
        report = rp.new_report(cfg.config_from_dict({}), axis="top_layers")
        report.rows = [dict(_row(0, asr=0.2), axis="top_layers", value=1),
                       dict(_row(0, asr=0.4), axis="top_layers", value=2)]
        csv_path, _ = rp.emit_report(report, tmp_path)
        frame = pd.read_csv(csv_path, keep_default_na=False)
        assert list(frame.columns[:3]) == ["config_hash", "axis", "value"]
        assert frame["seed"].tolist() == ["0", "mean", "std", "0", "mean", "std"]
        assert len(rp.format_summary(report)) == 2

    def test_load_report_checks_hash(self, tmp_path):
        report = rp.new_report(cfg.config_from_dict({}))
        _, json_path = rp.emit_report(report, tmp_path)
        config, summary = rp.load_report(json_path)
        assert summary["config_hash"] == cfg.config_hash(config)
        tampered = json.loads(json_path.read_text())
        tampered["config"]["training"]["epochs"] = 3
        json_path.write_text(json.dumps(tampered))
        with pytest.raises(InputError):
            rp.load_report(json_path)

    def test_timings(self, tmp_path):
        path = rp.write_timings(tmp_path, [("run", 0, 1.23456)])
        assert path.read_text().splitlines() == ["point,seed,seconds", "run,0,1.235"]
