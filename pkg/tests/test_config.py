"""Configuration resolution: defaults, file values, overrides, snapshots."""

import pytest

from codecalign.align import AlignConfig
from codecalign.config import SCHEMA, ExperimentConfig
from codecalign.errors import ConfigError
from codecalign.world import WorldConfig


class TestDefaults:
    def test_empty_load_matches_schema(self):
        cfg = ExperimentConfig.load()
        for section, keys in SCHEMA.items():
            for key, default in keys.items():
                assert cfg.get(section, key) == default

    def test_typed_views(self):
        cfg = ExperimentConfig.load()
        assert cfg.world_config() == WorldConfig()
        assert cfg.ar_config().d_model == 64
        assert cfg.nar_config().prompt_len == 8
        assert cfg.align_config() == AlignConfig()

    def test_get_unknown_entry(self):
        cfg = ExperimentConfig.load()
        with pytest.raises(ConfigError):
            cfg.get("world", "nope")
        with pytest.raises(ConfigError):
            cfg.get("nope", "v_text")


class TestFileLoading:
    def test_values_and_types(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text(
            "[world]\nv_text = 5\ntau_oracle = 0.25\n"
            "[align]\nmethod = ppo\nlr = 2e-3\n")
        cfg = ExperimentConfig.load(str(path))
        assert cfg.get("world", "v_text") == 5
        assert isinstance(cfg.get("world", "v_text"), int)
        assert cfg.get("world", "tau_oracle") == 0.25
        assert cfg.get("align", "method") == "ppo"
        assert cfg.get("align", "lr") == 2e-3
        # untouched keys keep their defaults
        assert cfg.get("world", "l_text") == SCHEMA["world"]["l_text"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            ExperimentConfig.load(str(tmp_path / "absent.ini"))

    def test_unknown_section(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text("[mystery]\nx = 1\n")
        with pytest.raises(ConfigError, match="unknown section"):
            ExperimentConfig.load(str(path))

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text("[world]\nvtext = 1\n")
        with pytest.raises(ConfigError, match="unknown key"):
            ExperimentConfig.load(str(path))

    def test_unparseable_value_names_entry(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text("[world]\nv_text = banana\n")
        with pytest.raises(ConfigError, match=r"\[world\] v_text"):
            ExperimentConfig.load(str(path))

    def test_percent_is_literal(self, tmp_path):
        # no interpolation: % in values must pass through untouched
        path = tmp_path / "exp.ini"
        path.write_text("[args]\npolicy = /tmp/100%full/p.ckpt\n")
        cfg = ExperimentConfig.load(str(path))
        assert cfg.get("args", "policy") == "/tmp/100%full/p.ckpt"


class TestOverrides:
    def test_override_beats_file(self, tmp_path):
        path = tmp_path / "exp.ini"
        path.write_text("[world]\nv_text = 5\n")
        cfg = ExperimentConfig.load(str(path), ["world.v_text=7"])
        assert cfg.get("world", "v_text") == 7

    @pytest.mark.parametrize("bad", ["novalue", "nodot=3", "world.nope=1",
                                     "nope.v_text=1", "world.v_text=x"])
    def test_malformed_override(self, bad):
        with pytest.raises(ConfigError):
            ExperimentConfig.load(None, [bad])

    def test_override_method_returns_new(self):
        cfg = ExperimentConfig.load()
        cfg2 = cfg.override("run", "seed", 99)
        assert cfg2.get("run", "seed") == 99
        assert cfg.get("run", "seed") == SCHEMA["run"]["seed"]

    def test_override_method_typed_value(self):
        cfg = ExperimentConfig.load().override("data", "sft_n", 7)
        assert cfg.get("data", "sft_n") == 7
        with pytest.raises(ConfigError):
            ExperimentConfig.load().override("data", "sft_n", 1.5)

    def test_override_method_unknown(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.load().override("data", "nope", 1)

    def test_align_config_call_override(self):
        cfg = ExperimentConfig.load()
        assert cfg.align_config(method="coh").method == "coh"
        # None means "no override", not "set to None"
        assert cfg.align_config(method=None).method == "dpo"
        with pytest.raises(ConfigError):
            cfg.align_config(method="bogus")


class TestSnapshot:
    def test_reparse_identity(self, tmp_path):
        cfg = ExperimentConfig.load(None, [
            "world.tau_oracle=0.1",      # not exactly representable
            "align.lr=0.0123456789012345678",
            "args.policy=/somewhere/p.ckpt",
            "run.seed=424242",
        ])
        path = tmp_path / "snap.ini"
        cfg.write_snapshot(str(path))
        back = ExperimentConfig.load(str(path))
        assert back.values == cfg.values

    def test_schema_order(self):
        text = ExperimentConfig.load().snapshot()
        headers = [ln for ln in text.splitlines() if ln.startswith("[")]
        assert headers == [f"[{s}]" for s in SCHEMA]
        assert text.endswith("\n")

    def test_every_key_present(self):
        text = ExperimentConfig.load().snapshot()
        for section, keys in SCHEMA.items():
            for key in keys:
                assert f"{key} = " in text
