"""
Tests for the run configuration: file parsing, overrides and coercion.
"""

import pytest

from coupler.config import (
    RunConfig,
    apply_overrides,
    describe_keys,
    load_config,
    parse_config_text,
)
from coupler.errors import ConfigError, UsageError


class TestParsing:
    """key = value files."""

    def test_sets_typed_values(self):
        config = parse_config_text(
            "# coupling run\n"
            "rl.k_reward = 5\n"
            "rl.ratio_clip = 2e-4   # tighter\n"
            "model.hidden_dims = 64, 32\n"
            "rl.use_baseline = off\n"
            "sample.seed = none\n"
            "\n"
            "seed = 17\n"
        )
        assert config.rl.k_reward == 5
        assert config.rl.ratio_clip == 2e-4
        assert config.model.hidden_dims == [64, 32]
        assert config.rl.use_baseline is False
        assert config.sample.seed is None
        assert config.seed == 17

    def test_untouched_keys_keep_defaults(self):
        config = parse_config_text("schedule.T = 200\n")
        assert config.schedule.T == 200
        assert config.schedule.beta_max == RunConfig().schedule.beta_max

    @pytest.mark.parametrize("text,message", [
        ("rl.unknown = 1\n", "run.cfg:1"),
        ("\n\nnosuch.key = 1\n", "run.cfg:3"),
        ("rl.k_reward 5\n", "expected 'key = value'"),
        ("rl.k_reward = five\n", "cannot read"),
        ("rl.use_baseline = maybe\n", "cannot read"),
        ("rl.k_reward = 0\n", "rl.k_reward"),
        ("schedule.beta_max = 2.0\n", "schedule.beta_max"),
    ])
    def test_errors_name_the_line(self, text, message):
        with pytest.raises(ConfigError, match=message):
            parse_config_text(text, source="run.cfg")

    def test_config_error_is_a_usage_error(self):
        assert issubclass(ConfigError, UsageError)

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("train.steps = 12\n", encoding="utf-8")
        assert load_config(path).train.steps == 12

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.cfg")

    def test_no_file_gives_defaults(self):
        assert load_config(None) == RunConfig()


class TestOverrides:
    """--set key=value and precedence."""

    def test_override_beats_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("rl.batch_size = 8\nrl.lr = 0.01\n", encoding="utf-8")
        config = apply_overrides(load_config(path), ["rl.batch_size=32"])
        assert config.rl.batch_size == 32
        assert config.rl.lr == 0.01

    @pytest.mark.parametrize("item", ["rl.batch_size", "bogus=1"])
    def test_bad_overrides(self, item):
        with pytest.raises(ConfigError, match="--set"):
            apply_overrides(RunConfig(), [item])

    def test_rejected_value_keeps_previous(self):
        config = RunConfig()
        with pytest.raises(ConfigError):
            config.set("rl.batch_size", "0")
        assert config.rl.batch_size == RunConfig().rl.batch_size


class TestDescribe:
    """Help listing."""

    def test_lists_every_key_once(self):
        text = describe_keys()
        keys = [line.split("=")[0].strip() for line in text.splitlines()]
        assert len(keys) == len(set(keys))
        assert {"rl.k_reward", "schedule.T", "sample.guidance", "data.clip_sigmas", "seed"} <= set(keys)

    def test_shows_list_defaults_comma_separated(self):
        assert "model.hidden_dims = 128,128,128" in describe_keys()

    def test_condition_dropout_is_a_fine_tuning_key(self):
        keys = {line.split("=")[0].strip() for line in describe_keys().splitlines()}
        assert "rl.drop_prob" in keys
        assert "train.drop_prob" not in keys

    def test_coupling_switches_are_listed(self):
        text = describe_keys()
        assert "rl.project_train = false" in text.lower()
        assert "sample.use_ema = true" in text.lower()
