"""Config text round-trips, overrides, and validation errors."""

import pytest

from sipl.config import ExperimentConfig
from sipl.errors import ConfigError


def test_defaults_validate():
    ExperimentConfig().validate()


def test_round_trip_is_lossless():
    cfg = ExperimentConfig()
    text = cfg.to_text()
    again = ExperimentConfig.from_text(text)
    assert again.to_text() == text


def test_round_trip_preserves_overrides():
    cfg = ExperimentConfig()
    cfg.apply("smg.num_queries", "12")
    cfg.apply("data.extents", "64,32,32")
    cfg.apply("optim.lr", "0.007")
    cfg.apply("smg.filtering", "false")
    again = ExperimentConfig.from_text(cfg.to_text())
    assert again.smg.num_queries == 12
    assert again.data.extents == (64, 32, 32)
    assert again.optim.lr == 0.007
    assert again.smg.filtering is False
    assert again.to_text() == cfg.to_text()


def test_comments_and_blanks_ignored():
    text = "# a comment\n\nseed=7\n"
    assert ExperimentConfig.from_text(text).seed == 7


def test_unknown_key_named_in_error():
    with pytest.raises(ConfigError) as err:
        ExperimentConfig().apply("smg.nonsense", "1")
    assert "smg.nonsense" in str(err.value)


def test_bad_value_named_in_error():
    with pytest.raises(ConfigError) as err:
        ExperimentConfig().apply("train.epochs", "many")
    assert "train.epochs" in str(err.value)


def test_extents_must_divide_stride():
    cfg = ExperimentConfig()
    cfg.apply("data.extents", "24,32,32")
    with pytest.raises(ConfigError):
        cfg.validate()


def test_queries_must_exceed_classes():
    cfg = ExperimentConfig()
    cfg.apply("smg.num_queries", "3")
    cfg.apply("data.num_classes", "3")
    with pytest.raises(ConfigError):
        cfg.validate()


def test_scales_must_match_taps():
    cfg = ExperimentConfig()
    cfg.apply("smg.scales", "32,4")
    with pytest.raises(ConfigError):
        cfg.validate()
    cfg2 = ExperimentConfig()
    cfg2.apply("smg.scales", "8")
    cfg2.validate()
    assert cfg2.resolved_scales() == [8]


def test_resolved_scales_follow_depth():
    cfg = ExperimentConfig()
    assert cfg.resolved_scales() == [32, 16, 8]
    cfg.apply("backbone.depth", "3")
    cfg.apply("data.extents", "8,8,8")
    cfg.validate()
    assert cfg.resolved_scales() == [8, 4, 2]


def test_malformed_line_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("seed 7\n")
