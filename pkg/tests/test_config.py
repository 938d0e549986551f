"""Tests for settings loading."""

import pytest
from pydantic import ValidationError

from app.config import Config, deep_merge, load_settings, read_yaml
from app.core.training import ToySettings
from app.pipeline.settings import PipelineSettings


def test_deep_merge_ignores_none():
    base = {"llm": {"provider": "mock", "parallelism": 8}, "seed": 1}
    merged = deep_merge(base, {"llm": {"provider": None, "parallelism": 2}, "seed": None, "new": 3})
    assert merged == {"llm": {"provider": "mock", "parallelism": 2}, "seed": 1, "new": 3}
    assert base["llm"]["parallelism"] == 8


def test_flags_override_file_override_defaults(tmp_path):
    path = tmp_path / "pipeline.yaml"
    path.write_text("llm:\n  parallelism: 3\nbench:\n  final: 10\n  per_critique: 4\n", encoding="utf-8")
    settings = load_settings(PipelineSettings, path, {"bench": {"final": 7, "top_critiques": None}})
    assert settings.llm.parallelism == 3
    assert settings.bench.final == 7
    assert settings.bench.per_critique == 4
    assert settings.bench.top_critiques == 5000


def test_shipped_configs_are_valid():
    pipeline = load_settings(PipelineSettings, Config.CONFIG_DIR / "pipeline.yaml")
    assert pipeline.llm.provider == "mock"
    toy = load_settings(ToySettings, Config.CONFIG_DIR / "toy.yaml")
    assert toy.encoders == ["downsample", "edge", "stat", "blur"]
    assert toy.train.lr == pytest.approx(3e-3)


def test_yaml_must_be_a_mapping(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- a\n- b\n", encoding="utf-8")
    with pytest.raises(ValueError):
        read_yaml(path)
    empty = tmp_path / "empty.yaml"
    empty.write_text("", encoding="utf-8")
    assert read_yaml(empty) == {}
    assert read_yaml(None) == {}


def test_invalid_values_raise():
    with pytest.raises(ValidationError):
        load_settings(PipelineSettings, None, {"critique": {"aspects": ["smell"]}})
