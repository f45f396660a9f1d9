#!/usr/bin/env python3
"""
Tests for pipeline defaults, config files and log level selection
"""

import logging

import pytest

from segmentation_config import (
    LOG_ENV_VAR,
    PipelineConfig,
    build_config,
    load_config_file,
    log_level_from_env,
)
from segmentation_errors import ParameterError


def test_defaults():
    """ROI and region defaults: c=4, m=2, w=5, T=0.002, delta=0.21, g=2.10"""
    cfg = PipelineConfig()
    assert (cfg.clusters, cfg.fuzzifier, cfg.window, cfg.tol) == (4, 2.0, 5, 0.002)
    assert (cfg.delta, cfg.g_min) == (0.21, 2.10)
    assert cfg.min_area == 5 and cfg.max_area is None
    assert cfg.gray_delta == pytest.approx(10.71)
    assert cfg.gray_g_min == pytest.approx(107.1)
    assert cfg.to_dict()["filter_chain"] == "median"
    assert cfg.b_const == 2.0 ** -52
    assert (cfg.roi_rule, cfg.roi_cut_bright_layer, cfg.roi_layer_margin) == ("argmax", True, 2)


def test_normalize_mode_alias():
    cfg = PipelineConfig(normalize_mode="paper")
    assert cfg.normalize_mode == "cluster_scaled"
    assert cfg == PipelineConfig()
    assert build_config({"normalize_mode": "paper"}) == PipelineConfig()
    assert PipelineConfig(normalize_mode="none").normalize_mode == "none"


@pytest.mark.parametrize("field, value", [
    ("clusters", 1),
    ("fuzzifier", 1.0),
    ("window", 4),
    ("tol", 0.0),
    ("filter_chain", "gaussian"),
    ("normalize_mode", "unit"),
    ("b_const", -1.0),
    ("roi_rule", "vote"),
    ("roi_threshold", -0.5),
    ("roi_layer_margin", -1),
    ("delta", -0.1),
    ("min_area", 0),
    ("jobs", 0),
])
def test_invalid_values(field, value):
    with pytest.raises(ParameterError, match=field):
        PipelineConfig(**{field: value})


def test_max_area_below_min_area():
    with pytest.raises(ParameterError, match="max_area"):
        PipelineConfig(min_area=10, max_area=9)


def test_load_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# phantom study\n"
        "clusters = 3\n"
        "window=7   # wider filter\n"
        "max-area = 150\n"
        "denoise = off\n"
        "\n"
        "filter_chain = spatial_then_median\n"
    )
    values = load_config_file(str(path))
    assert values == {
        "clusters": 3,
        "window": 7,
        "max_area": 150,
        "denoise": False,
        "filter_chain": "spatial_then_median",
    }
    none_path = tmp_path / "none.cfg"
    none_path.write_text("max_area = None\n")
    assert load_config_file(str(none_path)) == {"max_area": None}


def test_load_config_file_errors(tmp_path):
    unknown = tmp_path / "unknown.cfg"
    unknown.write_text("clusters = 4\ncolour = red\n")
    with pytest.raises(ParameterError, match="unknown.cfg:2"):
        load_config_file(str(unknown))

    malformed = tmp_path / "malformed.cfg"
    malformed.write_text("clusters 4\n")
    with pytest.raises(ParameterError, match="key=value"):
        load_config_file(str(malformed))

    bad_number = tmp_path / "bad.cfg"
    bad_number.write_text("tol = small\n")
    with pytest.raises(ParameterError, match="tol"):
        load_config_file(str(bad_number))

    with pytest.raises(OSError):
        load_config_file(str(tmp_path / "missing.cfg"))


def test_build_config_precedence():
    """Flags override the file, the file overrides the defaults"""
    cfg = build_config({"clusters": 3, "window": 7}, {"window": 3, "output": "ignored"})
    assert cfg.clusters == 3
    assert cfg.window == 3
    assert cfg.fuzzifier == 2.0
    assert build_config() == PipelineConfig()


def test_log_level_from_env(monkeypatch):
    monkeypatch.delenv(LOG_ENV_VAR, raising=False)
    assert log_level_from_env() == logging.WARNING
    monkeypatch.setenv(LOG_ENV_VAR, "debug")
    assert log_level_from_env() == logging.DEBUG
    monkeypatch.setenv(LOG_ENV_VAR, "chatty")
    assert log_level_from_env() == logging.WARNING


def main():
    test_defaults()
    test_build_config_precedence()
    print("Config checks finished")


if __name__ == "__main__":
    main()
