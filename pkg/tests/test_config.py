from __future__ import annotations

import pytest

from app.config import Settings, coerce_value, read_key_values


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("CAPTURE_CONFIG", "CAPTURE_CROP_SIZE", "CAPTURE_GRAPHCUT_LAMBDA", "CAPTURE_PROB_SOURCE", "CAPTURE_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)


def test_defaults():
    cfg = Settings.load()
    assert cfg.crop_size == 128
    assert cfg.prob_source == "net"
    assert cfg.prob_dir is None


def test_file_overrides_defaults(tmp_path):
    path = tmp_path / "capture.conf"
    path.write_text("crop_size = 64\ngraphcut-lambda = 2.5\nprob_source = all-face\n")
    cfg = Settings.load(str(path))
    assert cfg.crop_size == 64
    assert cfg.graphcut_lambda == 2.5
    assert cfg.prob_source == "all-face"


def test_env_overrides_file(tmp_path, monkeypatch):
    path = tmp_path / "capture.conf"
    path.write_text("[capture]\ncrop_size = 64\n")
    monkeypatch.setenv("CAPTURE_CONFIG", str(path))
    monkeypatch.setenv("CAPTURE_CROP_SIZE", "96")
    assert Settings.load().crop_size == 96


def test_unknown_key(tmp_path):
    path = tmp_path / "capture.conf"
    path.write_text("crop_sise = 64\n")
    with pytest.raises(ValueError, match="crop_sise"):
        Settings.load(str(path))


def test_missing_file(tmp_path):
    with pytest.raises(RuntimeError, match="not found"):
        Settings.load(str(tmp_path / "missing.conf"))


def test_wrong_section(tmp_path):
    path = tmp_path / "capture.conf"
    path.write_text("[other]\ncrop_size = 64\n")
    with pytest.raises(ValueError, match="capture"):
        read_key_values(path)


@pytest.mark.parametrize(
    "default, raw, expected",
    [(1, "7", 7), (1.0, "2.5", 2.5), (False, "yes", True), (None, "none", None), ("net", " dir ", "dir")],
)
def test_coercion(default, raw, expected):
    assert coerce_value(default, raw) == expected


def test_bad_number(tmp_path, monkeypatch):
    monkeypatch.setenv("CAPTURE_CROP_SIZE", "big")
    with pytest.raises(ValueError):
        Settings.load()
