import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dkpet.config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config
from dkpet.io import (
    hot_colormap,
    overlay_rgb,
    read_pgm16,
    read_raster,
    write_pgm16,
    write_ppm,
    write_raster,
)


@given(arrays(float, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_raster_roundtrip(tmp_path_factory, a):
    path = tmp_path_factory.mktemp("r") / "a.dkr"
    write_raster(path, a, 2.5)
    back, pix = read_raster(path, with_pixel_size=True)
    assert pix == 2.5
    assert np.array_equal(back, a)


def test_raster_layout(tmp_path):
    write_raster(tmp_path / "a.dkr", np.arange(6.0).reshape(2, 3), 1.0)
    blob = (tmp_path / "a.dkr").read_bytes()
    assert blob[:8] == b"DKRASTER" and len(blob) == 28 + 6 * 8
    (tmp_path / "bad.dkr").write_bytes(b"NOTRASTR" + blob[8:])
    with pytest.raises(ValueError):
        read_raster(tmp_path / "bad.dkr")
    (tmp_path / "short.dkr").write_bytes(blob[:-8])
    with pytest.raises(ValueError):
        read_raster(tmp_path / "short.dkr")


def test_pgm_minmax(tmp_path):
    a = np.array([[0.0, 0.5], [1.0, 0.25]])
    write_pgm16(tmp_path / "a.pgm", a)
    back = read_pgm16(tmp_path / "a.pgm")
    assert back.tolist() == [[0, 32768], [65535, 16384]]
    write_pgm16(tmp_path / "c.pgm", np.full((2, 2), 3.0))
    assert np.all(read_pgm16(tmp_path / "c.pgm") == 0)


def test_overlay(tmp_path):
    att = np.zeros((4, 4))
    att[1, 2] = 0.3
    rgb = overlay_rgb(att, np.ones((4, 4)))
    assert rgb.shape == (4, 4, 3)
    assert np.allclose(rgb[1, 2], 0.5 * hot_colormap(1.0))
    lum = hot_colormap(np.linspace(0, 1, 50)).sum(axis=1)
    assert np.all(np.diff(lum) >= 0)
    write_ppm(tmp_path / "o.ppm", rgb)
    assert (tmp_path / "o.ppm").read_bytes().startswith(b"P6\n4 4\n255\n")


def test_defaults_valid():
    cfg = ExperimentConfig().validate()
    assert cfg.kernel.k == 50 and cfg.kernel.sigma == 1.0 and cfg.training.d == 10
    assert len(cfg.scan.frame_schedule()) == 24


def test_parse_and_dump_roundtrip(tmp_path):
    text = """
    # comment
    phantom.width = 64
    phantom.height = 64   # trailing
    kernel.standardize = false
    training.optimizer = gd
    run.methods = mlem
    """
    cfg = parse_config(text)
    assert cfg.phantom.width == 64 and cfg.kernel.standardize is False
    assert cfg.training.optimizer == "gd" and cfg.run.method_list() == ["mlem"]
    (tmp_path / "c.cfg").write_text(dump_config(cfg))
    assert load_config(tmp_path / "c.cfg") == cfg


@pytest.mark.parametrize("text", [
    "phantom.width = 16",
    "phantom.width = 40.5",
    "nosuch.key = 1",
    "phantom.nosuch = 1",
    "phantom.width 64",
    "kernel.standardize = maybe",
    "kernel.k = 1000",
    "scan.background_fraction = 1.0",
    "training.d = 1",
    "run.methods = mlem,fbp",
    "composite.windows = 0-600,600-3600",
    "scan.schedule = 13x300",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)
