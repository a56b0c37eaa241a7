import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from dkpet.phantom import (
    REGIONS,
    FrameSchedule,
    Image2D,
    SizingError,
    TimeActivityModel,
    eval_tac,
    frame_mean,
    integrate_frames,
    make_phantom,
    default_schedule,
)


def test_tumor_area_128_at_2mm():
    rm, rep = make_phantom(128, 128, 2.0)
    assert rep["tumor_diameter_pixels"] == pytest.approx(7.5)
    # brute force: pixel centres within 7.5 mm of the tumour centre
    ti, tj = rep["tumor_centre_pixel"]
    count = sum(
        1
        for i in range(128)
        for j in range(128)
        if ((i - ti) * 2.0) ** 2 + ((j - tj) * 2.0) ** 2 <= 7.5**2
    )
    assert rep["pixel_counts"]["tumor"] == count
    assert abs(count - math.pi * 3.75**2) < 3


def test_single_pixel_tumor_at_15mm():
    rm, rep = make_phantom(40, 40, 15.0)
    assert rep["pixel_counts"]["tumor"] == 1


def test_labels_partition_grid_64():
    rm, rep = make_phantom(64, 64, 4.0)
    assert rep["tumor_diameter_pixels"] == pytest.approx(3.75)
    counts = [int(np.sum(rm.labels == c)) for c in range(len(REGIONS))]
    assert sum(counts) == 4096
    assert all(c > 0 for c in counts)
    assert set(np.unique(rm.labels)) <= set(range(len(REGIONS)))


def test_tumor_inside_white_matter_neighbourhood():
    rm, rep = make_phantom(96, 96, 2.0)
    ti, tj = rep["tumor_centre_pixel"]
    ring = rm.labels[ti - 6:ti + 7, tj - 6:tj + 7]
    assert set(np.unique(ring)) <= {REGIONS.index("white_matter"), REGIONS.index("tumor")}


@pytest.mark.parametrize("dims,pix", [((32, 32), 1.0), ((16, 64), 2.0)])
def test_too_small_rejected(dims, pix):
    with pytest.raises(SizingError):
        make_phantom(*dims, pix)


def test_tac_background_and_t0():
    m = TimeActivityModel()
    assert eval_tac(m, "background", 1234.0) == 0.0
    for r in REGIONS:
        assert eval_tac(m, r, 0.0) == pytest.approx(0.0, abs=1e-12)


def test_tac_ordering():
    m = TimeActivityModel()
    t = np.arange(0, 3601.0)
    assert m("tumor", 3600.0) > m("white_matter", 3600.0)
    assert m("white_matter", 3600.0) < m("gray_matter", 3600.0)
    peak = {r: t[np.argmax(m(r, t))] for r in ("blood", "gray_matter", "white_matter", "tumor")}
    assert peak["blood"] < min(peak["gray_matter"], peak["white_matter"], peak["tumor"])
    assert 15 <= peak["blood"] <= 45
    for r in REGIONS:
        assert np.all(m(r, t) >= 0)


def test_tac_errors():
    with pytest.raises(KeyError):
        eval_tac(TimeActivityModel(), "bone", 10.0)
    with pytest.raises(ValueError):
        eval_tac(TimeActivityModel(), "blood", 4000.0)


def test_default_schedule():
    s = default_schedule()
    assert len(s) == 24
    assert s.frames[0][0] == 0.0 and s.end == 3600.0
    assert sum(s.durations) == 3600.0


def test_schedule_validation():
    with pytest.raises(ValueError):
        FrameSchedule([(0, 10), (11, 20)])
    with pytest.raises(ValueError):
        FrameSchedule([(0, 0)])


class _Curve:
    def __init__(self, fn):
        self.fn = fn

    def __call__(self, region, t):
        return self.fn(np.asarray(t, dtype=float))


@pytest.fixture(scope="module")
def phantom32():
    return make_phantom(32, 32, 8.0)[0]


def test_constant_curve(phantom32):
    dyn = integrate_frames(phantom32, _Curve(lambda t: np.full_like(t, 3.5)), default_schedule())
    head = phantom32.labels > 0
    for f in dyn.frames:
        assert np.allclose(f.values[head], 3.5)
        assert np.all(f.values[~head] == 0)


def test_linear_curve(phantom32):
    dyn = integrate_frames(phantom32, _Curve(lambda t: t), FrameSchedule([(0, 20)]))
    assert np.allclose(dyn.frames[0].values[phantom32.labels > 0], 10.0)


@pytest.mark.parametrize("region", ["blood", "gray_matter", "white_matter", "tumor"])
def test_frame_means_match_adaptive_quadrature(region):
    m = TimeActivityModel()
    for t0, t1 in default_schedule().frames:
        ref = quad(lambda t: m(region, t), t0, t1, epsabs=0, epsrel=1e-12, limit=200)[0] / (t1 - t0)
        assert frame_mean(lambda t: m(region, t), t0, t1) == pytest.approx(ref, rel=1e-6)


@given(st.floats(0.1, 5.0), st.floats(-1e-3, 1e-3), st.floats(0.0, 3.0))
def test_integration_linear_in_curve(a, b, c):
    f = lambda t: a * np.exp(-t / 500.0)
    g = lambda t: c + b * t
    for t0, t1 in [(0, 20), (600, 780), (3300, 3600)]:
        lhs = frame_mean(lambda t: f(t) + g(t), t0, t1)
        rhs = frame_mean(f, t0, t1) + frame_mean(g, t0, t1)
        assert lhs == pytest.approx(rhs, rel=1e-6, abs=1e-9)


def test_image2d_validation():
    with pytest.raises(ValueError):
        Image2D(np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        Image2D(np.array([[np.nan]]))
    img = Image2D(np.ones((3, 4)), 2.0)
    assert (img.width, img.height, img.n_pixels) == (4, 3, 12)
    assert np.asarray(img).shape == (3, 4)
