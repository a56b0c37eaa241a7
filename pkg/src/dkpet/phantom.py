"""Analytic brain phantom, regional time-activity curves and frame integration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

REGIONS = ("background", "gray_matter", "white_matter", "blood", "tumor")
REGION_CODE = {name: code for code, name in enumerate(REGIONS)}

TUMOR_DIAMETER_MM = 15.0
SCAN_END_S = 3600.0


class SizingError(ValueError):
    """Raised when the grid is too small to hold the phantom anatomy."""


@dataclass
class Image2D:
    """Row-major raster with a physical pixel size.

    ``values`` has shape (height, width).
    """

    values: np.ndarray
    pixel_size_mm: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError(f"Image2D needs a 2-D array, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("Image2D values must be finite")
        if self.pixel_size_mm <= 0:
            raise ValueError("pixel_size_mm must be positive")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def n_pixels(self) -> int:
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass
class RegionMap:
    labels: np.ndarray  # int codes into REGIONS, shape (height, width)
    pixel_size_mm: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def mask(self, region: str) -> np.ndarray:
        return self.labels == REGION_CODE[region]


@dataclass
class FrameSchedule:
    frames: list[tuple[float, float]]

    def __post_init__(self):
        self.frames = [(float(a), float(b)) for a, b in self.frames]
        if not self.frames:
            raise ValueError("schedule has no frames")
        for i, (a, b) in enumerate(self.frames):
            if not b > a:
                raise ValueError(f"frame {i} has t_end <= t_start")
            if i and not math.isclose(a, self.frames[i - 1][1]):
                raise ValueError(f"frame {i} is not contiguous with frame {i - 1}")

    @classmethod
    def from_blocks(cls, blocks, t0: float = 0.0) -> "FrameSchedule":
        """Build from (count, duration) blocks, e.g. ``[(4, 20), (4, 40)]``."""
        frames, t = [], t0
        for count, duration in blocks:
            for _ in range(int(count)):
                frames.append((t, t + duration))
                t += duration
        return cls(frames)

    @property
    def durations(self) -> np.ndarray:
        return np.array([b - a for a, b in self.frames])

    @property
    def end(self) -> float:
        return self.frames[-1][1]

    def __len__(self):
        return len(self.frames)


DEFAULT_SCHEDULE_BLOCKS = ((4, 20), (4, 40), (4, 60), (4, 180), (8, 300))


def default_schedule() -> FrameSchedule:
    return FrameSchedule.from_blocks(DEFAULT_SCHEDULE_BLOCKS)


@dataclass
class TimeActivityModel:
    """Per-region parametric curves.

    Blood is a bolus ``A1 e^{-t/tau1} + A2 e^{-t/tau2} - (A1 + A2) e^{-t/tau_rise}``;
    tissues follow ``A (1 - e^{-t/tau})``.  Background is identically zero.
    """

    blood: dict = field(
        default_factory=lambda: {"a1": 70.0, "tau1": 45.0, "a2": 12.0, "tau2": 3000.0, "tau_rise": 14.0}
    )
    tissue: dict = field(
        default_factory=lambda: {
            "gray_matter": {"a": 25.0, "tau": 600.0},
            "white_matter": {"a": 8.0, "tau": 900.0},
            "tumor": {"a": 40.0, "tau": 1200.0},
        }
    )

    def __post_init__(self):
        b = self.blood
        if not (0 < b["tau_rise"] < min(b["tau1"], b["tau2"])):
            raise ValueError("blood tau_rise must be positive and shorter than both decay constants")
        if b["a1"] < 0 or b["a2"] < 0:
            raise ValueError("blood amplitudes must be nonnegative")
        for name, p in self.tissue.items():
            if p["a"] < 0 or p["tau"] <= 0:
                raise ValueError(f"bad tissue parameters for {name}")

    def __call__(self, region: str, t):
        return eval_tac(self, region, t)


def eval_tac(model: TimeActivityModel, region: str, t):
    """Activity of ``region`` at time ``t`` (seconds, scalar or array)."""
    if region not in REGION_CODE:
        raise KeyError(f"unknown region {region!r}")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > SCAN_END_S):
        raise ValueError(f"t must lie in [0, {SCAN_END_S:g}] s")
    if region == "background":
        out = np.zeros_like(t)
    elif region == "blood":
        b = model.blood
        out = (
            b["a1"] * np.exp(-t / b["tau1"])
            + b["a2"] * np.exp(-t / b["tau2"])
            - (b["a1"] + b["a2"]) * np.exp(-t / b["tau_rise"])
        )
        out = np.maximum(out, 0.0)
    else:
        p = model.tissue[region]
        out = p["a"] * -np.expm1(-t / p["tau"])
    return out if out.ndim else float(out)


def make_phantom(width: int, height: int, pixel_size_mm: float):
    """Rasterize the analytic head phantom.

    Returns the region map and a geometry report (dict, physical units in mm
    and pixel counts per region).
    """
    if width < 32 or height < 32:
        raise SizingError("phantom needs at least 32x32 pixels")
    if pixel_size_mm <= 0:
        raise ValueError("pixel_size_mm must be positive")

    # pixel-centre coordinates in mm, origin at the grid centre, y downwards
    xs = (np.arange(width) - (width - 1) / 2) * pixel_size_mm
    ys = (np.arange(height) - (height - 1) / 2) * pixel_size_mm
    X, Y = np.meshgrid(xs, ys)
    half_w = width * pixel_size_mm / 2
    half_h = height * pixel_size_mm / 2

    head = (0.80 * half_w, 0.90 * half_h)
    inner = (0.80 * head[0], 0.82 * head[1])

    def in_ellipse(cx, cy, ax, ay):
        return ((X - cx) / ax) ** 2 + ((Y - cy) / ay) ** 2 <= 1.0

    labels = np.zeros((height, width), dtype=np.int8)
    labels[in_ellipse(0, 0, *head)] = REGION_CODE["gray_matter"]
    labels[in_ellipse(0, 0, *inner)] = REGION_CODE["white_matter"]

    pool_axes = (0.10 * inner[0], 0.16 * inner[1])
    pools = [(-0.45 * inner[0], 0.50 * inner[1]), (0.45 * inner[0], 0.50 * inner[1])]
    for cx, cy in pools:
        labels[in_ellipse(cx, cy, *pool_axes)] = REGION_CODE["blood"]

    radius = TUMOR_DIAMETER_MM / 2
    # tumour sits on a pixel centre in the upper-right white matter
    ti = int(round((height - 1) / 2 - 0.35 * inner[1] / pixel_size_mm))
    tj = int(round((width - 1) / 2 + 0.40 * inner[0] / pixel_size_mm))
    tcx, tcy = xs[tj], ys[ti]
    # the disc must fit inside the white matter with a one-pixel margin
    reach = radius + pixel_size_mm
    dirs = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    rim_x = tcx + reach * np.cos(dirs)
    rim_y = tcy + reach * np.sin(dirs)
    if np.any((rim_x / inner[0]) ** 2 + (rim_y / inner[1]) ** 2 > 1.0):
        raise SizingError(
            f"{width}x{height} grid at {pixel_size_mm} mm/pixel cannot contain a "
            f"{TUMOR_DIAMETER_MM:g} mm tumour inside white matter"
        )
    tumor = (X - tcx) ** 2 + (Y - tcy) ** 2 <= radius**2
    labels[tumor] = REGION_CODE["tumor"]

    region_map = RegionMap(labels=labels, pixel_size_mm=float(pixel_size_mm))
    report = {
        "head_semi_axes_mm": head,
        "white_matter_semi_axes_mm": inner,
        "blood_pool_centres_mm": pools,
        "blood_pool_semi_axes_mm": pool_axes,
        "tumor_centre_mm": (float(tcx), float(tcy)),
        "tumor_centre_pixel": (ti, tj),
        "tumor_diameter_pixels": TUMOR_DIAMETER_MM / pixel_size_mm,
        "pixel_counts": {name: int(np.sum(labels == code)) for code, name in enumerate(REGIONS)},
    }
    return region_map, report


def frame_mean(curve, t0: float, t1: float, step: float = 1.0,
               rtol: float = 1e-6, max_halvings: int = 16) -> float:
    """Mean of ``curve(t)`` over [t0, t1] by composite midpoint rule.

    Starts at ``step`` seconds and halves the step until successive estimates
    agree to ``rtol``.
    """
    n = max(1, math.ceil((t1 - t0) / step - 1e-9))
    prev = None
    for _ in range(max_halvings + 1):
        h = (t1 - t0) / n
        mids = t0 + h * (np.arange(n) + 0.5)
        est = float(np.mean(curve(mids)))
        if prev is not None and abs(est - prev) <= rtol * max(abs(est), 1e-300):
            return est
        prev = est
        n *= 2
    return est


@dataclass
class DynamicImageSet:
    schedule: FrameSchedule
    frames: list[Image2D]

    def __post_init__(self):
        if len(self.frames) != len(self.schedule):
            raise ValueError("frame count does not match schedule")
        shapes = {f.values.shape for f in self.frames}
        if len(shapes) > 1:
            raise ValueError("frames differ in shape")

    def stack(self) -> np.ndarray:
        return np.stack([f.values for f in self.frames])


def integrate_frames(region_map: RegionMap, model: TimeActivityModel,
                     schedule: FrameSchedule, step: float = 1.0) -> DynamicImageSet:
    """Per-frame mean activity images (activity averaged over each frame).

    ``model`` is any callable ``model(region, t)``; a :class:`TimeActivityModel`
    in normal use.
    """
    if schedule.frames[0][0] < 0 or schedule.end > SCAN_END_S:
        raise ValueError("schedule must lie within the scan window")
    frames = []
    present = [(code, name) for code, name in enumerate(REGIONS) if np.any(region_map.labels == code)]
    for t0, t1 in schedule.frames:
        img = np.zeros(region_map.shape)
        for code, name in present:
            if name == "background":
                continue
            curve = lambda t, name=name: np.asarray(model(name, t), dtype=float)
            img[region_map.labels == code] = frame_mean(curve, t0, t1, step=step)
        frames.append(Image2D(img, region_map.pixel_size_mm))
    return DynamicImageSet(schedule, frames)
