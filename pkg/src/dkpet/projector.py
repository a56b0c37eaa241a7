"""2-D parallel-beam system model with exact ray/pixel intersection lengths.

Sinograms are plain ``(n_angles, n_bins)`` float arrays; images are
``(height, width)`` arrays (an :class:`~dkpet.phantom.Image2D` is accepted
wherever an image is expected).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class ScannerGeometry2D:
    n_angles: int
    n_bins: int
    bin_spacing_mm: float

    def __post_init__(self):
        if self.n_angles < 1 or self.n_bins < 1:
            raise ValueError("n_angles and n_bins must be >= 1")
        if self.bin_spacing_mm <= 0:
            raise ValueError("bin_spacing_mm must be positive")

    @property
    def angles(self) -> np.ndarray:
        return np.pi * np.arange(self.n_angles) / self.n_angles

    @property
    def bin_centres(self) -> np.ndarray:
        return (np.arange(self.n_bins) - (self.n_bins - 1) / 2) * self.bin_spacing_mm

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_angles, self.n_bins)


def default_geometry(width: int, pixel_size_mm: float, n_angles: int = 180) -> ScannerGeometry2D:
    """180 angles, ~1.5x width radial bins at pixel pitch.

    The bin count is given the parity of ``width`` so bin centres fall on
    pixel centres at 0 and 90 degrees.
    """
    n_bins = math.ceil(1.5 * width)
    if (n_bins - width) % 2:
        n_bins += 1
    return ScannerGeometry2D(n_angles, n_bins, pixel_size_mm)


def _ray_matrix(geometry: ScannerGeometry2D, shape, pixel_size_mm: float) -> sp.csr_matrix:
    """Intersection-length matrix, rows = rays (angle-major), cols = pixels."""
    height, width = shape
    p = pixel_size_mm
    x_planes = (np.arange(width + 1) - width / 2) * p
    y_planes = (np.arange(height + 1) - height / 2) * p
    reach = 0.5 * math.hypot(width * p, height * p) + p
    s = geometry.bin_centres
    nb = geometry.n_bins
    tiny = 1e-12

    rows, cols, vals = [], [], []
    for a, theta in enumerate(geometry.angles):
        c, sn = math.cos(theta), math.sin(theta)
        # ray: s*(c, sn) + t*(-sn, c)
        px, py = s * c, s * sn
        parts = [np.full((nb, 2), [-reach, reach])]
        if abs(sn) > tiny:
            parts.append((x_planes[None, :] - px[:, None]) / -sn)
        if abs(c) > tiny:
            parts.append((y_planes[None, :] - py[:, None]) / c)
        t = np.sort(np.clip(np.concatenate(parts, axis=1), -reach, reach), axis=1)
        seg = np.diff(t, axis=1)
        mid = 0.5 * (t[:, 1:] + t[:, :-1])
        mx = px[:, None] - sn * mid
        my = py[:, None] + c * mid
        j = np.floor(mx / p + width / 2).astype(np.int64)
        i = np.floor(my / p + height / 2).astype(np.int64)
        ok = (seg > tiny * p) & (i >= 0) & (i < height) & (j >= 0) & (j < width)
        b_idx = np.broadcast_to(np.arange(nb)[:, None], seg.shape)
        rows.append(a * nb + b_idx[ok])
        cols.append(i[ok] * width + j[ok])
        vals.append(seg[ok])

    n_rays = geometry.n_angles * nb
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_rays, height * width),
    )
    return mat.tocsr()  # duplicate (ray, pixel) entries are summed


@dataclass
class SystemModel:
    """Linear operator ``x -> factors * (G x)`` and its exact adjoint.

    ``G`` holds ray/pixel intersection lengths in mm; ``factors`` is one
    nonnegative multiplier per sinogram element (normalization, attenuation,
    frame duration, global count scale).
    """

    geometry: ScannerGeometry2D
    image_shape: tuple[int, int]
    pixel_size_mm: float
    factors: np.ndarray = None
    _G: sp.csr_matrix = field(default=None, repr=False)
    _GT: sp.csr_matrix = field(default=None, repr=False)

    def __post_init__(self):
        self.image_shape = tuple(int(n) for n in self.image_shape)
        if self._G is None:
            fov = self.geometry.n_bins * self.geometry.bin_spacing_mm
            diag = math.hypot(*self.image_shape) * self.pixel_size_mm
            if fov < diag:
                raise ValueError(f"radial field of view {fov:.1f} mm does not cover "
                                 f"the image diagonal {diag:.1f} mm")
            self._G = _ray_matrix(self.geometry, self.image_shape, self.pixel_size_mm)
            self._GT = self._G.T.tocsr()
        if self.factors is None:
            self.factors = np.ones(self.geometry.shape)
        self.factors = np.asarray(self.factors, dtype=float).reshape(self.geometry.shape)
        if np.any(self.factors < 0) or not np.all(np.isfinite(self.factors)):
            raise ValueError("per-ray factors must be finite and nonnegative")

    @classmethod
    def from_matrix(cls, matrix, image_shape, sino_shape, pixel_size_mm: float = 1.0) -> "SystemModel":
        """Wrap an explicit nonnegative matrix (rows = sinogram elements)."""
        G = sp.csr_matrix(matrix, dtype=float)
        if G.shape != (sino_shape[0] * sino_shape[1], image_shape[0] * image_shape[1]):
            raise ValueError("matrix shape does not match image and sinogram shapes")
        if G.nnz and G.data.min() < 0:
            raise ValueError("system matrix coefficients must be nonnegative")
        geometry = ScannerGeometry2D(sino_shape[0], sino_shape[1], 1.0)
        return cls(geometry, image_shape, pixel_size_mm, None, G, G.T.tocsr())

    @property
    def n_pixels(self) -> int:
        return self.image_shape[0] * self.image_shape[1]

    @property
    def matrix(self) -> sp.csr_matrix:
        """Geometric intersection-length matrix (factors not applied)."""
        return self._G

    def with_factors(self, factors) -> "SystemModel":
        """Same geometry and ray matrix, different per-ray factors."""
        return SystemModel(self.geometry, self.image_shape, self.pixel_size_mm,
                           np.broadcast_to(factors, self.geometry.shape).copy(), self._G, self._GT)

    def scaled(self, c: float) -> "SystemModel":
        return self.with_factors(self.factors * c)

    def dense(self) -> np.ndarray:
        return self.factors.reshape(-1, 1) * self._G.toarray()


def forward_project(model: SystemModel, image) -> np.ndarray:
    x = np.asarray(image, dtype=float)
    if x.shape != model.image_shape:
        raise ValueError(f"image shape {x.shape} does not match model {model.image_shape}")
    return model.factors * (model._G @ x.ravel()).reshape(model.geometry.shape)


def back_project(model: SystemModel, sino) -> np.ndarray:
    y = np.asarray(sino, dtype=float)
    if y.shape != model.geometry.shape:
        raise ValueError(f"sinogram shape {y.shape} does not match geometry {model.geometry.shape}")
    return (model._GT @ (model.factors * y).ravel()).reshape(model.image_shape)


def attenuation_factors(model: SystemModel, mask, mu_per_mm: float) -> np.ndarray:
    """Per-ray survival ``exp(-mu * L)``, ``L`` the chord length through ``mask``."""
    if mu_per_mm < 0:
        raise ValueError("attenuation coefficient must be nonnegative")
    chord = (model._G @ np.asarray(mask, dtype=float).ravel()).reshape(model.geometry.shape)
    return np.exp(-mu_per_mm * chord)


def expected_data(model: SystemModel, image, background_fraction: float):
    """Return ``(ybar, r)`` with uniform ``r`` making up ``background_fraction`` of ``ybar``."""
    if not 0.0 <= background_fraction < 1.0:
        raise ValueError("background_fraction must lie in [0, 1)")
    px = forward_project(model, image)
    total_r = background_fraction / (1.0 - background_fraction) * px.sum()
    r = np.full(px.shape, total_r / px.size)
    return px + r, r


def scale_to_counts(sinograms, target_total: float):
    """Apply one global factor so the summed expected counts equal ``target_total``.

    Returns ``(scaled_list, factor)``.
    """
    if target_total <= 0:
        raise ValueError("target_total must be positive")
    sinograms = [np.asarray(s, dtype=float) for s in sinograms]
    total = sum(float(s.sum()) for s in sinograms)
    if total <= 0:
        raise ValueError("cannot scale all-zero sinograms")
    factor = target_total / total
    return [s * factor for s in sinograms], factor


def sample_poisson(ybar, seed) -> np.ndarray:
    """Independent Poisson draws per element from a Philox counter-based stream."""
    ybar = np.asarray(ybar, dtype=float)
    if np.any(ybar < 0) or not np.all(np.isfinite(ybar)):
        raise ValueError("Poisson means must be finite and nonnegative")
    rng = np.random.Generator(np.random.Philox(seed))
    return rng.poisson(ybar).astype(np.int64)
