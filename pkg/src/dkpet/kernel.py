"""Empirical kernel construction: features, kNN graph, softmax weights, sparse rows."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class FeatureSet:
    values: np.ndarray  # (n_p, n_f)
    provenance: str = "intensity"
    flagged_columns: tuple = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("features must be a 2-D (n_p, n_f) array")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("features must be finite")

    @property
    def n_pixels(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]


@dataclass
class NeighborhoodGraph:
    """``indices[j]`` lists the k neighbours of pixel j, self first."""

    indices: np.ndarray  # (n_p, k) int64
    image_shape: tuple[int, int]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    @property
    def n_pixels(self) -> int:
        return self.indices.shape[0]


@dataclass
class SparseKernelMatrix:
    """Row-compressed matrix with exactly k entries per row.

    Row j has columns ``indices[j]`` and values ``weights[j]``.
    """

    indices: np.ndarray  # (n_p, k)
    weights: np.ndarray  # (n_p, k)
    image_shape: tuple[int, int]

    @property
    def n_pixels(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def to_dense(self) -> np.ndarray:
        n = self.n_pixels
        dense = np.zeros((n, n))
        np.add.at(dense, (np.repeat(np.arange(n), self.k), self.indices.ravel()), self.weights.ravel())
        return dense

    def to_scipy(self):
        import scipy.sparse as sp

        n = self.n_pixels
        indptr = np.arange(0, n * self.k + 1, self.k)
        return sp.csr_matrix((self.weights.ravel(), self.indices.ravel(), indptr), shape=(n, n))


def identity_kernel(image_shape) -> SparseKernelMatrix:
    n = int(np.prod(image_shape))
    return SparseKernelMatrix(np.arange(n)[:, None], np.ones((n, 1)), tuple(image_shape))


def standardize_columns(values: np.ndarray):
    """Centre each column and scale to unit population variance.

    Zero-variance columns are only centred; their indices are returned.
    """
    values = np.asarray(values, dtype=float)
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    flat = tuple(int(c) for c in np.flatnonzero(std == 0))
    std = np.where(std == 0, 1.0, std)
    return (values - mean) / std, flat


def extract_intensity_features(priors, standardize: bool = True) -> FeatureSet:
    """One feature per prior image: pixel j's row is its intensity in each prior."""
    arrays = [np.asarray(p, dtype=float) for p in priors]
    if not arrays:
        raise ValueError("need at least one prior image")
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ValueError("prior images differ in shape")
    F = np.stack([a.ravel() for a in arrays], axis=1)
    flagged = ()
    if standardize:
        F, flagged = standardize_columns(F)
        if flagged:
            warnings.warn(f"zero-variance feature columns {flagged} left unscaled", stacklevel=2)
    return FeatureSet(F, "intensity", flagged)


def _window_candidates(image_shape, window: int) -> np.ndarray:
    """Candidate pixel indices for every pixel, shape (n_p, wy*wx).

    The square window is centred on the pixel and shifted inward at image
    borders so every pixel sees the same number of candidates.  Candidates are
    listed in ascending pixel index.
    """
    h, w = image_shape
    wy, wx = min(window, h), min(window, w)
    rr, cc = np.divmod(np.arange(h * w), w)
    y0 = np.clip(rr - wy // 2, 0, h - wy)
    x0 = np.clip(cc - wx // 2, 0, w - wx)
    dy, dx = np.divmod(np.arange(wy * wx), wx)
    return (y0[:, None] + dy[None, :]) * w + (x0[:, None] + dx[None, :])


def knn_search(features: FeatureSet, k: int, window: int, image_shape,
               chunk: int = 2048) -> NeighborhoodGraph:
    """Exact k nearest neighbours in feature space within a spatial window.

    Self is always the first neighbour; remaining ties go to the lower pixel
    index.
    """
    F = features.values if isinstance(features, FeatureSet) else np.asarray(features, dtype=float)
    h, w = image_shape
    if F.shape[0] != h * w:
        raise ValueError("feature rows do not match the image size")
    if k < 1 or window < 1:
        raise ValueError("k and window must be >= 1")
    cand = _window_candidates(image_shape, window)
    if k > cand.shape[1]:
        raise ValueError(f"k={k} exceeds the {cand.shape[1]} candidates in the search window")
    n = h * w
    out = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, chunk):
        rows = np.arange(start, min(start + chunk, n))
        c = cand[rows]
        d = np.sum((F[c] - F[rows, None, :]) ** 2, axis=2)
        d[c == rows[:, None]] = -1.0
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        out[rows] = np.take_along_axis(c, order, axis=1)
    return NeighborhoodGraph(out, tuple(image_shape))


def pairwise_similarity(features, graph: NeighborhoodGraph, sigma: float) -> np.ndarray:
    """``s_jl = -|f_j - f_l|^2 / (2 sigma^2)`` for l in N_j, shape (n_p, k)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    F = features.values if isinstance(features, FeatureSet) else np.asarray(features, dtype=float)
    diff = F[:, None, :] - F[graph.indices]
    return -np.sum(diff * diff, axis=2) / (2.0 * sigma**2)


def softmax_normalize(S: np.ndarray) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    e = np.exp(S - S.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def assemble_kernel(W: np.ndarray, graph: NeighborhoodGraph) -> SparseKernelMatrix:
    W = np.asarray(W, dtype=float)
    if W.shape != graph.indices.shape:
        raise ValueError(f"weights {W.shape} and graph {graph.indices.shape} disagree")
    return SparseKernelMatrix(graph.indices.copy(), W.copy(), graph.image_shape)


def build_kernel(features, graph: NeighborhoodGraph, sigma: float = 1.0) -> SparseKernelMatrix:
    return assemble_kernel(softmax_normalize(pairwise_similarity(features, graph, sigma)), graph)


def empirical_kernel(priors, k: int = 50, sigma: float = 1.0, window: int = 21,
                     standardize: bool = True):
    """Intensity-feature kernel from prior images. Returns ``(K, graph, features)``."""
    shape = np.asarray(priors[0]).shape
    feats = extract_intensity_features(priors, standardize=standardize)
    graph = knn_search(feats, k, window, shape)
    return build_kernel(feats, graph, sigma), graph, feats


def kernel_matvec(K: SparseKernelMatrix, v) -> np.ndarray:
    """``K @ v``; accepts flat or image-shaped ``v`` and returns the same shape."""
    v = np.asarray(v, dtype=float)
    if v.size != K.n_pixels:
        raise ValueError(f"vector length {v.size} does not match kernel size {K.n_pixels}")
    flat = v.ravel()
    return np.einsum("jk,jk->j", K.weights, flat[K.indices]).reshape(v.shape)


def kernel_rmatvec(K: SparseKernelMatrix, u) -> np.ndarray:
    """``K.T @ u``."""
    u = np.asarray(u, dtype=float)
    if u.size != K.n_pixels:
        raise ValueError(f"vector length {u.size} does not match kernel size {K.n_pixels}")
    contrib = K.weights * u.ravel()[:, None]
    return np.bincount(K.indices.ravel(), weights=contrib.ravel(), minlength=K.n_pixels).reshape(u.shape)


def attention_map(K: SparseKernelMatrix, j: int) -> np.ndarray:
    """Row j of K as an image."""
    if not 0 <= j < K.n_pixels:
        raise IndexError(f"pixel index {j} out of range [0, {K.n_pixels})")
    out = np.zeros(K.n_pixels)
    np.add.at(out, K.indices[j], K.weights[j])
    return out.reshape(K.image_shape)


# On-disk layout: u64 n_p, u64 k, u32 height, u32 width, then per row
# k u32 column indices followed by k f64 weights, all little-endian.
_KERNEL_HEADER = struct.Struct("<QQII")


def save_kernel(path, K: SparseKernelMatrix) -> None:
    row = np.dtype([("idx", "<u4", (K.k,)), ("w", "<f8", (K.k,))])
    body = np.empty(K.n_pixels, dtype=row)
    body["idx"] = K.indices
    body["w"] = K.weights
    with open(path, "wb") as fh:
        fh.write(_KERNEL_HEADER.pack(K.n_pixels, K.k, *K.image_shape))
        fh.write(body.tobytes())


def load_kernel(path) -> SparseKernelMatrix:
    with open(path, "rb") as fh:
        n, k, h, w = _KERNEL_HEADER.unpack(fh.read(_KERNEL_HEADER.size))
        row = np.dtype([("idx", "<u4", (k,)), ("w", "<f8", (k,))])
        body = np.frombuffer(fh.read(), dtype=row, count=n)
    return SparseKernelMatrix(body["idx"].astype(np.int64), body["w"].astype(float), (h, w))
