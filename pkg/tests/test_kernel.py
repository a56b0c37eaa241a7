import io as _io
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dkpet.kernel import (
    FeatureSet,
    SparseKernelMatrix,
    attention_map,
    build_kernel,
    empirical_kernel,
    extract_intensity_features,
    identity_kernel,
    kernel_matvec,
    kernel_rmatvec,
    knn_search,
    load_kernel,
    save_kernel,
    softmax_normalize,
    standardize_columns,
)


def brute_knn(F, k, window, shape):
    """Loop oracle: clamped window, self first, (distance, index) order."""
    h, w = shape
    wy, wx = min(window, h), min(window, w)
    out = []
    for j in range(h * w):
        r, c = divmod(j, w)
        y0 = min(max(r - wy // 2, 0), h - wy)
        x0 = min(max(c - wx // 2, 0), w - wx)
        cand = [(y0 + a) * w + (x0 + b) for a in range(wy) for b in range(wx)]
        others = sorted((float(np.sum((F[l] - F[j]) ** 2)), l) for l in cand if l != j)
        out.append([j] + [l for _, l in others[: k - 1]])
    return np.array(out)


def dense_kernel(F, nbrs, sigma):
    n = F.shape[0]
    K = np.zeros((n, n))
    for j in range(n):
        num = {l: math.exp(-np.sum((F[j] - F[l]) ** 2) / (2 * sigma**2)) for l in nbrs[j]}
        tot = sum(num.values())
        for l, v in num.items():
            K[j, l] = v / tot
    return K


def test_standardize_example():
    Z, flagged = standardize_columns(np.array([[1.0], [2.0], [3.0]]))
    assert np.allclose(Z.ravel(), [-math.sqrt(1.5), 0.0, math.sqrt(1.5)], atol=1e-12)
    assert flagged == ()


def test_constant_column_flagged():
    priors = [np.full((3, 3), 2.0), np.arange(9.0).reshape(3, 3)]
    with pytest.warns(UserWarning):
        fs = extract_intensity_features(priors)
    assert fs.flagged_columns == (0,)
    assert np.all(fs.values[:, 0] == 0)


def test_knn_matches_brute_force(rng):
    shape = (7, 9)
    F = rng.integers(0, 4, size=(63, 2)).astype(float)  # many ties
    g = knn_search(FeatureSet(F), 6, 5, shape)
    assert np.array_equal(g.indices, brute_knn(F, 6, 5, shape))
    assert np.all(g.indices[:, 0] == np.arange(63))


def test_knn_k_too_large():
    with pytest.raises(ValueError):
        knn_search(FeatureSet(np.zeros((16, 1))), 10, 3, (4, 4))


@pytest.mark.parametrize("shape", [(4, 4), (3, 5), (2, 2)])
def test_full_window_kernel_matches_dense(shape, rng):
    n = shape[0] * shape[1]
    F = rng.normal(size=(n, 3))
    g = knn_search(FeatureSet(F), n, max(shape) * 2 + 1, shape)
    K = build_kernel(FeatureSet(F), g, 0.8)
    D = dense_kernel(F, brute_knn(F, n, max(shape) * 2 + 1, shape), 0.8)
    assert np.max(np.abs(K.to_dense() - D)) < 1e-12
    assert np.max(np.abs(K.to_dense().sum(axis=1) - 1)) < 1e-12


def test_four_pixel_example():
    F = np.array([[0.0], [0.0], [1.0], [1.0]])
    g = knn_search(FeatureSet(F), 4, 3, (2, 2))
    K = build_kernel(FeatureSet(F), g, 1.0).to_dense()
    a = 1.0 / (2 + 2 * math.exp(-0.5))
    b = math.exp(-0.5) * a
    expected = np.array([[a, a, b, b], [a, a, b, b], [b, b, a, a], [b, b, a, a]])
    assert np.allclose(K, expected, atol=1e-14)


def test_identity_kernel_and_delta_attention():
    K = identity_kernel((4, 5))
    v = np.arange(20.0)
    assert np.array_equal(kernel_matvec(K, v), v)
    amap = attention_map(K, 7)
    assert amap.sum() == 1.0 and amap.ravel()[7] == 1.0 and np.count_nonzero(amap) == 1
    with pytest.raises(IndexError):
        attention_map(K, 20)


@given(arrays(float, (6, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariance(S, c):
    W = softmax_normalize(S)
    assert np.allclose(W, softmax_normalize(S + c), atol=1e-12)
    assert np.allclose(W.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(W >= 0)


@given(st.integers(0, 2**32 - 1), st.integers(1, 9), st.sampled_from([1, 3, 5]), st.floats(0.2, 3.0))
def test_kernel_rows_sum_to_one(seed, k, window, sigma):
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(30, 2)) * 3
    k = min(k, window * window)
    K = build_kernel(FeatureSet(F), knn_search(FeatureSet(F), k, window, (5, 6)), sigma)
    assert np.allclose(K.weights.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(K.weights >= 0)


@given(st.integers(0, 2**32 - 1))
def test_matvec_adjoint(seed):
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(35, 2))
    K = build_kernel(FeatureSet(F), knn_search(FeatureSet(F), 6, 3, (5, 7)), 1.0)
    u, v = rng.normal(size=35), rng.normal(size=35)
    assert np.vdot(u, kernel_matvec(K, v)) == pytest.approx(np.vdot(kernel_rmatvec(K, u), v), rel=1e-10, abs=1e-12)
    D = K.to_dense()
    assert np.allclose(kernel_matvec(K, v), D @ v)
    assert np.allclose(K.to_scipy().toarray(), D)


def test_empirical_kernel_shapes(rng):
    priors = [rng.uniform(size=(12, 10)) for _ in range(3)]
    K, g, fs = empirical_kernel(priors, k=7, sigma=1.0, window=5)
    assert K.indices.shape == (120, 7) and K.image_shape == (12, 10)
    assert fs.n_features == 3


def test_kernel_file_roundtrip(tmp_path, rng):
    F = rng.normal(size=(20, 2))
    K = build_kernel(FeatureSet(F), knn_search(FeatureSet(F), 4, 3, (4, 5)), 1.0)
    path = tmp_path / "k.dkk"
    save_kernel(path, K)
    blob = path.read_bytes()
    assert len(blob) == 24 + 20 * 4 * (4 + 8)
    K2 = load_kernel(path)
    assert np.array_equal(K2.indices, K.indices) and np.array_equal(K2.weights, K.weights)
    assert K2.image_shape == (4, 5)
