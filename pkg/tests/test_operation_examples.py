"""Worked examples and invariants for individual operations."""

import math

import numpy as np
import pytest
import scipy.sparse as sp

from dkpet.deepkernel import (
    ConvLayer,
    FeatureNetwork,
    TrainingPair,
    build_deep_kernel,
    dae_loss,
    default_architecture,
    loss_gradient,
    make_training_pairs,
    thin_counts,
)
from dkpet.kernel import (
    FeatureSet,
    NeighborhoodGraph,
    attention_map,
    build_kernel,
    extract_intensity_features,
    identity_kernel,
    kernel_matvec,
    knn_search,
    pairwise_similarity,
    softmax_normalize,
)
from dkpet.phantom import default_schedule
from dkpet.projector import (
    SystemModel,
    back_project,
    default_geometry,
    expected_data,
    forward_project,
    sample_poisson,
    scale_to_counts,
)
from dkpet.recon import (
    ReconSettings,
    kem_update,
    poisson_loglik,
    rebin_composite,
    reconstruct,
    sensitivity_image,
    snr_db,
)


def test_zero_in_zero_out(small_model):
    assert not forward_project(small_model, np.zeros((8, 8))).any()
    assert not back_project(small_model, np.zeros(small_model.geometry.shape)).any()


def test_background_800_to_1000():
    model = SystemModel.from_matrix(sp.eye(4) * 200.0, (2, 2), (2, 2))
    ybar, r = expected_data(model, np.ones((2, 2)), 0.2)
    assert r.sum() == pytest.approx(200.0) and ybar.sum() == pytest.approx(1000.0)
    ybar0, r0 = expected_data(model, np.ones((2, 2)), 0.0)
    assert not r0.any() and np.array_equal(ybar0, forward_project(model, np.ones((2, 2))))


def test_scaling_examples():
    out, f = scale_to_counts([np.full((1, 4), 0.25)], 8e6)
    assert f == pytest.approx(8e6)
    out, f = scale_to_counts([np.full((1, 3), 1.0), np.full((1, 1), 1.0)], 8)
    assert f == pytest.approx(2.0) and [o.sum() for o in out] == pytest.approx([6.0, 2.0])


def test_poisson_examples():
    assert not sample_poisson(np.zeros((3, 3)), 0).any()
    draws = sample_poisson(np.full((100, 100), 100.0), 42)
    assert abs(draws.mean() - 100.0) < 0.3


def test_feature_columns(rng):
    one = extract_intensity_features([np.arange(6.0).reshape(2, 3)], standardize=False)
    assert np.array_equal(one.values[:, 0], np.arange(6.0))
    assert extract_intensity_features([rng.uniform(size=(4, 4)) for _ in range(3)]).n_features == 3


def test_knn_examples():
    g = knn_search(FeatureSet(np.array([[0.0], [1.0], [10.0]])), 2, 5, (1, 3))
    assert g.indices.tolist() == [[0, 1], [1, 0], [2, 1]]
    g1 = knn_search(FeatureSet(np.random.default_rng(0).normal(size=(12, 2))), 1, 3, (3, 4))
    assert np.array_equal(g1.indices[:, 0], np.arange(12))
    tied = knn_search(FeatureSet(np.zeros((9, 1))), 3, 3, (3, 3))
    for j, row in enumerate(tied.indices):
        assert row[0] == j
        assert list(row[1:]) == [l for l in range(9) if l != j][:2]


def test_similarity_examples():
    F = np.array([[0.0, 0.0], [3.0, 4.0], [1.0, 0.0]])
    g = NeighborhoodGraph(np.array([[0, 1, 2], [1, 0, 2], [2, 0, 1]]), (1, 3))
    S = pairwise_similarity(F, g, 1.0)
    assert S[0, 0] == 0 and S[0, 1] == pytest.approx(-12.5) and S[0, 2] == pytest.approx(-0.5)
    assert pairwise_similarity(F, g, 2.0)[0, 1] == pytest.approx(-12.5 / 4)


def test_softmax_examples():
    assert np.allclose(softmax_normalize(np.full((2, 200), -3.7)), 1 / 200)
    assert np.allclose(softmax_normalize(np.array([[0.0, math.log(2)]])), [[1 / 3, 2 / 3]])


def test_kernel_examples(rng):
    F = rng.normal(size=(6, 2))
    K1 = build_kernel(FeatureSet(F), knn_search(FeatureSet(F), 1, 3, (2, 3)), 1.0)
    assert np.array_equal(K1.to_dense(), np.eye(6))
    K = build_kernel(FeatureSet(F), knn_search(FeatureSet(F), 3, 3, (2, 3)), 1.0)
    assert np.allclose(kernel_matvec(K, np.full(6, 4.5)), 4.5, rtol=0, atol=1e-14)
    v = rng.normal(size=6)
    assert np.allclose(kernel_matvec(K, v), K.to_dense() @ v, atol=1e-14)
    for j in range(6):
        assert np.allclose(attention_map(K, j).ravel(), K.to_dense()[j])
        assert attention_map(K, j).sum() == pytest.approx(1.0, abs=1e-12)


def test_self_weight_is_row_maximum(rng):
    F = rng.normal(size=(48, 3))
    K = build_kernel(FeatureSet(F), knn_search(FeatureSet(F), 10, 5, (6, 8)), 1.0)
    assert np.all(K.weights[:, 0] >= K.weights.max(axis=1))


def test_sensitivity_examples(model32):
    assert np.array_equal(sensitivity_image(model32), back_project(model32, np.ones(model32.geometry.shape)))
    F = np.random.default_rng(1).normal(size=(1024, 2))
    K = build_kernel(FeatureSet(F), knn_search(FeatureSet(F), 60, 32, (32, 32)), 1.0)
    assert np.all(sensitivity_image(model32, K) > 0)


def test_fixed_point(small_model, rng):
    F = rng.normal(size=(64, 2))
    K = build_kernel(FeatureSet(F), knn_search(FeatureSet(F), 5, 3, (8, 8)), 1.0)
    alpha = rng.uniform(0.5, 2, size=(8, 8))
    r = np.full(small_model.geometry.shape, 0.3)
    y = forward_project(small_model, kernel_matvec(K, alpha)) + r
    nxt = kem_update(alpha, y, r, small_model, K, sensitivity_image(small_model, K))
    assert np.allclose(nxt, alpha, rtol=1e-12)


def test_consistent_data_monotone_to_max(small_model, rng):
    x = rng.uniform(1, 3, size=(8, 8))
    y = forward_project(small_model, x)
    alpha, xr, tr = reconstruct(y, 0.0, small_model, None, ReconSettings(60))
    assert len(tr) == 60 and tr.iterations == list(range(1, 61))
    ll = np.array(tr.loglik)
    lmax = poisson_loglik(y, y)
    assert np.all(np.diff(ll) >= -1e-9 * np.abs(ll[1:]))
    assert np.all(ll <= lmax + 1e-9 * abs(lmax))
    again = reconstruct(y, 0.0, small_model, None, ReconSettings(60))
    assert np.array_equal(again[1], xr)


def test_nonnegative_iterates(small_model, rng):
    y = rng.poisson(forward_project(small_model, rng.uniform(0, 2, (8, 8)))).astype(float)
    K = identity_kernel((8, 8))
    sens = sensitivity_image(small_model, K)
    alpha = np.ones((8, 8))
    for _ in range(15):
        alpha = kem_update(alpha, y, 0.0, small_model, K, sens)
        assert np.all(alpha >= 0)


def test_rebin_conservation(rng):
    s = default_schedule()
    counts = [rng.poisson(3.0, size=(5, 7)) for _ in range(24)]
    comps = rebin_composite(counts, s, [(0, 1200), (1200, 2400), (2400, 3600)])
    assert len(comps) == 3
    assert sum(int(c.sum()) for c in comps) == sum(int(c.sum()) for c in counts)
    (whole,) = rebin_composite(counts, s, [(0, 3600)])
    assert np.array_equal(whole, sum(counts))


def test_one_by_one_convs_are_pixelwise(rng):
    net = FeatureNetwork((ConvLayer(3, 2, 1), ConvLayer(2, 4, 1)), residual=False)
    net = net.copy(rng.normal(size=net.n_params))
    Z = rng.normal(size=(3, 5, 6))
    out, _ = net.forward(Z)
    p = net.params()
    A = p["w1"][:, :, 0, 0] @ p["w0"][:, :, 0, 0]
    c = p["w1"][:, :, 0, 0] @ p["b0"] + p["b1"]
    assert np.allclose(out, np.einsum("oc,chw->ohw", A, Z) + c[:, None, None])


@pytest.fixture
def nine(rng):
    Z = rng.normal(size=(3, 3, 3))
    graph = knn_search(FeatureSet(Z.reshape(3, -1).T), 9, 3, (3, 3))
    net = FeatureNetwork(default_architecture(3)).initialize(np.random.SeedSequence(2))
    net = net.copy(net.theta + rng.normal(scale=0.1, size=net.n_params))
    return Z, graph, net


def test_loss_examples(nine, rng):
    Z, graph, net = nine
    z = rng.uniform(size=(3, 3))
    self_graph = NeighborhoodGraph(np.arange(9)[:, None], (3, 3))
    assert dae_loss(net, Z, self_graph, 1.0, [TrainingPair(z, z)]) == 0.0
    const = [TrainingPair(np.full((3, 3), 2.5), np.full((3, 3), 2.5))]
    assert dae_loss(net, Z, graph, 1.0, const) == pytest.approx(0.0, abs=1e-24)
    assert np.allclose(loss_gradient(net, Z, graph, 1.0, const), 0.0, atol=1e-12)
    pairs = [TrainingPair(rng.uniform(size=(3, 3)), rng.uniform(size=(3, 3))) for _ in range(2)]
    D = build_deep_kernel(net, Z, graph, 1.0).to_dense()
    ref = sum(float(np.sum((p.target.ravel() - D @ p.corrupted.ravel()) ** 2)) for p in pairs)
    assert dae_loss(net, Z, graph, 1.0, pairs) == pytest.approx(ref, rel=1e-12)


def test_deep_kernel_linear_in_alpha(nine, rng):
    Z, graph, net = nine
    K = build_deep_kernel(net, Z, graph, 1.0)
    a1, a2 = rng.normal(size=9), rng.normal(size=9)
    lhs = kernel_matvec(K, 2.0 * a1 - 3.0 * a2)
    assert np.allclose(lhs, 2.0 * kernel_matvec(K, a1) - 3.0 * kernel_matvec(K, a2), atol=1e-12)


def test_thinning_examples():
    assert not thin_counts(np.zeros((4, 4), dtype=int), 10, 0).any()
    y = np.full((200, 400), 10)
    total = thin_counts(y, 10, 99).sum()
    assert abs(total - 8e4) < 3 * math.sqrt(8e4 * 0.9)


def test_three_pairs_and_skip(small_model, rng):
    ys = [rng.poisson(forward_project(small_model, np.ones((8, 8))) * 20).astype(float) for _ in range(3)]
    models = [small_model.scaled(20)] * 3
    rs = [np.zeros_like(ys[0])] * 3
    assert len(make_training_pairs(ys, rs, models, ReconSettings(3), 10, 0)) == 3
    clean = forward_project(small_model.scaled(20), np.ones((8, 8)))
    (pr,) = make_training_pairs([clean], rs[:1], models[:1], ReconSettings(3), None, 0)
    assert np.array_equal(pr.target, pr.corrupted)


def test_snr_zero_db():
    t = np.arange(1.0, 10.0)
    assert snr_db(np.zeros_like(t), t) == pytest.approx(0.0)
    assert snr_db(2 * t, t) == pytest.approx(0.0)


def test_trained_attention_confined_to_window(rng):
    priors = [rng.uniform(size=(16, 16)) for _ in range(3)]
    feats = extract_intensity_features(priors)
    graph = knn_search(feats, 12, 5, (16, 16))
    Z = np.stack([feats.values[:, c].reshape(16, 16) for c in range(3)])
    net = FeatureNetwork(default_architecture(3)).initialize(np.random.SeedSequence(1))
    net = net.copy(net.theta + rng.normal(scale=0.05, size=net.n_params))
    K = build_deep_kernel(net, Z, graph, 1.0)
    j = 7 * 16 + 9
    amap = attention_map(K, j)
    rows, cols = np.nonzero(amap)
    assert np.all(np.abs(rows - 7) <= 2) and np.all(np.abs(cols - 9) <= 2)
