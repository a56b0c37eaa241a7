"""Trainable deep kernel: residual conv feature extractor, DAE loss and training.

Prior data ``Z`` is a ``(n_z, height, width)`` stack.  The network output is
``Z + conv_L(...act(conv_1(Z)))`` when the residual skip is on, so all-zero
parameters give back the input channels and the deep kernel reduces to the
intensity kernel built from the same ``Z``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .kernel import (
    FeatureSet,
    NeighborhoodGraph,
    SparseKernelMatrix,
    assemble_kernel,
    kernel_matvec,
    softmax_normalize,
)
from .projector import SystemModel
from .recon import ReconSettings, reconstruct

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConvLayer:
    in_ch: int
    out_ch: int
    ksize: int = 3
    act: bool = False  # softplus after the convolution

    def __post_init__(self):
        if self.ksize < 1 or self.ksize % 2 == 0:
            raise ValueError("kernel size must be odd and positive")


def default_architecture(n_z: int, hidden: int = 8) -> tuple[ConvLayer, ...]:
    return (ConvLayer(n_z, hidden, 3, True), ConvLayer(hidden, n_z, 3, False))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _conv_forward(x, w, b):
    """Same-padded 2-D convolution (cross-correlation).  x: (C,H,W), w: (O,C,k,k)."""
    pad = w.shape[-1] // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    cols = sliding_window_view(xp, w.shape[-2:], axis=(1, 2))  # (C,H,W,k,k)
    out = np.einsum("ocij,chwij->ohw", w, cols) + b[:, None, None]
    return out, cols


def _conv_backward(dout, cols, w, x_shape):
    dw = np.einsum("ohw,chwij->ocij", dout, cols)
    db = dout.sum(axis=(1, 2))
    k = w.shape[-1]
    pad = k // 2
    C, H, W = x_shape
    dxp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + H, j:j + W] += np.einsum("oc,ohw->chw", w[:, :, i, j], dout)
    return dxp[:, pad:pad + H, pad:pad + W], dw, db


@dataclass
class FeatureNetwork:
    """Conv layers plus optional input-to-output skip; parameters in one flat vector."""

    layers: tuple[ConvLayer, ...]
    residual: bool = True
    theta: np.ndarray = None

    def __post_init__(self):
        self.layers = tuple(self.layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_ch != b.in_ch:
                raise ValueError("consecutive layers disagree on channel count")
        if self.residual and self.layers[0].in_ch != self.layers[-1].out_ch:
            raise ValueError("residual skip needs n_f == n_z")
        if self.theta is None:
            self.theta = np.zeros(self.n_params)
        self.theta = np.asarray(self.theta, dtype=float).copy()
        if self.theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {self.theta.shape}")

    @property
    def n_in(self) -> int:
        return self.layers[0].in_ch

    @property
    def n_out(self) -> int:
        return self.layers[-1].out_ch

    @property
    def layout(self):
        """List of ``(name, offset, shape)`` for each parameter block."""
        out, off = [], 0
        for i, L in enumerate(self.layers):
            wshape = (L.out_ch, L.in_ch, L.ksize, L.ksize)
            out.append((f"w{i}", off, wshape))
            off += math.prod(wshape)
            out.append((f"b{i}", off, (L.out_ch,)))
            off += L.out_ch
        return out

    @property
    def n_params(self) -> int:
        return sum(L.out_ch * (L.in_ch * L.ksize**2 + 1) for L in self.layers)

    def params(self, theta=None):
        theta = self.theta if theta is None else theta
        return {name: theta[off:off + math.prod(shape)].reshape(shape) for name, off, shape in self.layout}

    def copy(self, theta=None) -> "FeatureNetwork":
        return FeatureNetwork(self.layers, self.residual, self.theta if theta is None else theta)

    def initialize(self, seed) -> "FeatureNetwork":
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases, last layer zeroed.

        A zero last layer with the residual skip makes the initial network the
        identity, i.e. training starts from the intensity kernel.
        """
        rng = np.random.Generator(np.random.Philox(seed))
        theta = np.zeros(self.n_params)
        for i, L in enumerate(self.layers):
            if self.residual and i == len(self.layers) - 1:
                continue
            _, off, shape = self.layout[2 * i]
            bound = 1.0 / math.sqrt(L.in_ch * L.ksize**2)
            theta[off:off + math.prod(shape)] = rng.uniform(-bound, bound, math.prod(shape))
        return self.copy(theta)

    def forward(self, Z):
        """Return ``(features (n_out,H,W), cache)``."""
        Z = np.asarray(Z, dtype=float)
        if Z.ndim != 3 or Z.shape[0] != self.n_in:
            raise ValueError(f"expected input of shape ({self.n_in}, H, W), got {Z.shape}")
        p = self.params()
        h = Z
        cache = []
        for i, L in enumerate(self.layers):
            pre, cols = _conv_forward(h, p[f"w{i}"], p[f"b{i}"])
            out = _softplus(pre) if L.act else pre
            cache.append((h.shape, cols, pre))
            h = out
        if self.residual:
            h = h + Z
        return h, cache

    def backward(self, cache, dout) -> np.ndarray:
        """Gradient of a scalar w.r.t. ``theta`` given its gradient ``dout`` w.r.t. the output."""
        p = self.params()
        grads = {}
        g = np.asarray(dout, dtype=float)
        for i in reversed(range(len(self.layers))):
            L = self.layers[i]
            x_shape, cols, pre = cache[i]
            if L.act:
                g = g * _sigmoid(pre)
            g, grads[f"w{i}"], grads[f"b{i}"] = _conv_backward(g, cols, p[f"w{i}"], x_shape)
        flat = np.zeros(self.n_params)
        for name, off, shape in self.layout:
            flat[off:off + math.prod(shape)] = grads[name].ravel()
        return flat

    def descriptor(self) -> str:
        parts = [f"{L.in_ch}:{L.out_ch}:{L.ksize}:{'softplus' if L.act else 'linear'}" for L in self.layers]
        return " ".join(parts)


def network_forward(net: FeatureNetwork, Z) -> FeatureSet:
    out, _ = net.forward(Z)
    return FeatureSet(out.reshape(out.shape[0], -1).T, "network")


def _kernel_from_features(F, graph: NeighborhoodGraph, sigma: float):
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    diff = F[:, None, :] - F[graph.indices]  # (n_p, k, n_f)
    S = -np.sum(diff * diff, axis=2) / (2.0 * sigma**2)
    return softmax_normalize(S), diff


def build_deep_kernel(net: FeatureNetwork, Z, graph: NeighborhoodGraph, sigma: float = 1.0) -> SparseKernelMatrix:
    F = network_forward(net, Z).values
    W, _ = _kernel_from_features(F, graph, sigma)
    return assemble_kernel(W, graph)


@dataclass
class TrainingPair:
    target: np.ndarray
    corrupted: np.ndarray

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=float)
        self.corrupted = np.asarray(self.corrupted, dtype=float)
        if self.target.shape != self.corrupted.shape:
            raise ValueError("target and corrupted images differ in shape")
        if np.any(self.target < 0) or np.any(self.corrupted < 0):
            raise ValueError("training images must be nonnegative")


def _check_pairs(pairs, graph):
    if not pairs:
        raise ValueError("need at least one training pair")
    for pr in pairs:
        if pr.target.size != graph.n_pixels:
            raise ValueError("training pair size does not match the graph")


def dae_loss(net, Z, graph, sigma, pairs) -> float:
    """``sum_m |z_m - K(theta; Z) z~_m|^2``."""
    _check_pairs(pairs, graph)
    K = build_deep_kernel(net, Z, graph, sigma)
    return float(sum(np.sum((pr.target.ravel() - kernel_matvec(K, pr.corrupted.ravel())) ** 2) for pr in pairs))


def loss_and_gradient(net, Z, graph: NeighborhoodGraph, sigma: float, pairs):
    """Loss and its exact gradient w.r.t. ``net.theta``."""
    _check_pairs(pairs, graph)
    out, cache = net.forward(Z)
    n_f = out.shape[0]
    F = out.reshape(n_f, -1).T
    W, diff = _kernel_from_features(F, graph, sigma)
    idx = graph.indices

    loss = 0.0
    dW = np.zeros_like(W)
    for pr in pairs:
        zt = pr.corrupted.ravel()[idx]  # (n_p, k)
        res = np.einsum("jk,jk->j", W, zt) - pr.target.ravel()
        loss += float(res @ res)
        dW += 2.0 * res[:, None] * zt

    # softmax Jacobian, row by row
    dS = W * (dW - np.einsum("jk,jk->j", W, dW)[:, None])
    # s_jl = -|f_j - f_l|^2 / (2 sigma^2): d/df_j = -diff/sigma^2, d/df_l = +diff/sigma^2
    dDiff = dS[:, :, None] * (-diff / sigma**2)
    dF = dDiff.sum(axis=1)
    n_p = F.shape[0]
    flat_idx = idx.ravel()
    for c in range(n_f):
        dF[:, c] -= np.bincount(flat_idx, weights=dDiff[:, :, c].ravel(), minlength=n_p)
    dout = dF.T.reshape(out.shape)
    return loss, net.backward(cache, dout)


def loss_gradient(net, Z, graph, sigma, pairs) -> np.ndarray:
    return loss_and_gradient(net, Z, graph, sigma, pairs)[1]


@dataclass
class TrainSettings:
    learning_rate: float = 1e-2
    n_train_iters: int = 500
    seed: int = 0
    optimizer: str = "adam"  # or "gd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    divergence_factor: float = 1e3

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.n_train_iters < 1:
            raise ValueError("n_train_iters must be >= 1")
        if self.optimizer not in ("adam", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossTrace:
    loss: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "loss"])
            for i, v in enumerate(self.loss):
                w.writerow([i, repr(float(v))])


def train(net: FeatureNetwork, Z, graph, sigma, pairs, settings: TrainSettings | None = None):
    """First-order descent on the DAE loss.

    ``loss[i]`` is the loss at the parameters before update ``i``; the final
    entry is the loss of the returned network.
    """
    settings = settings or TrainSettings()
    theta = net.theta.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    trace = LossTrace()
    initial = None
    for it in range(settings.n_train_iters + 1):
        loss, g = loss_and_gradient(net.copy(theta), Z, graph, sigma, pairs)
        trace.loss.append(loss)
        if initial is None:
            initial = loss
        if not np.isfinite(loss) or loss > settings.divergence_factor * max(initial, 1e-300):
            raise TrainingDiverged(
                f"loss {loss:.6g} at iteration {it} exceeds {settings.divergence_factor:g}x "
                f"the initial loss {initial:.6g}; lower the learning rate"
            )
        if it == settings.n_train_iters:
            break
        if settings.optimizer == "gd":
            theta = theta - settings.learning_rate * g
        else:
            m = settings.beta1 * m + (1 - settings.beta1) * g
            v = settings.beta2 * v + (1 - settings.beta2) * g * g
            mhat = m / (1 - settings.beta1 ** (it + 1))
            vhat = v / (1 - settings.beta2 ** (it + 1))
            theta = theta - settings.learning_rate * mhat / (np.sqrt(vhat) + settings.adam_eps)
        if it % 100 == 0:
            log.debug("train iter %d loss %.6g", it, loss)
    return net.copy(theta), trace


def thin_counts(y, d: float, seed) -> np.ndarray:
    """Keep each count independently with probability ``1/d``."""
    y = np.asarray(y)
    if not d > 1:
        raise ValueError("count reduction factor d must be > 1")
    if np.any(y < 0) or not np.all(np.equal(np.mod(y, 1), 0)):
        raise ValueError("thinning needs nonnegative integer counts")
    rng = np.random.Generator(np.random.Philox(seed))
    return rng.binomial(y.astype(np.int64), 1.0 / d)


def make_training_pairs(composites, backgrounds, models, settings: ReconSettings, d: float | None,
                        seed, kernel: SparseKernelMatrix | None = None, targets=None):
    """Reconstruct each composite at full and reduced count.

    ``models[m]`` and ``backgrounds[m]`` describe composite ``m``.  ``d=None``
    skips thinning (the corrupted image is then the full-count one).
    ``kernel=None`` reconstructs with plain EM.  Pass ``targets`` to reuse
    already reconstructed full-count images.
    """
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    seeds = seed.spawn(len(composites))
    pairs = []
    for m, (y, r, model, ss) in enumerate(zip(composites, backgrounds, models, seeds)):
        if targets is not None:
            z = np.asarray(targets[m], dtype=float)
        else:
            _, z, _ = reconstruct(y, r, model, kernel, settings)
        if d is None:
            z_low = z.copy()
        else:
            y_low = thin_counts(y, d, ss)
            _, z_low, _ = reconstruct(y_low, np.asarray(r) / d, model.scaled(1.0 / d), kernel, settings)
        pairs.append(TrainingPair(z, z_low))
    return pairs


_NET_MAGIC = "DKPET-NETWORK 1"


def save_network(path, net: FeatureNetwork) -> None:
    header = (
        f"{_NET_MAGIC}\nlayers {net.descriptor()}\nresidual {int(net.residual)}\n"
        f"n_params {net.n_params}\nend\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(net.theta.astype("<f8").tobytes())


def load_network(path) -> FeatureNetwork:
    with open(path, "rb") as fh:
        blob = fh.read()
    head, sep, body = blob.partition(b"\nend\n")
    if not sep:
        raise ValueError("network file has no header terminator")
    lines = head.decode("ascii").splitlines()
    if lines[0] != _NET_MAGIC:
        raise ValueError("not a network file")
    fields = dict(line.split(" ", 1) for line in lines[1:])
    layers = []
    for tok in fields["layers"].split():
        i, o, k, act = tok.split(":")
        layers.append(ConvLayer(int(i), int(o), int(k), act == "softplus"))
    theta = np.frombuffer(body, dtype="<f8").astype(float)
    net = FeatureNetwork(tuple(layers), bool(int(fields["residual"])), theta)
    if net.n_params != int(fields["n_params"]):
        raise ValueError("parameter count mismatch")
    return net
