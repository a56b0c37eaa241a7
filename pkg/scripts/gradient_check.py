#!/usr/bin/env python3
"""Finite-difference check of the deep kernel loss gradient on a small image."""

import argparse
import math

import numpy as np

from dkpet.deepkernel import FeatureNetwork, TrainingPair, dae_loss, default_architecture, loss_gradient
from dkpet.kernel import FeatureSet, knn_search


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=3, help="image side length")
    ap.add_argument("--priors", type=int, default=3)
    ap.add_argument("--draws", type=int, default=3)
    ap.add_argument("--step", type=float, default=3e-5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    n, nz = args.size, args.priors
    Z = rng.normal(size=(nz, n, n))
    k = min(9, n * n)
    graph = knn_search(FeatureSet(Z.reshape(nz, -1).T), k, 3, (n, n))
    pairs = [TrainingPair(rng.uniform(0, 2, (n, n)), rng.uniform(0, 2, (n, n))) for _ in range(nz)]
    net = FeatureNetwork(default_architecture(nz))
    for d in range(args.draws):
        theta = np.concatenate([rng.uniform(-1, 1, L.out_ch * (L.in_ch * L.ksize**2 + 1)) / math.sqrt(L.in_ch * 9)
                                for L in net.layers])
        a = loss_gradient(net.copy(theta), Z, graph, 1.0, pairs)
        f = np.empty_like(a)
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = args.step
            f[i] = (dae_loss(net.copy(theta + e), Z, graph, 1.0, pairs)
                    - dae_loss(net.copy(theta - e), Z, graph, 1.0, pairs)) / (2 * args.step)
        floor = 1e-6 * max(1.0, np.abs(f).max())
        rel = np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
        print(f"draw {d}: {theta.size} params, max abs err {np.abs(a - f).max():.3e}, max rel err {rel.max():.3e}")


if __name__ == "__main__":
    main()
