"""ML-EM and kernelized EM reconstruction."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .kernel import SparseKernelMatrix, identity_kernel, kernel_matvec, kernel_rmatvec
from .projector import SystemModel, back_project, forward_project


@dataclass
class ReconSettings:
    n_iterations: int = 60
    epsilon: float = 1e-12
    record_every: int = 1

    def __post_init__(self):
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")


@dataclass
class ReconTrace:
    iterations: list = field(default_factory=list)
    loglik: list = field(default_factory=list)
    snr_db: list = field(default_factory=list)

    def append(self, it, ll, snr=None):
        self.iterations.append(it)
        self.loglik.append(ll)
        self.snr_db.append(snr)

    def __len__(self):
        return len(self.iterations)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loglik", "snr_db"])
            for it, ll, snr in zip(self.iterations, self.loglik, self.snr_db):
                w.writerow([it, repr(float(ll)), "" if snr is None else repr(float(snr))])


def poisson_loglik(y, ybar) -> float:
    """Poisson log-likelihood without the ``log y!`` term."""
    y = np.asarray(y, dtype=float)
    ybar = np.asarray(ybar, dtype=float)
    pos = y > 0
    return float(np.sum(y[pos] * np.log(ybar[pos])) - np.sum(ybar))


def sensitivity_image(model: SystemModel, K: SparseKernelMatrix | None = None) -> np.ndarray:
    """``K^T P^T 1``."""
    s = back_project(model, np.ones(model.geometry.shape))
    return s if K is None else kernel_rmatvec(K, s)


def _eps(y, r, settings_eps):
    scale = max(float(np.mean(y)), float(np.mean(r)), 1.0)
    return settings_eps * scale


def kem_update(alpha, y, r, model: SystemModel, K: SparseKernelMatrix, sens,
               epsilon: float = 1e-12) -> np.ndarray:
    """One kernelized EM step; pixels with sensitivity below ``epsilon`` stay put."""
    alpha = np.asarray(alpha, dtype=float)
    y = np.asarray(y, dtype=float)
    ybar = forward_project(model, kernel_matvec(K, alpha)) + r
    eps = _eps(y, r, epsilon)
    ratio = np.where(y > 0, y / np.maximum(ybar, eps), 0.0)
    back = kernel_rmatvec(K, back_project(model, ratio))
    active = sens > eps
    out = alpha.copy()
    out[active] = alpha[active] / sens[active] * back[active]
    return out


def snr_db(estimate, truth, cap: float = 300.0) -> float:
    """``-10 log10(|x - x_true|^2 / |x_true|^2)``, capped at ``cap`` dB."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise ValueError("estimate and truth differ in shape")
    ref = float(np.sum(truth**2))
    if ref == 0:
        raise ValueError("truth image has zero norm")
    err = float(np.sum((estimate - truth) ** 2))
    if err == 0:
        return cap
    return min(cap, -10.0 * math.log10(err / ref))


def reconstruct(y, r, model: SystemModel, K: SparseKernelMatrix | None = None,
                settings: ReconSettings | None = None, truth=None, alpha0=None):
    """Run kernelized EM; ``K=None`` means plain ML-EM.

    Returns ``(alpha, x, trace)`` with ``x = K alpha``.
    """
    settings = settings or ReconSettings()
    if K is None:
        K = identity_kernel(model.image_shape)
    y = np.asarray(y, dtype=float)
    r = np.broadcast_to(np.asarray(r, dtype=float), y.shape)
    if y.shape != model.geometry.shape:
        raise ValueError("sinogram shape does not match model geometry")
    if np.any(y < 0):
        raise ValueError("counts must be nonnegative")
    sens = sensitivity_image(model, K)
    eps = _eps(y, r, settings.epsilon)
    if alpha0 is None:
        alpha = np.where(sens > eps, 1.0, 0.0)
    else:
        alpha = np.array(alpha0, dtype=float)
    trace = ReconTrace()
    for it in range(1, settings.n_iterations + 1):
        alpha = kem_update(alpha, y, r, model, K, sens, settings.epsilon)
        if it % settings.record_every == 0 or it == settings.n_iterations:
            x = kernel_matvec(K, alpha)
            ll = poisson_loglik(y, forward_project(model, x) + r)
            trace.append(it, ll, None if truth is None else snr_db(x, truth))
    return alpha, kernel_matvec(K, alpha), trace


def composite_members(schedule, windows, atol: float = 1e-6):
    """Frame indices for each (t_start, t_end) window; windows must hit frame edges."""
    starts = np.array([a for a, _ in schedule.frames])
    ends = np.array([b for _, b in schedule.frames])
    members = []
    for t0, t1 in windows:
        if not t1 > t0:
            raise ValueError(f"empty composite window ({t0}, {t1})")
        i0 = np.flatnonzero(np.abs(starts - t0) <= atol)
        i1 = np.flatnonzero(np.abs(ends - t1) <= atol)
        if not len(i0) or not len(i1):
            raise ValueError(f"composite window ({t0}, {t1}) is not aligned with frame boundaries")
        members.append(list(range(int(i0[0]), int(i1[0]) + 1)))
    flat = [m for ms in members for m in ms]
    if len(flat) != len(set(flat)):
        raise ValueError("composite windows overlap")
    return members


def rebin_composite(counts, schedule, windows):
    """Sum frame count sinograms inside each composite window."""
    if len(counts) != len(schedule):
        raise ValueError("number of sinograms does not match the schedule")
    out = []
    for members in composite_members(schedule, windows):
        total = np.zeros_like(np.asarray(counts[members[0]]))
        for m in members:
            total = total + np.asarray(counts[m])
        out.append(total)
    return out
