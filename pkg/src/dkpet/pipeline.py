"""Simulation and reconstruction pipeline.

The in-memory functions (``simulate``, ``composite_data``, ``prior_images``,
``empirical_kernel_from_priors``, ``train_deep_kernel``, ``reconstruct_frames``)
are what the CLI stages and the experiment scripts call; the ``stage_*``
functions wrap them with on-disk artifacts under the output directory.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .config import ExperimentConfig
from .deepkernel import (
    FeatureNetwork,
    TrainSettings,
    build_deep_kernel,
    default_architecture,
    load_network,
    make_training_pairs,
    network_forward,
    save_network,
    train,
)
from .kernel import (
    SparseKernelMatrix,
    attention_map,
    build_kernel,
    extract_intensity_features,
    identity_kernel,
    knn_search,
    load_kernel,
    save_kernel,
    standardize_columns,
)
from .phantom import REGION_CODE, integrate_frames, make_phantom
from .projector import (
    ScannerGeometry2D,
    SystemModel,
    attenuation_factors,
    default_geometry,
    expected_data,
    sample_poisson,
    scale_to_counts,
)
from .recon import ReconSettings, composite_members, reconstruct, snr_db

log = logging.getLogger(__name__)

METHODS = ("mlem", "kem", "deep-kem")

# child indices of the master seed sequence
_SEED_SIMULATE, _SEED_THIN, _SEED_INIT = 0, 1, 2


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def stage_seed(seed: int, stage: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), stage])


@dataclass
class Simulation:
    region_map: object
    report: dict
    schedule: object
    truth: np.ndarray  # (n_frames, H, W) mean activity per frame
    base_model: SystemModel  # attenuation only
    frame_factors: np.ndarray  # count scale x duration per frame
    expected: list
    backgrounds: list
    counts: list
    scale: float

    def frame_model(self, m: int) -> SystemModel:
        return self.base_model.scaled(self.frame_factors[m])


def system_model(cfg: ExperimentConfig, region_map=None) -> SystemModel:
    p, s = cfg.phantom, cfg.scanner
    geom = default_geometry(p.width, p.pixel_size_mm, s.n_angles)
    if s.n_bins:
        geom = ScannerGeometry2D(s.n_angles, s.n_bins, p.pixel_size_mm)
    model = SystemModel(geom, (p.height, p.width), p.pixel_size_mm)
    if s.attenuation_mu_per_mm > 0:
        if region_map is None:
            region_map, _ = make_phantom(p.width, p.height, p.pixel_size_mm)
        head = region_map.labels != REGION_CODE["background"]
        model = model.with_factors(attenuation_factors(model, head, s.attenuation_mu_per_mm))
    return model


def simulate(cfg: ExperimentConfig, seed: int | None = None) -> Simulation:
    seed = cfg.run.seed if seed is None else seed
    p = cfg.phantom
    region_map, report = make_phantom(p.width, p.height, p.pixel_size_mm)
    schedule = cfg.scan.frame_schedule()
    dyn = integrate_frames(region_map, cfg.tac.model(), schedule)
    truth = dyn.stack()
    base = system_model(cfg, region_map)
    durations = schedule.durations

    ybars, rs = [], []
    for m, x in enumerate(truth):
        ybar, r = expected_data(base.scaled(durations[m]), x, cfg.scan.background_fraction)
        ybars.append(ybar)
        rs.append(r)
    ybars, scale = scale_to_counts(ybars, cfg.scan.total_counts)
    rs = [r * scale for r in rs]
    seeds = stage_seed(seed, _SEED_SIMULATE).spawn(len(ybars))
    counts = [sample_poisson(yb, ss) for yb, ss in zip(ybars, seeds)]
    return Simulation(region_map, report, schedule, truth, base, scale * durations,
                      ybars, rs, counts, scale)


def composite_data(cfg: ExperimentConfig, counts, backgrounds, frame_factors, base_model: SystemModel):
    """Rebinned composite counts plus matching backgrounds and system models."""
    schedule = cfg.scan.frame_schedule()
    groups = composite_members(schedule, cfg.composite.window_list())
    comp_counts, comp_r, comp_models = [], [], []
    for members in groups:
        comp_counts.append(sum(np.asarray(counts[m]) for m in members))
        comp_r.append(sum(np.asarray(backgrounds[m]) for m in members))
        comp_models.append(base_model.scaled(float(sum(frame_factors[m] for m in members))))
    return comp_counts, comp_r, comp_models


def prior_images(cfg: ExperimentConfig, comp_counts, comp_r, comp_models):
    settings = ReconSettings(cfg.recon.prior_iterations, cfg.recon.epsilon)
    return [reconstruct(y, r, mdl, None, settings)[1] for y, r, mdl in zip(comp_counts, comp_r, comp_models)]


def prior_stack(priors, standardize: bool = True) -> np.ndarray:
    """Network input: priors as a (n_z, H, W) stack, per-image standardized."""
    shape = np.asarray(priors[0]).shape
    F = np.stack([np.asarray(p, dtype=float).ravel() for p in priors], axis=1)
    if standardize:
        F, _ = standardize_columns(F)
    return F.T.reshape(len(priors), *shape)


def empirical_kernel_from_priors(cfg: ExperimentConfig, priors):
    kc = cfg.kernel
    shape = np.asarray(priors[0]).shape
    feats = extract_intensity_features(priors, kc.standardize)
    graph = knn_search(feats, kc.k, kc.window, shape)
    return build_kernel(feats, graph, kc.sigma), graph


def train_deep_kernel(cfg: ExperimentConfig, priors, graph, comp_counts, comp_r, comp_models,
                      seed: int | None = None, empirical: SparseKernelMatrix | None = None):
    """Returns ``(K_deep, net, loss_trace, pairs, graph_used)``."""
    seed = cfg.run.seed if seed is None else seed
    tc, kc = cfg.training, cfg.kernel
    Z = prior_stack(priors, kc.standardize)
    settings = ReconSettings(cfg.recon.prior_iterations, cfg.recon.epsilon)
    recon_kernel = empirical if tc.corrupted_recon == "kem" else None
    pairs = make_training_pairs(comp_counts, comp_r, comp_models, settings, tc.d,
                                stage_seed(seed, _SEED_THIN), kernel=recon_kernel,
                                targets=None if recon_kernel is not None else priors)
    net = FeatureNetwork(default_architecture(len(priors), tc.hidden)).initialize(stage_seed(seed, _SEED_INIT))
    ts = TrainSettings(tc.learning_rate, tc.iterations, seed, tc.optimizer)
    net, trace = train(net, Z, graph, kc.sigma, pairs, ts)
    if tc.rebuild_graph:
        graph = knn_search(network_forward(net, Z), kc.k, kc.window, Z.shape[1:])
    return build_deep_kernel(net, Z, graph, kc.sigma), net, trace, pairs, graph


def reconstruct_frames(cfg: ExperimentConfig, counts, backgrounds, frame_factors, base_model,
                       K: SparseKernelMatrix | None, truth=None):
    """Frame-by-frame reconstruction. Returns lists of (alpha, x, trace)."""
    settings = ReconSettings(cfg.recon.iterations, cfg.recon.epsilon, cfg.recon.record_every)
    out = []
    for m, y in enumerate(counts):
        t = None if truth is None else truth[m]
        out.append(reconstruct(y, backgrounds[m], base_model.scaled(frame_factors[m]), K, settings, truth=t))
    return out


def attention_pixels(region_map, report, regions=("tumor", "gray_matter")):
    """Representative pixel per region: tumour centre; mid-rim gray matter above centre."""
    h, w = region_map.shape
    out = {}
    for name in regions:
        if name == "tumor":
            i, j = report["tumor_centre_pixel"]
        else:
            mask = region_map.mask(name)
            col = w // 2
            rows = np.flatnonzero(mask[: h // 2, col])
            if rows.size:
                i, j = int(rows[rows.size // 2]), col
            else:
                ii, jj = np.nonzero(mask)
                if not ii.size:
                    continue
                i, j = int(ii[ii.size // 2]), int(jj[jj.size // 2])
        out[name] = int(i) * w + int(j)
    return out


def region_attention_mass(K: SparseKernelMatrix, j: int, mask) -> float:
    return float(attention_map(K, j)[np.asarray(mask, dtype=bool)].sum())


# ---------------------------------------------------------------------------
# on-disk stages


def _paths(out):
    out = Path(out)
    return {
        "truth": out / "truth",
        "sino": out / "sino",
        "composite": out / "composite",
        "kernel": out / "kernel",
        "network": out / "network",
        "recon": out / "recon",
        "metrics": out / "metrics",
        "attention": out / "attention",
    }


def _mk(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _frame_name(prefix, m):
    return f"{prefix}_{m + 1:02d}.dkr"


def stage_simulate(cfg, out, seed=None):
    P = _paths(out)
    sim = simulate(cfg, seed)
    pix = cfg.phantom.pixel_size_mm
    bins = sim.base_model.geometry.bin_spacing_mm
    _mk(P["truth"])
    _mk(P["sino"])
    io.write_raster(P["truth"] / "regions.dkr", sim.region_map.labels, pix)
    io.write_pgm16(P["truth"] / "regions.pgm", sim.region_map.labels)
    for m in range(len(sim.schedule)):
        io.write_raster(P["truth"] / _frame_name("frame", m), sim.truth[m], pix)
        io.write_raster(P["sino"] / _frame_name("counts", m), sim.counts[m], bins)
        io.write_raster(P["sino"] / _frame_name("background", m), sim.backgrounds[m], bins)
        io.write_raster(P["sino"] / _frame_name("expected", m), sim.expected[m], bins)
    _write_rows(P["sino"] / "frames.csv", ["frame", "t_start", "t_end", "factor"],
                [[m + 1, repr(a), repr(b), repr(float(f))]
                 for m, ((a, b), f) in enumerate(zip(sim.schedule.frames, sim.frame_factors))])
    io.write_raster(P["sino"] / "attenuation.dkr", sim.base_model.factors, bins)
    return sim


def _load_frames(cfg, out):
    P = _paths(out)
    rows = _read_rows(P["sino"] / "frames.csv")
    n = len(rows)
    if n != len(cfg.scan.frame_schedule()):
        raise StageError("load", "frame table does not match the configured schedule")
    counts = [io.read_raster(P["sino"] / _frame_name("counts", m)) for m in range(n)]
    backgrounds = [io.read_raster(P["sino"] / _frame_name("background", m)) for m in range(n)]
    factors = np.array([float(r["factor"]) for r in rows])
    model = system_model(cfg).with_factors(io.read_raster(P["sino"] / "attenuation.dkr"))
    return counts, backgrounds, factors, model


def _load_truth(cfg, out):
    P = _paths(out)
    n = len(cfg.scan.frame_schedule())
    files = [P["truth"] / _frame_name("frame", m) for m in range(n)]
    if not all(f.exists() for f in files):
        return None
    return np.stack([io.read_raster(f) for f in files])


def stage_rebin(cfg, out):
    P = _paths(out)
    counts, backgrounds, factors, model = _load_frames(cfg, out)
    cc, cr, cm = composite_data(cfg, counts, backgrounds, factors, model)
    _mk(P["composite"])
    bins = model.geometry.bin_spacing_mm
    for i, (y, r) in enumerate(zip(cc, cr)):
        io.write_raster(P["composite"] / _frame_name("counts", i), y, bins)
        io.write_raster(P["composite"] / _frame_name("background", i), r, bins)
    windows = cfg.composite.window_list()
    groups = composite_members(cfg.scan.frame_schedule(), windows)
    _write_rows(P["composite"] / "composites.csv", ["composite", "t_start", "t_end", "frames"],
                [[i + 1, repr(a), repr(b), " ".join(str(m + 1) for m in g)]
                 for i, ((a, b), g) in enumerate(zip(windows, groups))])
    return cc, cr, cm


def _load_composites(cfg, out):
    P = _paths(out)
    _, _, factors, model = _load_frames(cfg, out)
    rows = _read_rows(P["composite"] / "composites.csv")
    cc = [io.read_raster(P["composite"] / _frame_name("counts", i)) for i in range(len(rows))]
    cr = [io.read_raster(P["composite"] / _frame_name("background", i)) for i in range(len(rows))]
    groups = composite_members(cfg.scan.frame_schedule(), cfg.composite.window_list())
    cm = [model.scaled(float(sum(factors[m] for m in g))) for g in groups]
    return cc, cr, cm


def stage_build_kernel(cfg, out):
    P = _paths(out)
    cc, cr, cm = _load_composites(cfg, out)
    priors = prior_images(cfg, cc, cr, cm)
    _mk(P["kernel"])
    for i, z in enumerate(priors):
        io.write_raster(P["kernel"] / _frame_name("prior", i), z, cfg.phantom.pixel_size_mm)
    K, _ = empirical_kernel_from_priors(cfg, priors)
    save_kernel(P["kernel"] / "empirical.dkk", K)
    return K, priors


def _load_priors(cfg, out):
    P = _paths(out)
    n = len(cfg.composite.window_list())
    return [io.read_raster(P["kernel"] / _frame_name("prior", i)) for i in range(n)]


def stage_train_kernel(cfg, out, seed=None):
    P = _paths(out)
    cc, cr, cm = _load_composites(cfg, out)
    priors = _load_priors(cfg, out)
    K_emp = load_kernel(P["kernel"] / "empirical.dkk")
    graph = _graph_of(K_emp)
    K, net, trace, pairs, _ = train_deep_kernel(cfg, priors, graph, cc, cr, cm, seed, K_emp)
    _mk(P["network"])
    save_network(P["network"] / "deep.dknet", net)
    trace.write_csv(P["network"] / "loss.csv")
    for i, pr in enumerate(pairs):
        io.write_raster(P["network"] / _frame_name("corrupted", i), pr.corrupted, cfg.phantom.pixel_size_mm)
    save_kernel(P["kernel"] / "deep.dkk", K)
    return K, net, trace


def _graph_of(K: SparseKernelMatrix):
    from .kernel import NeighborhoodGraph

    return NeighborhoodGraph(K.indices.copy(), K.image_shape)


def _kernel_for(method, cfg, out):
    P = _paths(out)
    if method == "mlem":
        return identity_kernel((cfg.phantom.height, cfg.phantom.width))
    if method == "kem":
        return load_kernel(P["kernel"] / "empirical.dkk")
    if method == "deep-kem":
        return load_kernel(P["kernel"] / "deep.dkk")
    raise ValueError(f"unknown method {method!r}")


def stage_reconstruct(cfg, out, method):
    P = _paths(out)
    counts, backgrounds, factors, model = _load_frames(cfg, out)
    truth = _load_truth(cfg, out)
    K = _kernel_for(method, cfg, out)
    results = reconstruct_frames(cfg, counts, backgrounds, factors, model, K, truth)
    d = _mk(P["recon"] / method)
    for m, (alpha, x, trace) in enumerate(results):
        io.write_raster(d / _frame_name("frame", m), x, cfg.phantom.pixel_size_mm)
        io.write_raster(d / _frame_name("alpha", m), alpha, cfg.phantom.pixel_size_mm)
        trace.write_csv(d / f"trace_{m + 1:02d}.csv")
    return results


def stage_metrics(cfg, out):
    """SNR per frame and method, recomputed from the image files."""
    P = _paths(out)
    truth = _load_truth(cfg, out)
    if truth is None:
        raise StageError("metrics", "no ground truth images found; run simulate first")
    rows, series = [], []
    report = {}
    for method in METHODS:
        d = P["recon"] / method
        if not d.exists():
            continue
        vals = []
        for m in range(len(truth)):
            x = io.read_raster(d / _frame_name("frame", m))
            v = snr_db(x, truth[m])
            vals.append(v)
            rows.append([m + 1, method, repr(v)])
            for r in _read_rows(d / f"trace_{m + 1:02d}.csv"):
                series.append([method, m + 1, r["iteration"], r["snr_db"]])
        report[method] = vals
    _mk(P["metrics"])
    _write_rows(P["metrics"] / "snr.csv", ["frame", "method", "snr_db"], rows)
    _write_rows(P["metrics"] / "snr_vs_iteration.csv", ["method", "frame", "iteration", "snr_db"], series)
    _write_rows(P["metrics"] / "summary.csv", ["method", "mean_snr_db"],
                [[mth, repr(float(np.mean(v)))] for mth, v in report.items()])
    return report


def export_attention(K: SparseKernelMatrix, pixels: dict, overlay, out_dir, prefix: str):
    """Raster, PGM and overlay PPM for each requested pixel. Returns the maps."""
    out_dir = _mk(Path(out_dir))
    maps = {}
    for label, j in pixels.items():
        amap = attention_map(K, j)
        maps[label] = amap
        io.write_raster(out_dir / f"{prefix}_{label}.dkr", amap)
        io.write_pgm16(out_dir / f"{prefix}_{label}.pgm", amap)
        io.write_ppm(out_dir / f"{prefix}_{label}_overlay.ppm", io.overlay_rgb(amap, overlay))
    return maps


def stage_attention(cfg, out):
    P = _paths(out)
    region_map, report = make_phantom(cfg.phantom.width, cfg.phantom.height, cfg.phantom.pixel_size_mm)
    regions = [r.strip() for r in cfg.run.attention_regions.split(",") if r.strip()]
    pixels = attention_pixels(region_map, report, regions)
    priors = _load_priors(cfg, out)
    structural = np.mean(priors, axis=0)
    rows = []
    for method in METHODS:
        try:
            K = _kernel_for(method, cfg, out)
        except FileNotFoundError:
            continue
        export_attention(K, pixels, structural, P["attention"], method)
        for label, j in pixels.items():
            rows.append([method, label, j, repr(region_attention_mass(K, j, region_map.mask(label)))])
    _write_rows(P["attention"] / "region_mass.csv", ["method", "region", "pixel", "mass_in_region"], rows)
    return rows


def run_all(cfg, out, seed=None):
    methods = cfg.run.method_list()
    os.makedirs(out, exist_ok=True)
    stages = [
        ("simulate", lambda: stage_simulate(cfg, out, seed)),
        ("rebin", lambda: stage_rebin(cfg, out)),
        ("build-kernel", lambda: stage_build_kernel(cfg, out)),
    ]
    if "deep-kem" in methods:
        stages.append(("train-kernel", lambda: stage_train_kernel(cfg, out, seed)))
    for method in methods:
        stages.append((f"reconstruct:{method}", lambda method=method: stage_reconstruct(cfg, out, method)))
    stages.append(("metrics", lambda: stage_metrics(cfg, out)))
    stages.append(("attention", lambda: stage_attention(cfg, out)))
    result = None
    for name, fn in stages:
        log.info("stage %s", name)
        try:
            result = fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    return result
