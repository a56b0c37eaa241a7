"""Experiment configuration: flat ``section.key = value`` text files."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .phantom import DEFAULT_SCHEDULE_BLOCKS, SCAN_END_S, FrameSchedule, TimeActivityModel


class ConfigError(ValueError):
    pass


@dataclass
class PhantomConfig:
    width: int = 96
    height: int = 96
    pixel_size_mm: float = 2.0


@dataclass
class TacConfig:
    blood_a1: float = 70.0
    blood_tau1: float = 45.0
    blood_a2: float = 12.0
    blood_tau2: float = 3000.0
    blood_tau_rise: float = 14.0
    gray_matter_a: float = 25.0
    gray_matter_tau: float = 600.0
    white_matter_a: float = 8.0
    white_matter_tau: float = 900.0
    tumor_a: float = 40.0
    tumor_tau: float = 1200.0

    def model(self) -> TimeActivityModel:
        return TimeActivityModel(
            blood={"a1": self.blood_a1, "tau1": self.blood_tau1, "a2": self.blood_a2,
                   "tau2": self.blood_tau2, "tau_rise": self.blood_tau_rise},
            tissue={name: {"a": getattr(self, f"{name}_a"), "tau": getattr(self, f"{name}_tau")}
                    for name in ("gray_matter", "white_matter", "tumor")},
        )


@dataclass
class ScannerConfig:
    n_angles: int = 180
    n_bins: int = 0  # 0: 1.5 x width, parity-matched
    attenuation_mu_per_mm: float = 0.0  # 0 disables attenuation


@dataclass
class ScanConfig:
    schedule: str = ",".join(f"{n}x{d}" for n, d in DEFAULT_SCHEDULE_BLOCKS)
    total_counts: float = 8e6
    background_fraction: float = 0.2

    def frame_schedule(self) -> FrameSchedule:
        blocks = []
        for tok in self.schedule.split(","):
            n, _, d = tok.strip().partition("x")
            blocks.append((int(n), float(d)))
        return FrameSchedule.from_blocks(blocks)


@dataclass
class CompositeConfig:
    windows: str = "0-1200,1200-2400,2400-3600"

    def window_list(self):
        out = []
        for tok in self.windows.split(","):
            a, _, b = tok.strip().partition("-")
            out.append((float(a), float(b)))
        return out


@dataclass
class KernelConfig:
    k: int = 50
    sigma: float = 1.0
    window: int = 21
    standardize: bool = True


@dataclass
class TrainingConfig:
    d: float = 10.0
    learning_rate: float = 1e-2
    iterations: int = 500
    optimizer: str = "adam"
    hidden: int = 8
    corrupted_recon: str = "mlem"  # or "kem"
    rebuild_graph: bool = False


@dataclass
class ReconConfig:
    iterations: int = 60
    epsilon: float = 1e-12
    record_every: int = 1
    prior_iterations: int = 60


@dataclass
class RunConfig:
    seed: int = 0
    methods: str = "mlem,kem,deep-kem"
    out: str = "results"
    attention_regions: str = "tumor,gray_matter"

    def method_list(self):
        return [m.strip() for m in self.methods.split(",") if m.strip()]


@dataclass
class ExperimentConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    tac: TacConfig = field(default_factory=TacConfig)
    scanner: ScannerConfig = field(default_factory=ScannerConfig)
    scan: ScanConfig = field(default_factory=ScanConfig)
    composite: CompositeConfig = field(default_factory=CompositeConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    recon: ReconConfig = field(default_factory=ReconConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> "ExperimentConfig":
        p, k, t, r, s = self.phantom, self.kernel, self.training, self.recon, self.scan
        checks = [
            (p.width >= 32 and p.height >= 32, "phantom dimensions must be >= 32"),
            (p.pixel_size_mm > 0, "phantom.pixel_size_mm must be positive"),
            (self.scanner.n_angles >= 1, "scanner.n_angles must be >= 1"),
            (self.scanner.n_bins >= 0, "scanner.n_bins must be >= 0"),
            (self.scanner.attenuation_mu_per_mm >= 0, "scanner.attenuation_mu_per_mm must be >= 0"),
            (s.total_counts > 0, "scan.total_counts must be positive"),
            (0 <= s.background_fraction < 1, "scan.background_fraction must lie in [0, 1)"),
            (1 <= k.k <= k.window**2, "kernel.k must lie in [1, window^2]"),
            (k.window <= min(p.width, p.height), "kernel.window exceeds the image"),
            (k.sigma > 0, "kernel.sigma must be positive"),
            (t.d > 1, "training.d must be > 1"),
            (t.learning_rate >= 0, "training.learning_rate must be >= 0"),
            (t.iterations >= 1, "training.iterations must be >= 1"),
            (t.optimizer in ("adam", "gd"), "training.optimizer must be adam or gd"),
            (t.corrupted_recon in ("mlem", "kem"), "training.corrupted_recon must be mlem or kem"),
            (t.hidden >= 1, "training.hidden must be >= 1"),
            (r.iterations >= 1 and r.prior_iterations >= 1, "recon iterations must be >= 1"),
            (r.epsilon > 0, "recon.epsilon must be positive"),
            (r.record_every >= 1, "recon.record_every must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        bad = set(self.run.method_list()) - {"mlem", "kem", "deep-kem"}
        if bad:
            raise ConfigError(f"unknown methods {sorted(bad)}")
        try:
            sched = s.frame_schedule()
            self.tac.model()
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        if sched.end > SCAN_END_S:
            raise ConfigError("schedule extends past the one-hour scan")
        from .recon import composite_members

        try:
            composite_members(sched, self.composite.window_list())
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _coerce(raw: str, typ):
    if typ is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ is int:
        num = float(raw)
        if not num.is_integer():
            raise ValueError(f"not an integer: {raw!r}")
        return int(num)
    return typ(raw)


def _types(dc):
    return {f.name: type(getattr(dc, f.name)) for f in dataclasses.fields(dc)}


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        section, dot, name = key.strip().partition(".")
        if not dot or not hasattr(cfg, section):
            raise ConfigError(f"line {lineno}: unknown section in {key.strip()!r}")
        sub = getattr(cfg, section)
        types = _types(sub)
        if name not in types:
            raise ConfigError(f"line {lineno}: unknown key {key.strip()!r}")
        try:
            setattr(sub, name, _coerce(value.strip(), types[name]))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        sub = getattr(cfg, f.name)
        for g in dataclasses.fields(sub):
            v = getattr(sub, g.name)
            if isinstance(v, bool):
                v = str(v).lower()
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}.{g.name} = {v}")
    return "\n".join(lines) + "\n"
