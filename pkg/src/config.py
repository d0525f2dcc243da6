"""YAML run configuration parsed into frozen dataclasses.

Unknown keys and invalid values raise ``ConfigError`` naming the dotted
field. The environment variable ``SEED`` overrides the top-level seed.
"""
from __future__ import annotations
import dataclasses, logging, os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .ctm_distill import DistillConfig
from .diffusion import Schedule
from .errors import ArgumentError, ConfigError
from .guidance import METHODS, TARGET_SHAPES, GuidanceConfig, default_window
from .sampler import SamplerConfig
from .teacher import TeacherTrainConfig

logger = logging.getLogger(__name__)

DATA_KINDS = ("blobs", "signal", "explicit")


@dataclass(frozen=True)
class DataConfig:
    kind: str = "blobs"
    dim: int = 2
    num_labels: int = 4
    components: int = 3
    comp_std: float = 0.12
    noise_std: float = 0.05
    standardize: bool = True
    mixture: Optional[List[Dict[str, Any]]] = None

    def __post_init__(self):
        if self.kind not in DATA_KINDS:
            raise ConfigError("data.kind", f"must be one of {DATA_KINDS}")
        if self.kind == "explicit" and not self.mixture:
            raise ConfigError("data.mixture", "required when kind = explicit")
        if self.dim < 1 or self.num_labels < 1 or self.components < 1:
            raise ConfigError("data.dim", "dim, num_labels and components must be >= 1")


@dataclass(frozen=True)
class TeacherSection:
    kind: str = "neural"
    hidden: Tuple[int, ...] = (64, 64)
    embed_dim: int = 32
    iterations: int = 4000
    batch_size: int = 512
    lr: float = 2.0e-3
    p_uncond: float = 0.1

    def __post_init__(self):
        if self.kind not in ("neural", "analytic"):
            raise ConfigError("teacher.kind", "must be 'neural' or 'analytic'")

    def train_config(self) -> TeacherTrainConfig:
        return TeacherTrainConfig(
            hidden=self.hidden, embed_dim=self.embed_dim, iterations=self.iterations,
            batch_size=self.batch_size, lr=self.lr, p_uncond=self.p_uncond,
        )


@dataclass(frozen=True)
class StudentSection:
    hidden: Tuple[int, ...] = (128, 128)
    embed_dim: int = 32
    omega_seed: int = 0


@dataclass(frozen=True)
class DistillSection:
    grid_size: int = 40
    ema_rate: float = 0.999
    omega_min: float = 2.0
    omega_max: float = 5.0
    p_uncond: float = 0.1
    lr: float = 8.0e-5
    max_ode_steps: int = 39
    distance: str = "teacher_feature"
    lambda_mode: str = "adaptive"
    lambda_value: float = 1.0
    dsm_weighting: str = "none"
    batch_size: int = 128
    iterations: int = 20000


@dataclass(frozen=True)
class SamplerSection:
    steps: int = 1
    gamma: float = 0.0
    nu: float = 1.0
    omega: float = 3.0
    label: int = 0
    num_samples: int = 64


@dataclass(frozen=True)
class EvalSection:
    num_samples: int = 2000
    num_reference: int = 2000
    steps_list: Tuple[int, ...] = (1, 2, 4, 8, 16)
    settings: Tuple[Tuple[float, float], ...] = ((3.0, 1.0),)
    teacher_steps: int = 18
    preservation_samples: int = 256
    preservation_steps: Tuple[int, int] = (1, 16)
    gammas: Tuple[float, ...] = (0.0, 0.2, 0.5, 1.0)


@dataclass(frozen=True)
class GuidanceSection:
    shapes: Tuple[str, ...] = TARGET_SHAPES
    methods: Tuple[str, ...] = METHODS
    chains: int = 50
    window: int = 0
    db_low: float = -12.0
    db_high: float = 0.0
    rho_mode: str = "normalized"
    rho: float = 0.5
    iterations: int = 70
    zt_lr: float = 1.0
    steps: int = 16
    gamma: float = 0.0
    nu: float = 1.0
    omega: float = 3.0
    label: int = 0

    def __post_init__(self):
        for s in self.shapes:
            if s not in TARGET_SHAPES:
                raise ConfigError("guidance.shapes", f"unknown shape '{s}'")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError("guidance.methods", f"unknown method '{m}'")
        if self.window < 0 or (self.window and self.window % 2 == 0):
            raise ConfigError("guidance.window", "must be 0 (auto) or an odd positive int")
        if self.iterations < 0:
            raise ConfigError("guidance.iterations", "must be >= 0")
        if self.zt_lr <= 0:
            raise ConfigError("guidance.zt_lr", "must be positive")


@dataclass(frozen=True)
class AblationSection:
    distances: Tuple[str, ...] = ("l2_zero_time", "l2_s_time", "teacher_feature")
    iterations: int = 0
    num_samples: int = 1000


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "results"
    data: DataConfig = field(default_factory=DataConfig)
    schedule: Schedule = field(default_factory=Schedule)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    student: StudentSection = field(default_factory=StudentSection)
    distill: DistillSection = field(default_factory=DistillSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    eval: EvalSection = field(default_factory=EvalSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def distill_config(self, **overrides) -> DistillConfig:
        kw = asdict(self.distill)
        kw.update(hidden=self.student.hidden, embed_dim=self.student.embed_dim, omega_seed=self.student.omega_seed)
        kw.update(overrides)
        return DistillConfig(**kw)

    def sampler_config(self, **overrides) -> SamplerConfig:
        kw = dict(asdict(self.sampler), seed=self.seed)
        kw.update(overrides)
        try:
            return SamplerConfig(**kw)
        except ArgumentError as exc:
            raise ConfigError("sampler", str(exc)) from exc

    def guidance_config(self, dim: int) -> Tuple[GuidanceConfig, int]:
        g = self.guidance
        scfg = SamplerConfig(steps=g.steps, gamma=g.gamma, nu=g.nu, omega=g.omega, label=g.label,
                             seed=self.seed, num_samples=g.chains)
        window = g.window or default_window(dim)
        if window > dim:
            raise ConfigError("guidance.window", f"{window} exceeds data.dim = {dim}")
        return GuidanceConfig(sampler=scfg, rho_mode=g.rho_mode, rho=g.rho, iterations=g.iterations, zt_lr=g.zt_lr), window


SECTIONS = {
    "data": DataConfig,
    "schedule": Schedule,
    "teacher": TeacherSection,
    "student": StudentSection,
    "distill": DistillSection,
    "sampler": SamplerSection,
    "eval": EvalSection,
    "guidance": GuidanceSection,
    "ablation": AblationSection,
}


def _coerce(value: Any, default: Any, name: str) -> Any:
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError(f"expected a bool, got {value!r}")
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or int(value) != value:
                raise TypeError(f"expected an int, got {value!r}")
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError(f"expected a number, got {value!r}")
            return float(value)
        if isinstance(default, str):
            return str(value)
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise TypeError(f"expected a list, got {value!r}")
            return tuple(tuple(v) if isinstance(v, (list, tuple)) else v for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from exc
    return value


def _section(cls, raw: Any, name: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(name, "must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}", "unknown key")
    defaults = cls()
    kw = {k: _coerce(v, getattr(defaults, k), f"{name}.{k}") for k, v in raw.items()}
    try:
        return cls(**kw)
    except ArgumentError as exc:
        raise ConfigError(name, str(exc)) from exc


def parse_config(raw: Dict[str, Any], seed_override: Optional[str] = None) -> RunConfig:
    raw = dict(raw or {})
    unknown = sorted(set(raw) - set(SECTIONS) - {"seed", "output_dir"})
    if unknown:
        raise ConfigError(unknown[0], "unknown section")
    seed = _coerce(raw.get("seed", 0), 0, "seed")
    if seed_override not in (None, ""):
        try:
            seed = int(seed_override)
        except ValueError as exc:
            raise ConfigError("SEED", f"not an integer: {seed_override!r}") from exc
        logger.info("seed overridden from environment: %d", seed)
    sections = {name: _section(cls, raw.get(name), name) for name, cls in SECTIONS.items()}
    cfg = RunConfig(seed=seed, output_dir=str(raw.get("output_dir", "results")), **sections)
    cfg.distill_config()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("--config", f"file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError("--config", f"invalid YAML ({exc})") from exc
    return parse_config(raw, os.environ.get("SEED"))


__all__ = [
    "DataConfig",
    "TeacherSection",
    "StudentSection",
    "DistillSection",
    "SamplerSection",
    "EvalSection",
    "GuidanceSection",
    "AblationSection",
    "RunConfig",
    "parse_config",
    "load_config",
]
