"""
config: Run configuration, seed derivation and stage hashing.

Purpose: One RunConfig drives every command; every random choice traces back to the
single top-level seed.

Behavior:
- Defaults < TOML file (--config) < environment < command-line flags
- Environment: WEALTH_XAI_OUT (output root), WEALTH_XAI_JOBS, WEALTH_XAI_SEED
- Unknown sections or keys in the TOML file are usage errors naming the key
- derive_seed(root, name): first 8 bytes of SHA-256("{root}:{name}"), big-endian,
  masked to 63 bits
- stage_hash: SHA-256 over the canonical JSON of the config sections a stage reads plus
  its upstream stage hashes; the first 12 hex digits name OUT/<stage>/<hash>/
"""
from __future__ import annotations

import hashlib
import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .errors import DataError, UsageError
from .head import DEFAULT_FOLDS, DEFAULT_LAMBDA_GRID
from .model import DEFAULT_CHANNELS, DEFAULT_FEATURE_DIM
from .perturb import K_CANDIDATES, SAMPLE_PER_IMAGE, SHUFFLE_GRID
from .synthgen import DEFAULT_PHASES, ParamDistribution
from .train import TrainSchedule

ENV_OUT = "WEALTH_XAI_OUT"
ENV_JOBS = "WEALTH_XAI_JOBS"
ENV_SEED = "WEALTH_XAI_SEED"
HASH_LENGTH = 12
SEED_MASK = (1 << 63) - 1


@dataclass(frozen=True)
class PathsConfig:
    out: str = "out"
    corpus_dir: str | None = None
    ratings: str | None = None


@dataclass(frozen=True)
class CorpusConfig:
    n_sites: int = 2000
    building_count: tuple[int, int] = (0, 240)
    road_count: tuple[int, int] = (0, 6)
    vegetation_fraction: tuple[float, float] = (0.1, 0.9)
    displacement_px: int = 112
    settlement_spread_px: float = 120.0
    phases: tuple[str, ...] = DEFAULT_PHASES

    def distribution(self) -> ParamDistribution:
        return ParamDistribution(
            building_count=self.building_count,
            road_count=self.road_count,
            vegetation_fraction=self.vegetation_fraction,
            displacement_px=self.displacement_px,
            settlement_spread_px=self.settlement_spread_px,
            phases=self.phases,
        )


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = DEFAULT_FEATURE_DIM
    channels: tuple[int, ...] = DEFAULT_CHANNELS


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 20
    stage2_epochs: int = 20
    stage1_lr: float = 0.01
    stage2_lr: float = 0.001
    l2: float = 0.1
    batch_size: int = 100
    epsilon: float = 1e-8
    val_fraction: float = 0.1
    dark_fraction: float = 0.58
    noise_floor: float = 0.5

    def schedule(self, seed: int) -> TrainSchedule:
        return TrainSchedule(
            stage1_epochs=self.stage1_epochs,
            stage2_epochs=self.stage2_epochs,
            stage1_lr=self.stage1_lr,
            stage2_lr=self.stage2_lr,
            l2=self.l2,
            batch_size=self.batch_size,
            epsilon=self.epsilon,
            val_fraction=self.val_fraction,
            dark_fraction=self.dark_fraction,
            seed=seed,
        )


@dataclass(frozen=True)
class HeadConfig:
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    folds: int = DEFAULT_FOLDS
    test_fraction: float = 0.2
    repeats: int = 5


@dataclass(frozen=True)
class SweepsConfig:
    modes: tuple[str, ...] = ("1x1", "3x3")
    eval_sites: int = 0
    shuffle_grid: tuple[int, ...] = SHUFFLE_GRID
    shuffle_repetitions: int = 5
    filter_sigmas: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0, 24.0, 32.0)
    filter_kinds: tuple[str, ...] = ("low", "high", "band")
    color_k_candidates: tuple[int, ...] = K_CANDIDATES
    color_sample_per_image: int = SAMPLE_PER_IMAGE
    color_fit_sites: int = 200
    color_use_lightness: bool = False
    color_bootstrap: int = 200


@dataclass(frozen=True)
class AttributionConfig:
    mode: str = "1x1"
    occlusion_patch_px: int = 16
    occlusion_stride_px: int = 8
    occlusion_fill: tuple[float, float, float] = (0.5, 0.5, 0.5)
    correlation_sites: int = 200


@dataclass(frozen=True)
class FeatvizConfig:
    unit: str = "output"
    seeds: int = 3
    steps: int = 512
    step_size: float = 1e-2
    jitter_px: int = 2
    smoothness_weight: float = 1e-3

    def unit_value(self) -> str | int:
        return self.unit if self.unit == "output" else int(self.unit)


SECTIONS = {
    "paths": PathsConfig,
    "corpus": CorpusConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "head": HeadConfig,
    "sweeps": SweepsConfig,
    "attribution": AttributionConfig,
    "featviz": FeatvizConfig,
}


@dataclass(frozen=True)
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    sweeps: SweepsConfig = field(default_factory=SweepsConfig)
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    featviz: FeatvizConfig = field(default_factory=FeatvizConfig)
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if not 0 <= self.seed <= 2**64 - 1:
            raise UsageError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.jobs < 1:
            raise UsageError(f"jobs must be >= 1, got {self.jobs}")

    @property
    def out(self) -> Path:
        return Path(self.paths.out)

    def seed_for(self, name: str) -> int:
        return derive_seed(self.seed, name)

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(section_cls, raw: dict, where: str):
    known = {f.name: f for f in fields(section_cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise UsageError(f"unknown config key {where}.{key}; valid keys: {', '.join(sorted(known))}")
        kwargs[key] = tuple(value) if isinstance(value, list) else value
    try:
        return section_cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid [{where}] section: {e}") from e


def from_mapping(data: dict[str, Any]) -> RunConfig:
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise UsageError(f"config entry {key!r} must be a table")
            kwargs[key] = _coerce(SECTIONS[key], value, key)
        elif key in ("seed", "jobs"):
            if not isinstance(value, int) or isinstance(value, bool):
                raise UsageError(f"config key {key!r} must be an integer")
            kwargs[key] = value
        else:
            raise UsageError(f"unknown config key {key!r}; valid keys: {', '.join([*SECTIONS, 'seed', 'jobs'])}")
    return RunConfig(**kwargs)


def load_toml(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise UsageError(f"cannot parse config {path}: {e}") from e
    return from_mapping(data)


def _env_int(name: str, environ) -> int | None:
    raw = environ.get(name, "").strip()
    if not raw:
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{name} must be an integer, got {raw!r}") from None


def load_config(
    path: str | Path | None = None,
    out: str | None = None,
    seed: int | None = None,
    jobs: int | None = None,
    environ=None,
) -> RunConfig:
    """Resolve the effective configuration in precedence order."""
    environ = os.environ if environ is None else environ
    cfg = load_toml(path) if path else RunConfig()

    env_out = environ.get(ENV_OUT, "").strip()
    if env_out:
        cfg = replace(cfg, paths=replace(cfg.paths, out=env_out))
    env_seed, env_jobs = _env_int(ENV_SEED, environ), _env_int(ENV_JOBS, environ)
    if env_seed is not None:
        cfg = replace(cfg, seed=env_seed)
    if env_jobs is not None:
        cfg = replace(cfg, jobs=env_jobs)

    if out is not None:
        cfg = replace(cfg, paths=replace(cfg.paths, out=out))
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if jobs is not None:
        cfg = replace(cfg, jobs=jobs)
    return cfg


def validate_paths(cfg: RunConfig, need_corpus: bool = True) -> None:
    try:
        cfg.out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {cfg.out}: {e}") from e
    if need_corpus and cfg.paths.corpus_dir and not Path(cfg.paths.corpus_dir).is_dir():
        raise DataError(f"corpus directory does not exist: {cfg.paths.corpus_dir}")
    if cfg.paths.ratings and not Path(cfg.paths.ratings).is_file():
        raise DataError(f"ratings file does not exist: {cfg.paths.ratings}")


def derive_seed(root: int, name: str) -> int:
    digest = hashlib.sha256(f"{root}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & SEED_MASK


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def stage_hash(cfg: RunConfig, stage: str, sections: tuple[str, ...] = (), upstream: tuple[str, ...] = (), extra: Any = None) -> str:
    """Content hash of everything a stage's output depends on."""
    payload = {
        "stage": stage,
        "seed": cfg.seed,
        "sections": {name: asdict(getattr(cfg, name)) for name in sections},
        "upstream": list(upstream),
        "extra": extra,
    }
    return hashlib.sha256(canonical_json(payload).encode()).hexdigest()[:HASH_LENGTH]
