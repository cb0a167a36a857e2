"""Experiment configuration: a flat ``section.key = value`` text format."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .difftopk import PerturbConfig
from .encoder import EncoderConfig
from .proxysim import ProxyConfig
from .renderer import ViewPose
from .voxcore import FAMILIES, DatasetSpec, DegradationParams


@dataclass(frozen=True)
class TopKSection:
    sigma: float = 0.05
    n_samples: int = 1000
    soft_sigma: float = 0.005
    k: int = 5
    seed: int = 0


@dataclass(frozen=True)
class TrainSection:
    batch_size: int = 64
    lr: float = 3e-4
    epochs: int = 50
    loss: str = "topk"
    mode: str = "seen"
    holdout_families: tuple = ("shelf", "ring", "cross")
    test_scans_per_prototype: int = 2
    margin: float = 0.2
    calibration_size: int = 64

    def __post_init__(self):
        if self.loss not in ("topk", "triplet", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.mode not in ("seen", "unseen"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    proxy: ProxyConfig = field(default_factory=ProxyConfig)
    topk: TopKSection = field(default_factory=TopKSection)
    train: TrainSection = field(default_factory=TrainSection)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    seed: int = 0

    def perturb(self) -> PerturbConfig:
        return PerturbConfig(sigma=self.topk.sigma, n_samples=self.topk.n_samples, seed=self.topk.seed)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in flatten(self))

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_text().encode()).digest()

    def hexdigest(self) -> str:
        return self.digest().hex()

    def dataset_digest(self) -> str:
        lines = [f"{k} = {v}" for k, v in flatten(self) if k.startswith(("dataset.", "degradation."))]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], ViewPose):
            return ",".join(f"{v.azimuth_deg:g}:{v.elevation_deg:g}" for v in value)
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def flatten(cfg: ExperimentConfig) -> list:
    out = []
    d = cfg.dataset
    for name in ("n_families", "n_prototypes_per_family", "n_scans_per_prototype", "seed"):
        out.append((f"dataset.{name}", _fmt(getattr(d, name))))
    for f in fields(DegradationParams):
        out.append((f"degradation.{f.name}", _fmt(getattr(d.degradation, f.name))))
    for section in ("proxy", "topk", "train", "encoder"):
        obj = getattr(cfg, section)
        for f in fields(obj):
            out.append((f"{section}.{f.name}", _fmt(getattr(obj, f.name))))
    out.append(("seed", _fmt(cfg.seed)))
    return out


def _coerce(template, raw: str, key: str):
    raw = raw.strip()
    if isinstance(template, bool):
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"{key}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if key == "proxy.views":
            return tuple(ViewPose(*map(float, p.split(":"))) for p in parts)
        if template and isinstance(template[0], int):
            return tuple(int(p) for p in parts)
        return tuple(parts)
    return raw


def parse_config(text: str, base: ExperimentConfig = ExperimentConfig()) -> ExperimentConfig:
    """Apply ``key = value`` lines (``#`` comments allowed) on top of ``base``."""
    sections = {s: {} for s in ("dataset", "degradation", "proxy", "topk", "train", "encoder", "")}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        section, _, name = key.rpartition(".")
        if section not in sections:
            raise ValueError(f"line {lineno}: unknown section {section!r}")
        sections[section][name] = (key, value)

    def apply(obj, updates):
        known = {f.name: getattr(obj, f.name) for f in fields(obj)}
        changes = {}
        for name, (key, value) in updates.items():
            if name not in known or name == "degradation":
                raise ValueError(f"unknown config key {key!r}")
            changes[name] = _coerce(known[name], value, key)
        return replace(obj, **changes) if changes else obj

    degradation = apply(base.dataset.degradation, sections["degradation"])
    dataset = apply(replace(base.dataset, degradation=degradation), sections["dataset"])
    top = {}
    for name, (key, value) in sections[""].items():
        if name != "seed":
            raise ValueError(f"unknown config key {key!r}")
        top["seed"] = int(value)
    cfg = replace(
        base,
        dataset=dataset,
        proxy=apply(base.proxy, sections["proxy"]),
        topk=apply(base.topk, sections["topk"]),
        train=apply(base.train, sections["train"]),
        encoder=apply(base.encoder, sections["encoder"]),
        **top,
    )
    for fam in cfg.train.holdout_families:
        if fam not in FAMILIES:
            raise ValueError(f"unknown family {fam!r} in train.holdout_families")
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
