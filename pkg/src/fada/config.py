"""Run configuration: dataclasses loaded from a single JSON document."""

from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


PAPER_SCALE_NAMES = {
    "digit-five", "digit_five", "digitfive", "mnist", "mnist-m", "mnistm", "svhn", "usps", "synth", "syn",
    "office-caltech10", "office_caltech10", "office-caltech", "office31", "amazon", "caltech", "dslr", "webcam",
    "domainnet", "clipart", "infograph", "painting", "quickdraw", "real", "sketch",
    "amazon-review", "amazon_review", "books", "dvd", "dvds", "electronics", "kitchen",
}

ABLATION_PRESETS = {
    "source_only": (False, False, False),
    "I": (True, False, False),
    "II": (True, True, False),
    "III": (True, True, True),
}
ABLATION_PRESETS.update({f"model_{k}": v for k, v in list(ABLATION_PRESETS.items()) if k != "source_only"})


@dataclass
class DomainSpec:
    kind: str = "moons"
    n: int = 2000
    rotation_deg: float = 0.0
    noise_sigma: float = 0.1
    num_classes: int = 2
    shift: list[float] = field(default_factory=lambda: [0.0, 0.0])
    cov_scale: float = 1.0
    path: str | None = None
    shuffle_labels: bool = False
    id: str | None = None


def _default_sources() -> list[DomainSpec]:
    return [DomainSpec(rotation_deg=r) for r in (0.0, 15.0, 30.0, 45.0)]


@dataclass
class DomainsConfig:
    sources: list[DomainSpec] = field(default_factory=_default_sources)
    target: DomainSpec = field(default_factory=lambda: DomainSpec(rotation_deg=60.0))
    eval_fraction: float = 0.2


@dataclass
class ModelConfig:
    family: str = "sentiment"
    width_scale: float | None = None
    image_size: int = 32


@dataclass
class LossWeights:
    task: float = 1.0
    adv: float = 1.0
    ent: float = 0.1
    mi: float = 0.01
    rec: float = 0.1


@dataclass
class LearningRates:
    source: float = 0.01
    target: float = 0.01
    di: float = 0.01
    mine: float = 0.01
    momentum: float = 0.9


@dataclass
class AblationFlags:
    attention: bool = True
    adversarial: bool = True
    disentangle: bool = True


@dataclass
class AttentionConfig:
    floor: float | None = None
    k: int | None = None
    probe_size: int = 256
    restarts: int = 3
    force_mask: list[float] | None = None


@dataclass
class RunConfig:
    seed: int = 0
    domains: DomainsConfig = field(default_factory=DomainsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    lr: LearningRates = field(default_factory=LearningRates)
    rounds: int = 200
    batch_size: int = 64
    local_steps: int = 1
    pretrain_epochs: int = 5
    ablation: AblationFlags = field(default_factory=AblationFlags)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    bound: bool = False
    delta: float = 0.05
    out_dir: str = "out"

    def with_ablation(self, preset: str) -> "RunConfig":
        if preset not in ABLATION_PRESETS:
            raise ConfigError([f"ablation: unknown preset {preset!r}; expected one of {sorted(ABLATION_PRESETS)}"])
        a, b, c = ABLATION_PRESETS[preset]
        return dataclasses.replace(self, ablation=AblationFlags(a, b, c))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class BoundConfig:
    """Finite-class bound evaluation, a sweep, or a trained run directory."""
    seed: int = 0
    N: int = 3
    m: int = 50
    delta: float = 0.05
    sweep: str | None = None
    instances: int = 500
    max_sources: int = 5
    run_dir: str | None = None


# ------------------------------------------------------------------- parsing


def _build(cls, data, path: str, problems: list[str]):
    if not isinstance(data, dict):
        problems.append(f"{path or '<root>'}: expected an object")
        return cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            problems.append(f"{path + '.' if path else ''}{key}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        kwargs[f.name] = _coerce(hints[f.name], data[f.name], f"{path + '.' if path else ''}{f.name}", problems)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        problems.append(f"{path or '<root>'}: {exc}")
        return cls()


def _coerce(tp, value, path, problems):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path, problems)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path, problems)
    if origin is list:
        if not isinstance(value, list):
            problems.append(f"{path}: expected a list")
            return []
        return [_coerce(args[0], v, f"{path}[{i}]", problems) for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            problems.append(f"{path}: expected true/false")
        return bool(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{path}: expected an integer")
            return 0
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{path}: expected a number")
            return 0.0
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            problems.append(f"{path}: expected a string")
            return ""
        return value
    return value


def validate(cfg: RunConfig) -> list[str]:
    p = []
    srcs = cfg.domains.sources
    if not srcs:
        p.append("domains.sources: need at least one source domain")
    for name, spec in [(f"domains.sources[{i}]", s) for i, s in enumerate(srcs)] + [("domains.target", cfg.domains.target)]:
        for label in (spec.kind, spec.id or ""):
            if label.lower() in PAPER_SCALE_NAMES:
                p.append(f"{name}: paper-scale dataset {label!r} is not supported; "
                         "use the desk-scale generators 'moons' or 'gaussians', or 'csv' feature files")
        if spec.kind not in ("moons", "gaussians", "csv") and spec.kind.lower() not in PAPER_SCALE_NAMES:
            p.append(f"{name}.kind: unknown kind {spec.kind!r}; expected moons, gaussians or csv")
        if spec.kind == "csv" and not spec.path:
            p.append(f"{name}.path: required for csv domains")
        if spec.kind == "moons" and spec.n % 2:
            p.append(f"{name}.n: moons need an even sample count")
        if spec.n < 4:
            p.append(f"{name}.n: too few samples")
    if not 0.0 < cfg.domains.eval_fraction < 1.0:
        p.append("domains.eval_fraction: must lie in (0, 1)")
    if cfg.model.family not in ("digit", "sentiment", "image"):
        p.append(f"model.family: unknown family {cfg.model.family!r}")
    if cfg.model.width_scale is not None and cfg.model.width_scale <= 0:
        p.append("model.width_scale: must be positive")
    for f in dataclasses.fields(cfg.lr):
        if getattr(cfg.lr, f.name) < 0:
            p.append(f"lr.{f.name}: must be non-negative")
    if not 0.0 <= cfg.lr.momentum < 1.0:
        p.append("lr.momentum: must lie in [0, 1)")
    if cfg.rounds < 0:
        p.append("rounds: must be non-negative")
    if cfg.batch_size < 2:
        p.append("batch_size: must be at least 2 (batch norm)")
    if cfg.local_steps < 1:
        p.append("local_steps: must be at least 1")
    if cfg.pretrain_epochs < 0:
        p.append("pretrain_epochs: must be non-negative")
    a = cfg.ablation
    if a.disentangle and not a.adversarial:
        p.append("ablation.disentangle: requires ablation.adversarial")
    if a.adversarial and not a.attention:
        p.append("ablation.adversarial: requires ablation.attention")
    n = len(srcs)
    att = cfg.attention
    if att.floor is not None and not 0.0 <= att.floor * max(n, 1) <= 1.0:
        p.append("attention.floor: must satisfy 0 <= floor * N <= 1")
    if att.k is not None and att.k < 1:
        p.append("attention.k: must be positive")
    if att.probe_size < 2:
        p.append("attention.probe_size: must be at least 2")
    if att.restarts < 1:
        p.append("attention.restarts: must be at least 1")
    if att.force_mask is not None:
        if len(att.force_mask) != n:
            p.append(f"attention.force_mask: need {n} weights")
        elif any(w < 0 for w in att.force_mask) or abs(sum(att.force_mask) - 1.0) > 1e-9:
            p.append("attention.force_mask: weights must be non-negative and sum to 1")
    if not 0.0 < cfg.delta < 1.0:
        p.append("delta: must lie in (0, 1)")
    return p


def validate_bound(cfg: BoundConfig) -> list[str]:
    p = []
    if cfg.N < 1:
        p.append("N: need at least one source")
    if cfg.m < 1:
        p.append("m: need at least one sample per source")
    if not 0.0 < cfg.delta < 1.0:
        p.append("delta: must lie in (0, 1)")
    if cfg.sweep not in (None, "validity", "mixture"):
        p.append(f"sweep: expected 'validity' or 'mixture', got {cfg.sweep!r}")
    if cfg.instances < 1:
        p.append("instances: must be positive")
    if cfg.max_sources < 1:
        p.append("max_sources: must be positive")
    return p


def from_dict(data: dict, cls=RunConfig):
    problems: list[str] = []
    cfg = _build(cls, data, "", problems)
    problems += validate(cfg) if cls is RunConfig else validate_bound(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: str | Path, env: dict | None = None, cls=RunConfig):
    """Load and validate a JSON config; ``FADA_SEED`` in the environment overrides the seed."""
    env = os.environ if env is None else env
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"<file>: cannot read {path}: {exc}"]) from None
    cfg = from_dict(data, cls)
    if env.get("FADA_SEED"):
        try:
            cfg.seed = int(env["FADA_SEED"])
        except ValueError:
            raise ConfigError([f"FADA_SEED: not an integer: {env['FADA_SEED']!r}"]) from None
    return cfg
