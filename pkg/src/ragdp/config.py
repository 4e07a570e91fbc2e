"""Experiment configuration: one JSON document, dotted-key overrides."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


@dataclass
class DataConfig:
    generator: str = "gaussian_ring"
    params: dict = field(
        default_factory=lambda: {"n_modes": 8, "radius": 2.0, "mode_std": 0.05}
    )
    # Applied on top of ``params`` for the private split only.
    prv_shift: dict = field(
        default_factory=lambda: {"rotation": math.pi / 8, "translation": [0.5, 0.0]}
    )
    n_pub_pre: int = 4000
    n_pub_ref: int = 2000
    n_prv: int = 2000
    conditional: bool = False


@dataclass
class ScheduleConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"


@dataclass
class DenoiserConfig:
    hidden: list = field(default_factory=lambda: [64, 64])
    activation: str = "tanh"
    temb_dim: int = 16
    class_dim: int = 4


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 256
    learning_rate: float = 2e-3


@dataclass
class ExtractorConfig:
    hidden: list = field(default_factory=lambda: [64, 64])
    feature_dim: int = 16
    temperature: float = 0.1
    negatives_per_anchor: int | None = None
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 2e-3
    jitter_sigma: float = 0.05
    scale_range: list = field(default_factory=lambda: [0.95, 1.05])
    rotation_max_radians: float = 0.05


@dataclass
class KbConfig:
    size: int | None = None  # None: whole reference split
    entries_per_example: int = 1


@dataclass
class DpSection:
    clip_norm: float = 1.0
    noise_scale: float | None = None  # None: calibrate to target_epsilon
    target_epsilon: float = 10.0
    expected_batch: int = 64
    iterations: int = 500
    delta: float = 1e-5
    learning_rate: float = 2e-3
    epsilon_budget: float | None = None
    v_draws: int = 1
    retrieval_topk: int = 1


@dataclass
class SampleConfig:
    n_samples: int = 2000
    modes: list = field(default_factory=lambda: ["rag", "full"])
    steps_early: int | None = None  # None: T - k
    steps_late: int | None = None  # None: v
    full_steps: int | None = None  # None: T


@dataclass
class EvalConfig:
    nn_size: int = 5
    n_retrieval_queries: int = 1000


@dataclass
class ExperimentConfig:
    seed: int = 0
    k_frac: float = 0.8
    v_frac: float = 0.2
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    kb: KbConfig = field(default_factory=KbConfig)
    dp: DpSection = field(default_factory=DpSection)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if not 0 < self.v_frac < self.k_frac < 1:
            raise ValueError("need 0 < v_frac < k_frac < 1")

    @property
    def k(self) -> int:
        return round(self.k_frac * self.schedule.T)

    @property
    def v(self) -> int:
        return round(self.v_frac * self.schedule.T)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def stage_seed(self, stage: str) -> int:
        h = hashlib.sha256(f"{self.seed}:{stage}".encode()).digest()
        return int.from_bytes(h[:8], "little")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d)


def _build(tp, d):
    if not dataclasses.is_dataclass(tp):
        return d
    hints = {f.name: f for f in dataclasses.fields(tp)}
    unknown = set(d) - set(hints)
    if unknown:
        raise KeyError(f"unknown config keys for {tp.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        f = hints[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value)
        else:
            kwargs[name] = value
    return tp(**kwargs)


def parse_override(text: str) -> tuple[list[str], Any]:
    key, sep, raw = text.partition("=")
    if not sep:
        raise ValueError(f"override must be key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    d = copy.deepcopy(d)
    for text in overrides:
        path, value = parse_override(text)
        node = d
        for part in path[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise KeyError(f"unknown config key {'.'.join(path)!r}")
            node = node[part]
        free_form = len(path) > 1 and path[-2] in ("params", "prv_shift")
        if path[-1] not in node and not free_form:
            raise KeyError(f"unknown config key {'.'.join(path)!r}")
        node[path[-1]] = value
    return d


def load_config(path=None, overrides: list[str] = (), seed: int | None = None) -> ExperimentConfig:
    base = ExperimentConfig().to_dict()
    if path is not None:
        user = json.loads(Path(path).read_text())
        base = _merge(base, user)
    base = apply_overrides(base, list(overrides))
    if seed is not None:
        base["seed"] = seed
    return ExperimentConfig.from_dict(base)


def _merge(base: dict, user: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in user.items():
        if key not in out:
            raise KeyError(f"unknown config key {key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict) and key not in ("params", "prv_shift"):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out
