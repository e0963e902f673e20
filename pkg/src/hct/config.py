"""Run configuration: TOML file plus command-line overrides.

Every default mirrors the reference training setup except ``epochs`` and
``warmup_epochs``, which are shrunk for CPU-scale runs.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .adapters import FreezePlan
from .attention import TrunkConfig
from .errors import ConfigError
from .hram import ALL_TASKS, HramConfig, TaskId
from .model import ModelConfig
from .objectives import IclConfig, LossWeights

STAGES = ("joint", "ps", "ia")


@dataclass
class ModelSection:
    clip_len: int = 16
    frame_size: list = field(default_factory=lambda: [32, 32])
    in_channels: int = 3
    patch: list = field(default_factory=lambda: [2, 4, 4])
    channels: int = 48
    heads: int = 4
    q_strides: list = field(default_factory=lambda: [[1, 1, 1], [1, 2, 2]])
    kv_stride: list = field(default_factory=lambda: [1, 2, 2])
    mlp_ratio: int = 4
    pool: str = "avg"


@dataclass
class HramSection:
    enabled: bool = True
    tasks: list = field(default_factory=lambda: [t.value for t in ALL_TASKS])
    q_stride: list = field(default_factory=lambda: [1, 1, 1])
    kv_stride: list = field(default_factory=lambda: [1, 2, 2])
    slicing_skip: list = field(default_factory=lambda: ["instrument"])


@dataclass
class IclSection:
    enabled: bool = True
    temperature: float = 0.07
    pairs: list = field(default_factory=lambda: [["phase", "step"], ["instrument", "action"]])


@dataclass
class LossSection:
    phase: float = 0.3
    step: float = 0.2
    instrument: float = 0.3
    action: float = 0.2
    class_weights: str = "inverse_frequency"  # or "none"


@dataclass
class AdapterSection:
    temporal: bool = False
    spatial: bool = False
    ratio: float = 0.25
    kernel: list = field(default_factory=lambda: [3, 1, 1])
    freeze: list = field(default_factory=list)
    unfreeze: list = field(default_factory=list)


@dataclass
class OptimSection:
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    grad_clip: float = 0.0  # 0 disables
    label_smoothing: float = 0.0


@dataclass
class ScheduleSection:
    epochs: int = 5
    warmup_epochs: int = 1
    batch: int = 20


@dataclass
class RunConfig:
    seed: int = 0
    dtype: str = "float64"
    data: str = ""
    out_dir: str = "runs/default"
    stage: str = "joint"
    checkpoint_every: int = 0  # epochs; 0 keeps only the final checkpoint
    model: ModelSection = field(default_factory=ModelSection)
    hram: HramSection = field(default_factory=HramSection)
    icl: IclSection = field(default_factory=IclSection)
    loss: LossSection = field(default_factory=LossSection)
    adapters: AdapterSection = field(default_factory=AdapterSection)
    optim: OptimSection = field(default_factory=OptimSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)

    # -- derived views ----------------------------------------------------
    def validate(self) -> "RunConfig":
        s = self.schedule
        if s.epochs <= s.warmup_epochs:
            raise ConfigError(f"epochs ({s.epochs}) must exceed warm-up epochs ({s.warmup_epochs})")
        if s.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.loss.class_weights not in ("inverse_frequency", "none"):
            raise ConfigError(f"unknown class_weights mode {self.loss.class_weights!r}")
        if self.optim.label_smoothing:
            raise ConfigError("label smoothing is not supported")
        for t in self.hram.tasks + self.hram.slicing_skip:
            TaskId.parse(t)
        if self.icl.enabled and self.icl_config().pairs:
            if s.batch < 2:
                raise ConfigError("ICL needs batch >= 2 for in-batch negatives")
        self.loss_weights()
        self.model_config()
        return self

    def loss_weights(self) -> LossWeights:
        lw = LossWeights(self.loss.phase, self.loss.step, self.loss.instrument, self.loss.action)
        if self.stage == "ps":
            lw.instrument = lw.action = 0.0
        elif self.stage == "ia":
            lw.phase = lw.step = 0.0
        return lw

    def icl_config(self) -> IclConfig:
        pairs = [list(p) for p in self.icl.pairs]
        keep = {"ps": {TaskId.PHASE, TaskId.STEP}, "ia": {TaskId.INSTRUMENT, TaskId.ACTION}}.get(self.stage)
        if keep is not None:
            pairs = [p for p in pairs if {TaskId.parse(p[0]), TaskId.parse(p[1])} <= keep]
        return IclConfig(self.icl.temperature, pairs)

    def model_config(self, class_counts: dict | None = None) -> ModelConfig:
        m = self.model
        trunk = TrunkConfig(
            clip_len=m.clip_len, frame_size=tuple(m.frame_size), in_channels=m.in_channels, patch=tuple(m.patch),
            channels=m.channels, heads=m.heads, q_strides=[tuple(s) for s in m.q_strides],
            kv_stride=tuple(m.kv_stride), mlp_ratio=m.mlp_ratio, pool=m.pool,
            t_adapter=self.adapters.temporal, s_adapter=self.adapters.spatial,
            adapter_ratio=self.adapters.ratio, adapter_kernel=tuple(self.adapters.kernel),
        )
        trunk.token_grid()
        hram = HramConfig(list(self.hram.tasks), tuple(self.hram.q_stride), tuple(self.hram.kv_stride),
                          list(self.hram.slicing_skip))
        icl = self.icl_config()
        cfg = ModelConfig(trunk=trunk, hram=hram, use_hram=self.hram.enabled, icl=icl,
                          use_icl=self.icl.enabled and bool(icl.pairs))
        if class_counts is not None:
            cfg.class_counts = dict(class_counts)
        return cfg

    def freeze_plan(self) -> FreezePlan:
        return FreezePlan(list(self.adapters.freeze), list(self.adapters.unfreeze))

    # -- serialization ------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Digest of everything that shapes the model and its training, not of paths."""
        d = self.to_dict()
        for k in ("data", "out_dir", "checkpoint_every"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "").validate()

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from None
        return cls.from_dict(raw)

    def with_overrides(self, assignments: list[str]) -> "RunConfig":
        """Apply ``section.key=value`` strings; values parse as TOML literals."""
        d = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, value = item.split("=", 1)
            try:
                parsed = tomllib.loads(f"v = {value}")["v"]
            except tomllib.TOMLDecodeError:
                parsed = value
            node = d
            parts = key.strip().split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config section in {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = parsed
        return RunConfig.from_dict(d)

    def dumps_toml(self) -> str:
        lines = []
        d = self.to_dict()
        for k, v in d.items():
            if not isinstance(v, dict):
                lines.append(f"{k} = {_toml_value(v)}")
        for k, v in d.items():
            if isinstance(v, dict):
                lines.append(f"\n[{k}]")
                lines.extend(f"{kk} = {_toml_value(vv)}" for kk, vv in v.items())
        return "\n".join(lines) + "\n"


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize {v!r}")


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {where or 'root'} must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown} in {where or 'root'}")
    kwargs = {}
    defaults = cls()
    for name, f in known.items():
        if name not in d:
            continue
        default = getattr(defaults, name)
        val = d[name]
        if is_dataclass(default):
            kwargs[name] = _build(type(default), val, f"{where}{name}.")
        elif isinstance(default, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"{where}{name} must be a boolean")
            kwargs[name] = val
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                raise ConfigError(f"{where}{name} must be a number")
            kwargs[name] = type(default)(val) if isinstance(default, float) or float(val).is_integer() else val
        else:
            kwargs[name] = copy.deepcopy(val)
    return cls(**kwargs)
