"""Run configuration: sectioned key = value text files.

Every field has a default; unknown sections or keys are errors. Tuples are
written comma-separated, booleans as true/false.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields

from .backbone import BackboneConfig, order_streams
from .flow import ClockMap, ClockSchedule, LossWeights
from .wavelet import WaveletRegWeights


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "blocks-and-edges"
    n: int = 1000
    size: int = 32
    path: str = ""
    seed: int = 0
    eval_n: int = 64


@dataclass
class ModelConfig:
    patch: int = 4
    width: int = 256
    depth: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0
    dino_dim: int = 16
    streams: tuple = ("fre", "pix")


@dataclass
class FlowConfig:
    schedule: str = "linear_offset"
    schedule_param: float = 0.25
    dino_schedule: str = "linear_offset"
    dino_param: float = 0.5
    t_clip: float = 0.05
    lambda_pix: float = 1.0
    lambda_fre: float = 1.0
    lambda_dino: float = 1.0
    fre_decay: float = 0.0
    skip_saturated: bool = True


@dataclass
class WaveletConfig:
    K: int = 4
    L: int = 2
    a: float = 10.0
    lowfreq_size: int = 8
    init_filter: str = "haar"
    gamma_init: float = 0.001
    joint: bool = True
    lambda_sum: float = 1.0
    lambda_hp: float = 1.0
    lambda_ortho: float = 1.0
    lambda_sparse: float = 0.0


@dataclass
class TrainSection:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 0.01
    lr_schedule: str = "constant"
    optimizer: str = "sgd"
    momentum: float = 0.9
    seed: int = 0
    freeze_step: int = -1
    eval_every: int = 50
    class_dropout: float = 0.1
    grad_clip: float = 1.0
    checkpoint_every: int = 0


@dataclass
class AblationConfig:
    synchronous_clocks: bool = False
    random_aux_latent: bool = False
    independent_clock_sampling: bool = False
    fixed_basis: str = "learned"


@dataclass
class SamplerConfig:
    steps: int = 32
    guidance: float = 1.5
    t_clip: float = 0.05
    seed: int = 0
    n: int = 8
    label: int = -1

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("sampler steps must be >= 1")
        if self.guidance < 0:
            raise ConfigError("guidance scale must be >= 0")


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "flow": FlowConfig,
    "wavelet": WaveletConfig,
    "train": TrainSection,
    "ablation": AblationConfig,
    "sampler": SamplerConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    wavelet: WaveletConfig = field(default_factory=WaveletConfig)
    train: TrainSection = field(default_factory=TrainSection)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        self.validate()

    # -- derived objects --------------------------------------------------

    @property
    def streams(self) -> tuple:
        return order_streams(self.model.streams)

    @property
    def freeze_step(self) -> int:
        fs = self.train.freeze_step
        return int(round(0.1 * self.train.steps)) if fs < 0 else fs

    def schedule(self) -> ClockSchedule:
        if self.ablation.synchronous_clocks:
            return ClockSchedule()
        maps = {}
        if "fre" in self.streams:
            maps["fre"] = ClockMap(self.flow.schedule, self.flow.schedule_param)
        if "dino" in self.streams:
            maps["dino"] = ClockMap(self.flow.dino_schedule, self.flow.dino_param)
        return ClockSchedule(maps)

    def loss_weights(self) -> LossWeights:
        f = self.flow
        lam = {"pix": f.lambda_pix, "fre": f.lambda_fre, "dino": f.lambda_dino}
        return LossWeights({s: lam[s] for s in self.streams}, f.t_clip, f.fre_decay)

    def reg_weights(self) -> WaveletRegWeights:
        w = self.wavelet
        return WaveletRegWeights(w.lambda_sum, w.lambda_hp, w.lambda_ortho, w.lambda_sparse)

    def backbone(self, num_classes: int, channels: int = 3) -> BackboneConfig:
        m = self.model
        return BackboneConfig(self.data.size, channels, m.patch, m.width, m.depth, m.heads, m.mlp_ratio,
                              num_classes, self.streams, m.dino_dim)

    def validate(self) -> None:
        try:
            self.schedule()
            self.loss_weights()
            self.reg_weights()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        H, s = self.data.size, self.wavelet.lowfreq_size
        ratio = H // s if s > 0 else 0
        if s <= 0 or H % s or ratio & (ratio - 1) or ratio < 2:
            raise ConfigError(f"image size {H} must be a power of two (>= 2) times lowfreq_size {s}")
        if not 0 <= self.freeze_step < self.train.steps:
            raise ConfigError(f"freeze step {self.freeze_step} must lie in [0, {self.train.steps})")
        if self.ablation.fixed_basis not in ("haar", "laplacian", "learned"):
            raise ConfigError(f"fixed_basis must be haar, laplacian or learned, got {self.ablation.fixed_basis!r}")
        if self.train.lr_schedule not in ("constant", "linear"):
            raise ConfigError(f"lr_schedule must be constant or linear, got {self.train.lr_schedule!r}")
        if self.train.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.train.optimizer!r}")
        if self.model.width % self.model.heads:
            raise ConfigError("heads must divide width")
        if self.data.size % self.model.patch:
            raise ConfigError("patch must divide image size")
        if self.wavelet.K < 2 or self.wavelet.K % 2:
            raise ConfigError("filter length K must be even and >= 2")

    def replace(self, **sections) -> "RunConfig":
        """Copy with per-section overrides, e.g. ``replace(train={"steps": 10})``."""
        kw = {}
        for f in fields(self):
            sec = getattr(self, f.name)
            kw[f.name] = dataclasses.replace(sec, **sections.get(f.name, {}))
        return RunConfig(**kw)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(v.strip() for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def dumps(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name in SECTIONS:
        sec = getattr(cfg, name)
        parser[name] = {f.name: _format(getattr(sec, f.name)) for f in fields(sec)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def loads(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    kw = {}
    for name, cls in SECTIONS.items():
        defaults = cls()
        values = {}
        if parser.has_section(name):
            known = {f.name for f in fields(cls)}
            for key, raw in parser[name].items():
                if key not in known:
                    raise ConfigError(f"unknown key {name}.{key}")
                values[key] = _parse(raw, getattr(defaults, key), f"{name}.{key}")
        try:
            kw[name] = cls(**values)
        except ValueError as exc:
            raise ConfigError(f"[{name}] {exc}") from None
    return RunConfig(**kw)


def load(path) -> RunConfig:
    with open(path) as fh:
        return loads(fh.read())


def save(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(cfg))
