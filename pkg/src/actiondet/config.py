"""Experiment configuration: every tunable in one serializable record.

Configs are plain dataclasses that round-trip through JSON. ``from_dict``
rejects unknown keys and ``validate`` names the offending field with its
dotted path, so CLI users get actionable errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field


ENV_PREFIX = "ACTIONDET_"


class ConfigError(ValueError):
    """Raised when a config value fails validation; message names the field."""


@dataclass
class AugmentConfig:
    flip: bool = True
    flip_prob: float = 0.5
    box_jitter: float = 0.05
    color_jitter: bool = True
    color_scale: tuple[float, float] = (0.8, 1.2)
    color_shift: float = 0.05
    # short-side target range for scale jittering; None disables resizing.
    # Training default range includes 256 (short side scaled to 256 px).
    scale_range: tuple[int, int] | None = (256, 320)

    def validate(self, prefix="augment"):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"{prefix}.flip_prob: must be in [0, 1]")
        if self.box_jitter < 0:
            raise ConfigError(f"{prefix}.box_jitter: must be >= 0")
        if self.color_scale[0] <= 0 or self.color_scale[1] < self.color_scale[0]:
            raise ConfigError(f"{prefix}.color_scale: need 0 < lo <= hi")
        if self.color_shift < 0:
            raise ConfigError(f"{prefix}.color_shift: must be >= 0")
        if self.scale_range is not None:
            lo, hi = self.scale_range
            if lo < 1 or hi < lo:
                raise ConfigError(f"{prefix}.scale_range: need 1 <= lo <= hi")


@dataclass
class DataConfig:
    clip_seconds: int = 5
    n_frames: int = 64
    t_slow: int = 8
    t_fast: int = 32
    pixel_mean: tuple[float, float, float] = (0.45, 0.45, 0.45)
    pixel_std: tuple[float, float, float] = (0.225, 0.225, 0.225)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self, prefix="data"):
        if self.clip_seconds < 1:
            raise ConfigError(f"{prefix}.clip_seconds: must be >= 1")
        if self.n_frames < 1:
            raise ConfigError(f"{prefix}.n_frames: must be >= 1")
        if self.t_slow < 1 or self.t_fast < 1:
            raise ConfigError(f"{prefix}.t_slow/t_fast: must be >= 1")
        if self.n_frames % self.t_slow or self.n_frames % self.t_fast:
            raise ConfigError(
                f"{prefix}.n_frames: must be divisible by t_slow and t_fast"
            )
        if self.t_fast % self.t_slow:
            raise ConfigError(f"{prefix}.t_fast: must be a multiple of t_slow")
        for name, v in (("pixel_mean", self.pixel_mean), ("pixel_std", self.pixel_std)):
            if len(v) != 3:
                raise ConfigError(f"{prefix}.{name}: need 3 channel values")
        if any(s <= 0 for s in self.pixel_std):
            raise ConfigError(f"{prefix}.pixel_std: must be > 0")
        self.augment.validate(f"{prefix}.augment")

    @property
    def alpha(self) -> int:
        return self.t_fast // self.t_slow


@dataclass
class SyntheticConfig:
    """Procedural moving-rectangle dataset with three separable label families."""

    num_videos: int = 100
    grid_size: int = 64
    fps: int = 2
    duration_seconds: int = 30
    train_fraction: float = 0.7
    # labels are emitted only for the last `labeled_seconds` of each video so
    # the long-range cue stays >= min_event_gap seconds away from every
    # labeled key frame
    labeled_seconds: int = 6
    event_window: tuple[int, int] = (2, 5)  # half-open [start, stop) seconds
    min_event_gap: int = 20
    beacon_prob: float = 0.5
    event_prob: float = 0.5
    second_person_prob: float = 0.5
    person_size: tuple[float, float] = (0.12, 0.18)
    # pulse frequencies (Hz) for the three mutually exclusive pose classes
    pulse_freqs: tuple[float, float, float] = (0.0, 0.25, 1.0)
    pulse_amp: float = 0.6
    wiggle_px: float = 1.5
    noise_std: float = 0.015

    def validate(self, prefix="synthetic"):
        if self.num_videos < 1:
            raise ConfigError(f"{prefix}.num_videos: must be >= 1")
        if self.grid_size < 16:
            raise ConfigError(f"{prefix}.grid_size: must be >= 16")
        if self.fps < 1:
            raise ConfigError(f"{prefix}.fps: must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"{prefix}.train_fraction: must be in (0, 1)")
        if self.labeled_seconds < 1:
            raise ConfigError(f"{prefix}.labeled_seconds: must be >= 1")
        ev_lo, ev_hi = self.event_window
        if not 0 <= ev_lo < ev_hi <= self.duration_seconds:
            raise ConfigError(f"{prefix}.event_window: must lie inside the video")
        first_labeled = self.duration_seconds - self.labeled_seconds
        if first_labeled - (ev_hi - 1) < self.min_event_gap:
            raise ConfigError(
                f"{prefix}.event_window: labeled key frames start at second "
                f"{first_labeled} but must be >= {self.min_event_gap}s after "
                f"the event"
            )
        for name, p in (
            ("beacon_prob", self.beacon_prob),
            ("event_prob", self.event_prob),
            ("second_person_prob", self.second_person_prob),
        ):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{prefix}.{name}: must be in [0, 1]")
        if not 0.0 < self.person_size[0] <= self.person_size[1] < 0.5:
            raise ConfigError(f"{prefix}.person_size: need 0 < lo <= hi < 0.5")


@dataclass
class BackboneConfig:
    stem_width: int = 16           # slow-pathway stem channels
    stage_channels: tuple[int, ...] = (16, 16)  # slow channels per residual stage
    stage_strides: tuple[int, ...] = (2,)  # spatial strides of all stages but the last
    alpha: int = 4                 # fast/slow frame-rate ratio
    beta: float = 0.125            # fast/slow channel ratio
    res5_stride: int = 1           # final-stage spatial stride
    res5_dilation: int = 2         # final-stage spatial dilation
    stem_stride: int = 2
    use_nonlocal: bool = False
    nonlocal_qk_dim: int = 8
    bn_momentum: float = 0.1

    def validate(self, prefix="backbone"):
        if self.stem_width < 1:
            raise ConfigError(f"{prefix}.stem_width: must be >= 1")
        if len(self.stage_channels) < 1:
            raise ConfigError(f"{prefix}.stage_channels: need at least one stage")
        if any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"{prefix}.stage_channels: must be >= 1")
        if len(self.stage_strides) != len(self.stage_channels) - 1:
            raise ConfigError(
                f"{prefix}.stage_strides: need one entry per non-final stage"
            )
        if self.alpha < 1:
            raise ConfigError(f"{prefix}.alpha: must be >= 1")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"{prefix}.beta: must be in (0, 1]")
        if self.res5_stride < 1 or self.res5_dilation < 1:
            raise ConfigError(f"{prefix}.res5_stride/res5_dilation: must be >= 1")

    def fast_width(self, slow_width: int) -> int:
        return max(1, round(self.beta * slow_width))

    @property
    def spatial_stride(self) -> int:
        s = self.stem_stride
        for st in self.stage_strides:
            s *= st
        return s * self.res5_stride

    @property
    def out_channels(self) -> int:
        c = self.stage_channels[-1]
        return c + self.fast_width(c)


@dataclass
class RoIConfig:
    pool_size: int = 7
    # align-style bilinear sampling is intentionally not implemented; the flag
    # exists so configs stay forward compatible
    align: bool = False

    def validate(self, prefix="roi"):
        if self.pool_size < 1:
            raise ConfigError(f"{prefix}.pool_size: must be >= 1")
        if self.align:
            raise ConfigError(f"{prefix}.align: align sampling is not implemented")


@dataclass
class BankConfig:
    persons_per_second: int = 5    # K
    window_radius: int = 30        # R, in seconds; 61-second window by default

    def validate(self, prefix="bank"):
        if self.persons_per_second < 1:
            raise ConfigError(f"{prefix}.persons_per_second: must be >= 1")
        if self.window_radius < 0:
            raise ConfigError(f"{prefix}.window_radius: must be >= 0")

    @property
    def capacity(self) -> int:
        return (2 * self.window_radius + 1) * self.persons_per_second


@dataclass
class FusionConfig:
    d_lfb: int = 16                # dimension-reduction target for both inputs
    d_attn: int = 16               # attention projection width inside a block
    num_blocks: int = 2
    dropout: float = 0.2
    d_global: int = 16             # reduced global-feature width
    head_dropout: float = 0.5      # before the final fully connected layer
    use_global: bool = True        # disable to ablate the global branch

    def validate(self, prefix="fusion"):
        for name, d in (("d_lfb", self.d_lfb), ("d_attn", self.d_attn),
                        ("d_global", self.d_global)):
            if d < 1:
                raise ConfigError(f"{prefix}.{name}: must be >= 1")
        if self.num_blocks < 0:
            raise ConfigError(f"{prefix}.num_blocks: must be >= 0")
        for name, p in (("dropout", self.dropout), ("head_dropout", self.head_dropout)):
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{prefix}.{name}: must be in [0, 1)")


@dataclass
class LossConfig:
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    global_loss_weight: float = 0.5   # lambda on the scene term
    pose_loss_weight: float = 1.0

    def validate(self, prefix="losses"):
        if self.focal_gamma < 0:
            raise ConfigError(f"{prefix}.focal_gamma: must be >= 0")
        if not 0.0 < self.focal_alpha <= 1.0:
            raise ConfigError(f"{prefix}.focal_alpha: must be in (0, 1]")
        if self.global_loss_weight < 0:
            raise ConfigError(f"{prefix}.global_loss_weight: must be >= 0")
        if self.pose_loss_weight < 0:
            raise ConfigError(f"{prefix}.pose_loss_weight: must be >= 0")


@dataclass
class ScheduleConfig:
    kind: str = "half_cosine"      # "half_cosine" or "step"
    lr0: float = 0.016
    iter_max: int = 26000
    warmup_iters: int = 0
    step_milestones: tuple[int, ...] = (16000, 21000)
    step_factor: float = 0.1

    def validate(self, prefix="schedule"):
        if self.kind not in ("half_cosine", "step"):
            raise ConfigError(f"{prefix}.kind: must be 'half_cosine' or 'step'")
        if self.lr0 <= 0:
            raise ConfigError(f"{prefix}.lr0: must be > 0")
        if self.iter_max < 1:
            raise ConfigError(f"{prefix}.iter_max: must be >= 1")
        if self.warmup_iters < 0 or self.warmup_iters >= self.iter_max:
            raise ConfigError(f"{prefix}.warmup_iters: must be in [0, iter_max)")
        if list(self.step_milestones) != sorted(set(self.step_milestones)):
            raise ConfigError(f"{prefix}.step_milestones: must be strictly increasing")
        if self.step_factor <= 0:
            raise ConfigError(f"{prefix}.step_factor: must be > 0")


@dataclass
class OptimConfig:
    momentum: float = 0.9
    weight_decay: float = 1e-7    # fine-tuning default; pretraining used 1e-4

    def validate(self, prefix="optim"):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"{prefix}.momentum: must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError(f"{prefix}.weight_decay: must be >= 0")


@dataclass
class StageConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    batch_size: int = 8
    log_every: int = 50
    augment: bool = True
    # stage-2 only: keep backbone weights at their stage-1 values and train the
    # fusion stack plus heads; allows feature caching on small machines
    freeze_backbone: bool = False
    # what to do when the bank's extractor hash differs from the stage-1
    # checkpoint: "warn" or "error"
    hash_mismatch: str = "warn"

    def validate(self, prefix="stage"):
        self.schedule.validate(f"{prefix}.schedule")
        self.optim.validate(f"{prefix}.optim")
        if self.batch_size < 1:
            raise ConfigError(f"{prefix}.batch_size: must be >= 1")
        if self.log_every < 1:
            raise ConfigError(f"{prefix}.log_every: must be >= 1")
        if self.hash_mismatch not in ("warn", "error"):
            raise ConfigError(f"{prefix}.hash_mismatch: must be 'warn' or 'error'")


@dataclass
class EvalConfig:
    det_threshold: float = 0.8
    # 244 is kept as published even though 224 was likely intended; configs may
    # override it freely
    tta_scales: tuple[int, ...] = (244, 256, 320)
    tta_flip: bool = True
    iou_threshold: float = 0.5

    def validate(self, prefix="eval"):
        if not 0.0 <= self.det_threshold <= 1.0:
            raise ConfigError(f"{prefix}.det_threshold: must be in [0, 1]")
        if len(self.tta_scales) < 1 or any(s < 1 for s in self.tta_scales):
            raise ConfigError(f"{prefix}.tta_scales: need at least one scale >= 1")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ConfigError(f"{prefix}.iou_threshold: must be in (0, 1]")


@dataclass
class ExperimentConfig:
    seed: int = 0
    dtype: str = "float32"
    deterministic: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    roi: RoIConfig = field(default_factory=RoIConfig)
    bank: BankConfig = field(default_factory=BankConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    stage1: StageConfig = field(default_factory=StageConfig)
    stage2: StageConfig = field(default_factory=StageConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype: must be 'float32' or 'float64'")
        if self.data.t_fast != self.backbone.alpha * self.data.t_slow:
            raise ConfigError(
                "backbone.alpha: must equal data.t_fast / data.t_slow"
            )
        self.data.validate("data")
        self.synthetic.validate("synthetic")
        self.backbone.validate("backbone")
        self.roi.validate("roi")
        self.bank.validate("bank")
        self.fusion.validate("fusion")
        self.losses.validate("losses")
        self.stage1.validate("stage1")
        self.stage2.validate("stage2")
        self.eval.validate("eval")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, indent=2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json())
            f.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build_dataclass(cls, d, prefix="")

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_json(f.read())


def _build_dataclass(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or cls.__name__}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        name = sorted(unknown)[0]
        path = f"{prefix}.{name}" if prefix else name
        raise ConfigError(f"{path}: unknown field")
    kwargs = {}
    for name, f in fields.items():
        if name not in d:
            continue
        value = d[name]
        path = f"{prefix}.{name}" if prefix else name
        if dataclasses.is_dataclass(f.type) or (
            isinstance(f.type, str) and f.type.endswith("Config")
        ):
            sub_cls = f.type if dataclasses.is_dataclass(f.type) else _CONFIG_TYPES[f.type]
            kwargs[name] = _build_dataclass(sub_cls, value, path)
        else:
            kwargs[name] = _coerce(value, path)
    return cls(**kwargs)


_CONFIG_TYPES = {
    c.__name__: c
    for c in (
        AugmentConfig, DataConfig, SyntheticConfig, BackboneConfig, RoIConfig,
        BankConfig, FusionConfig, LossConfig, ScheduleConfig, OptimConfig,
        StageConfig, EvalConfig,
    )
}


def _coerce(value, path):
    # lists arrive from JSON where dataclass defaults are tuples
    if isinstance(value, list):
        return tuple(_coerce(v, path) for v in value)
    if isinstance(value, dict):
        raise ConfigError(f"{path}: unexpected object")
    return value


def apply_env_overrides(cfg: ExperimentConfig, environ=None) -> ExperimentConfig:
    """Apply ``ACTIONDET_<PATH>`` environment overrides to a config.

    Double underscores separate path components, e.g.
    ``ACTIONDET_STAGE1__SCHEDULE__LR0=0.02``. Values are parsed as JSON with a
    plain-string fallback.
    """
    environ = os.environ if environ is None else environ
    d = cfg.to_dict()
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in key[len(ENV_PREFIX):].split("__")]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"{'.'.join(parts)}: unknown field (from ${key})")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"{'.'.join(parts)}: unknown field (from ${key})")
        node[parts[-1]] = value
    return ExperimentConfig.from_dict(d)
