"""
Point2Insert Configuration System
Run configuration merged from defaults, a JSON config file and CLI flags
"""

import json
import os
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Any, Dict, List, Optional

from src.config import (
    P2I_THREADS, DEFAULT_SEED, CLASS_TAGS, LAMBDA1, LAMBDA2, ADAMW_BETAS,
    DESK_STAGE1_LR, STAGE2_LR_RATIO, STAGE1_MASK_MIX, STAGE2_GUIDANCE_MIX,
    DEFAULT_POINT_SIZE, SCALE_FILTER_LOW, SCALE_FILTER_HIGH, INPAINT_TOLERANCE,
    INPAINT_ITERATIONS, GENERATION_RETRY_BUDGET, ALIGN_DILATION_RADIUS,
    ALIGN_FEATHER_WIDTH, DETECT_THRESHOLD, DETECT_MIN_BLOB, ABLATION_POINT_SIZES,
    SAMPLER_STEPS, LATENT_CHANNELS, MODEL_INPUT_CHANNELS,
)
from src.exceptions import UsageError, ValidationError
from src.notifications import log_warning
from src.pointmap import DensityMode, SamplingPolicy

SNAPSHOT_FILE = 'resolved_config.json'
MAX_DENOISER_PARAMETERS = 50_000
GUIDANCE_KINDS = ('mask', 'sparse', 'dense')


def worker_count() -> int:
    """Thread cap for parallel record work, from P2I_THREADS (min 1)."""
    try:
        return max(1, int(P2I_THREADS))
    except (TypeError, ValueError):
        log_warning(f"Ignoring invalid P2I_THREADS={P2I_THREADS!r}, using 1 worker")
        return 1


@dataclass
class DenoiserConfig:
    width: int = 32
    depth: int = 2
    num_tags: int = len(CLASS_TAGS)

    def parameter_count(self) -> int:
        d = self.width
        return (MODEL_INPUT_CHANNELS * d + d          # input projection
                + 16 * d + d                          # time readout
                + self.num_tags * d                   # tag table
                + self.depth * (9 * d * d + d)        # 3x3 mixing layers
                + d * LATENT_CHANNELS + LATENT_CHANNELS)

    def validate(self):
        if not 1 <= self.width <= 32:
            raise ValidationError(f"Denoiser width must be 1..32, got {self.width}")
        if self.depth not in (2, 3):
            raise ValidationError(f"Denoiser depth must be 2 or 3, got {self.depth}")
        if self.num_tags < 1:
            raise ValidationError("Denoiser needs at least one condition tag")
        if self.parameter_count() > MAX_DENOISER_PARAMETERS:
            raise ValidationError(f"Denoiser has {self.parameter_count()} parameters, "
                                  f"limit is {MAX_DENOISER_PARAMETERS}")


@dataclass
class TrainConfig:
    """Training recipe for either stage"""
    stage: int = 1
    steps: int = 500
    batch_size: int = 4
    learning_rate: Optional[float] = None
    lambda1: float = LAMBDA1
    lambda2: float = LAMBDA2
    # Stage 1: probability of a mask-guided example, the rest are point-guided
    mask_mix: float = STAGE1_MASK_MIX
    # Stage 2: mask / sparse / dense guidance probabilities
    guidance_mix: Dict[str, float] = field(default_factory=lambda: dict(STAGE2_GUIDANCE_MIX))
    seed: int = DEFAULT_SEED
    reduction: str = 'mean'
    weight_decay: float = 0.0
    beta1: float = ADAMW_BETAS[0]
    beta2: float = ADAMW_BETAS[1]
    weight_etd: bool = False
    point_size: int = DEFAULT_POINT_SIZE
    log_every: int = 50
    policy: SamplingPolicy = field(default_factory=lambda: SamplingPolicy(
        mode=DensityMode.VARIABLE_DENSITY, pos_points_per_kframe=(1, 5), neg_points_per_kframe=(0, 3)))
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)

    def resolved_learning_rate(self) -> float:
        if self.learning_rate is not None:
            return float(self.learning_rate)
        return DESK_STAGE1_LR if self.stage == 1 else DESK_STAGE1_LR * STAGE2_LR_RATIO

    def stage1_mix(self) -> Dict[str, float]:
        return {'mask': self.mask_mix, 'points': 1.0 - self.mask_mix}

    def validate(self):
        if self.stage not in (1, 2):
            raise ValidationError(f"Stage must be 1 or 2, got {self.stage}")
        if self.steps < 0:
            raise ValidationError(f"Steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ValidationError(f"Batch size must be >= 1, got {self.batch_size}")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValidationError(f"Learning rate must be positive, got {self.learning_rate}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValidationError("Loss weights must be nonnegative")
        if not 0.0 <= self.mask_mix <= 1.0:
            raise ValidationError(f"mask_mix must be in [0, 1], got {self.mask_mix}")
        unknown = set(self.guidance_mix) - set(GUIDANCE_KINDS)
        if unknown:
            raise ValidationError(f"Unknown guidance kinds {sorted(unknown)}")
        if any(p < 0 for p in self.guidance_mix.values()):
            raise ValidationError("Guidance probabilities must be nonnegative")
        if abs(sum(self.guidance_mix.values()) - 1.0) > 1e-9:
            raise ValidationError(f"Guidance probabilities must sum to 1, got {self.guidance_mix}")
        if self.reduction not in ('mean', 'sum'):
            raise ValidationError(f"Reduction must be 'mean' or 'sum', got {self.reduction}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValidationError("AdamW betas must lie in [0, 1)")
        if self.point_size < 1 or self.log_every < 1:
            raise ValidationError("point_size and log_every must be >= 1")
        self.policy.validate()
        self.denoiser.validate()


@dataclass
class SynthConfig:
    """Scene rendering and pair assembly"""
    frames: int = 9
    height: int = 64
    width: int = 64
    channels: int = 3
    max_distractors: int = 2
    max_pan: float = 1.0
    # Distractors may cross the frame border
    allow_partial: bool = False
    scale_low: float = SCALE_FILTER_LOW
    scale_high: float = SCALE_FILTER_HIGH
    inpaint_iterations: int = INPAINT_ITERATIONS
    inpaint_tolerance: float = INPAINT_TOLERANCE
    retry_budget: int = GENERATION_RETRY_BUDGET
    background_alignment: bool = True
    dilation_radius: int = ALIGN_DILATION_RADIUS
    feather_width: int = ALIGN_FEATHER_WIDTH
    # Std-dev of smoothed noise added to removed backgrounds
    removal_corruption: float = 0.0

    def validate(self):
        if self.frames < 1 or (self.frames - 1) % 4:
            raise ValidationError(f"Frame count must be 1 mod 4, got {self.frames}")
        if self.height % 8 or self.width % 8 or self.height < 8 or self.width < 8:
            raise ValidationError(f"Frame size must be multiples of 8, got {self.height}x{self.width}")
        if self.channels not in (1, 3):
            raise ValidationError(f"Channels must be 1 or 3, got {self.channels}")
        if not 0.0 <= self.scale_low < self.scale_high <= 1.0:
            raise ValidationError("Scale filter band must satisfy 0 <= low < high <= 1")
        if self.retry_budget < 1 or self.inpaint_iterations < 1:
            raise ValidationError("retry_budget and inpaint_iterations must be >= 1")
        if self.dilation_radius < 0 or self.feather_width < 0 or self.removal_corruption < 0:
            raise ValidationError("Alignment radii and corruption must be nonnegative")


@dataclass
class BenchConfig:
    """PointBench grid and metric knobs"""
    threshold: float = DETECT_THRESHOLD
    min_blob: int = DETECT_MIN_BLOB
    sampler_steps: int = SAMPLER_STEPS
    point_sizes: List[int] = field(default_factory=lambda: [DEFAULT_POINT_SIZE])
    density_modes: List[str] = field(default_factory=lambda: [DensityMode.VARIABLE_DENSITY.value])
    ablation_point_sizes: List[int] = field(default_factory=lambda: list(ABLATION_POINT_SIZES))
    composite: bool = True
    dilation_radius: int = ALIGN_DILATION_RADIUS
    feather_width: int = ALIGN_FEATHER_WIDTH
    flow: str = 'estimate'
    max_records: Optional[int] = None

    def region_margin(self) -> int:
        """Ground-truth mask dilation that bounds the compositing support."""
        return self.dilation_radius + self.feather_width

    def policy_grid(self) -> List[SamplingPolicy]:
        grid = []
        for mode in self.density_modes:
            mode = DensityMode(mode)
            if mode == DensityMode.FULL_MASK:
                grid.append(SamplingPolicy.full_mask())
                continue
            for size in self.point_sizes:
                grid.append(SamplingPolicy(mode=mode, point_size=size,
                                           pos_points_per_kframe=(1, 5) if mode == DensityMode.VARIABLE_DENSITY else 3,
                                           neg_points_per_kframe=(1, 3) if mode == DensityMode.VARIABLE_DENSITY else 2))
        return grid

    def validate(self):
        if self.threshold <= 0 or self.min_blob < 1 or self.sampler_steps < 1:
            raise ValidationError("threshold must be > 0, min_blob and sampler_steps >= 1")
        if not self.point_sizes or any(s < 1 for s in self.point_sizes):
            raise ValidationError(f"Point sizes must be >= 1, got {self.point_sizes}")
        for mode in self.density_modes:
            try:
                DensityMode(mode)
            except ValueError:
                raise ValidationError(f"Unknown density mode '{mode}'")
        if self.flow not in ('estimate', 'zero'):
            raise ValidationError(f"Flow source must be 'estimate' or 'zero', got {self.flow}")
        if self.max_records is not None and self.max_records < 1:
            raise ValidationError("max_records must be >= 1")


@dataclass
class RunConfig:
    """Everything one CLI invocation needs; its snapshot reproduces the run"""
    subcommand: Optional[str] = None
    seed: int = DEFAULT_SEED
    out_dir: Optional[str] = None
    dataset_dir: Optional[str] = None
    checkpoint: Optional[str] = None
    teacher_checkpoint: Optional[str] = None
    count: int = 8
    stage: int = 1
    guidance: str = 'points'
    axis: str = 'size'
    policy: SamplingPolicy = field(default_factory=SamplingPolicy)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)


def _to_jsonable(value: Any) -> Any:
    if isinstance(value, SamplingPolicy):
        return value.to_dict()
    if is_dataclass(value):
        return {f.name: _to_jsonable(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, dict):
        return {k: _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_jsonable(v) for v in value]
    return value


def _merge(target: Any, data: Dict[str, Any], prefix: str = '') -> None:
    """Overlay a (possibly nested) dict onto a dataclass, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise UsageError(f"Config section '{prefix.rstrip('.') or 'root'}' must be an object")
    names = {f.name for f in fields(target)}
    for key, value in data.items():
        if key not in names:
            raise UsageError(f"Unknown config key '{prefix}{key}'")
        current = getattr(target, key)
        if isinstance(current, SamplingPolicy):
            if isinstance(value, SamplingPolicy):
                setattr(target, key, value)
                continue
            if not isinstance(value, dict):
                raise UsageError(f"Config key '{prefix}{key}' must be an object")
            merged = current.to_dict()
            unknown = set(value) - set(merged)
            if unknown:
                raise UsageError(f"Unknown config keys {sorted(unknown)} under '{prefix}{key}'")
            merged.update(value)
            try:
                setattr(target, key, SamplingPolicy.from_dict(merged))
            except (TypeError, ValueError) as e:
                raise UsageError(f"Invalid sampling policy under '{prefix}{key}': {e}")
        elif is_dataclass(current) and not isinstance(value, type(current)):
            _merge(current, value, f"{prefix}{key}.")
        else:
            setattr(target, key, value)


class ConfigurationManager:
    """Central configuration management: defaults < config file < flags"""

    def __init__(self, config_file: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None):
        self.config = RunConfig()
        self.config_file = config_file
        if config_file:
            self._load_config_file(config_file)
        if overrides:
            self.apply_overrides(overrides)
        self._validate_configuration()

    def _load_config_file(self, path: str):
        if not os.path.exists(path):
            raise UsageError(f"Config file not found: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise UsageError(f"Config file {path} is not valid JSON: {e}")
        _merge(self.config, data)

    def apply_overrides(self, overrides: Dict[str, Any]):
        """Apply flag values keyed by dotted path, e.g. {'train.steps': 10}; None means unset."""
        for dotted, value in overrides.items():
            if value is None:
                continue
            parts = dotted.split('.')
            nested: Dict[str, Any] = {parts[-1]: value}
            for part in reversed(parts[:-1]):
                nested = {part: nested}
            _merge(self.config, nested)

    def _validate_configuration(self):
        """Validate configuration settings"""
        cfg = self.config
        if not isinstance(cfg.seed, int) or cfg.seed < 0:
            raise ValidationError(f"Seed must be a nonnegative integer, got {cfg.seed!r}")
        if cfg.count < 1:
            raise ValidationError(f"Record count must be >= 1, got {cfg.count}")
        if cfg.stage not in (1, 2):
            raise ValidationError(f"Stage must be 1 or 2, got {cfg.stage}")
        if cfg.guidance not in ('points', 'mask'):
            raise ValidationError(f"Guidance must be 'points' or 'mask', got {cfg.guidance}")
        if cfg.axis not in ('size', 'density', 'components', 'guidance'):
            raise ValidationError(f"Unknown ablation axis '{cfg.axis}'")
        # One master seed drives every stage
        cfg.train.seed = cfg.seed
        cfg.policy.validate()
        cfg.train.validate()
        cfg.synth.validate()
        cfg.bench.validate()

    def snapshot(self) -> Dict[str, Any]:
        return _to_jsonable(self.config)

    def write_snapshot(self, out_dir: str) -> str:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, SNAPSHOT_FILE)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.snapshot(), f, indent=2, sort_keys=True)
            f.write('\n')
        return path

    def print_configuration(self):
        """Print current configuration"""
        cfg = self.config
        print("=" * 60)
        print("POINT2INSERT CONFIGURATION")
        print("=" * 60)
        print(f"Subcommand: {cfg.subcommand or '-'}")
        print(f"Master Seed: {cfg.seed}")
        print(f"Workers: {worker_count()}")
        print(f"Output Dir: {cfg.out_dir or '-'}")
        print("")
        print("TRAINING:")
        print(f"  Stage: {cfg.train.stage}  Steps: {cfg.train.steps}  Batch: {cfg.train.batch_size}")
        print(f"  Learning Rate: {cfg.train.resolved_learning_rate():.2e}")
        print(f"  lambda1 / lambda2: {cfg.train.lambda1} / {cfg.train.lambda2}")
        print(f"  Stage-1 Mask Mix: {cfg.train.mask_mix:.2f}")
        print(f"  Stage-2 Guidance Mix: {cfg.train.guidance_mix}")
        print(f"  Denoiser: width {cfg.train.denoiser.width}, depth {cfg.train.denoiser.depth}, "
              f"{cfg.train.denoiser.parameter_count()} parameters")
        print("")
        print("SYNTHESIS:")
        print(f"  Video: {cfg.synth.frames}x{cfg.synth.height}x{cfg.synth.width}x{cfg.synth.channels}")
        print(f"  Background Alignment: {'ENABLED' if cfg.synth.background_alignment else 'DISABLED'}")
        print(f"  Policy: {cfg.policy.mode.value}, point size {cfg.policy.point_size}")
        print("")
        print("BENCH:")
        print(f"  Density Modes: {', '.join(cfg.bench.density_modes)}")
        print(f"  Point Sizes: {cfg.bench.point_sizes}")
        print(f"  Detection: threshold {cfg.bench.threshold}, min blob {cfg.bench.min_blob}")
        print("=" * 60)


def load_snapshot(path: str) -> ConfigurationManager:
    """Rebuild a manager from a resolved_config.json written by an earlier run."""
    return ConfigurationManager(config_file=path)
