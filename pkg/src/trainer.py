"""
Two-stage training: a mask/point-guided teacher (Stage 1), then a
point-guided student distilled from the frozen teacher (Stage 2).
"""

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.config_manager import TrainConfig, GUIDANCE_KINDS
from src.denoiser import (
    DenoiserParams, LossSpec, OptimizerState, TrainingExample,
    adamw_step, backward, forward, init_params,
)
from src.exceptions import Point2InsertError, ShapeError, ValidationError
from src.flowmatch_losses import noisy_latent, velocity_target
from src.latent_sim import LatentCodec, pool_pointmap, weight_map
from src.notifications import log_info, alert_step
from src.pointmap import SamplingPolicy, mask_to_point_map, rasterize_points, sample_points_from_mask
from src.storage import DatasetRecord
from src.tensor_io import SeededRng, gaussian_noise


@dataclass
class PreparedRecord:
    """Latents that stay fixed across draws; point guidance is re-sampled online."""
    record_id: str
    tag_id: int
    mask: np.ndarray
    channels: int
    z: np.ndarray
    z_masked: np.ndarray
    z_mask: np.ndarray
    z_inpainted: Optional[np.ndarray] = None
    z_source: Optional[np.ndarray] = None


@dataclass
class TrainResult:
    params: DenoiserParams
    opt_state: OptimizerState
    log: List[Dict] = field(default_factory=list)
    guidance_counts: Dict[str, int] = field(default_factory=dict)


def prepare_records(records: Sequence[DatasetRecord], codec: LatentCodec, stage: int) -> List[PreparedRecord]:
    if not records:
        raise ValidationError("Training dataset is empty")
    prepared = []
    for record in records:
        x = record.tensor('x')
        mask = record.mask
        entry = PreparedRecord(
            record_id=record.record_id,
            tag_id=record.tag_id,
            mask=mask,
            channels=x.shape[-1],
            z=codec.encode_video(x),
            z_masked=codec.encode_video(record.tensor('x_m')),
            z_mask=codec.encode_video(mask_to_point_map(mask, x.shape[-1])),
        )
        if stage == 1:
            entry.z_inpainted = codec.encode_video(record.tensor('x_inp'))
        else:
            entry.z_source = codec.encode_video(record.tensor('x_src'))
        prepared.append(entry)
    return prepared


def _check_stage1_dataset(records: Sequence[DatasetRecord]):
    for record in records:
        missing = [name for name in ('x', 'x_m', 'x_inp', 'mask') if name not in record.tensors]
        if missing:
            raise ValidationError(f"Stage-1 record {record.record_id} lacks masked/inpainted pair tensors {missing}")


def _check_stage2_dataset(records: Sequence[DatasetRecord]):
    for record in records:
        missing = [name for name in ('x', 'x_src', 'x_m', 'mask') if name not in record.tensors]
        if missing:
            raise ValidationError(f"Stage-2 record {record.record_id} lacks tensors {missing}")


def _point_guidance(record: PreparedRecord, policy: SamplingPolicy, codec: LatentCodec, rng: SeededRng):
    """Fresh clicks from the ground-truth mask: (z_p, pixel point map)."""
    annotations = sample_points_from_mask(record.mask, policy, rng)
    point_map = rasterize_points(annotations, record.mask.shape + (record.channels,))
    return codec.encode_video(point_map), point_map


def _choose(mix: Dict[str, float], kinds: Sequence[str], rng: SeededRng) -> str:
    u = rng.generator.random()
    cumulative = 0.0
    for kind in kinds:
        cumulative += mix.get(kind, 0.0)
        if u < cumulative:
            return kind
    return [k for k in kinds if mix.get(k, 0.0) > 0][-1]


class _StepLog:
    """JSON-lines training log plus periodic console alerts."""

    def __init__(self, stage: int, log_path: Optional[str], log_every: int):
        self.stage = stage
        self.rows: List[Dict] = []
        self.log_every = log_every
        self._file = None
        if log_path:
            os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
            self._file = open(log_path, 'w', encoding='utf-8')

    def record(self, step: int, breakdown, counts: Dict[str, int], lr: float):
        row = {'stage': self.stage, 'step': step, 'lr': lr, 'guidance': counts}
        row.update(breakdown.to_dict())
        self.rows.append(row)
        if self._file:
            self._file.write(json.dumps(row, sort_keys=True) + '\n')
        if step % self.log_every == 0:
            alert_step(self.stage, step, breakdown)

    def close(self):
        if self._file:
            self._file.close()
            self._file = None


def _initial_params(config: TrainConfig, init: Optional[DenoiserParams], rng: SeededRng) -> DenoiserParams:
    if init is not None:
        return init.copy()
    return init_params(config.denoiser, rng)


def train_stage1(config: TrainConfig, dataset: Sequence[DatasetRecord], codec: Optional[LatentCodec] = None,
                 init: Optional[DenoiserParams] = None, log_path: Optional[str] = None) -> TrainResult:
    """
    Teacher training on L_fm only. Each example is mask-guided with
    probability mask_mix (z_cond = E(x_m), z_guidance = E(mask)) and
    point-guided otherwise (z_cond = E(x_inp), z_guidance = E(x_p) with x_p
    freshly sampled from the mask).
    """
    config.validate()
    if not dataset:
        raise ValidationError("Training dataset is empty")
    _check_stage1_dataset(dataset)
    rng = SeededRng(config.seed, 'train/stage1')
    codec = codec or LatentCodec(dataset[0].tensor('x').shape[-1], seed=config.seed)
    records = prepare_records(dataset, codec, stage=1)

    params = _initial_params(config, init, rng)
    state = OptimizerState.zeros(params)
    spec = LossSpec.flow_matching_only(config.reduction)
    lr = config.resolved_learning_rate()
    mix = config.stage1_mix()
    streams = {name: rng.substream(name) for name in ('data', 'guidance', 'points', 'time', 'noise')}
    counts = {'mask': 0, 'points': 0}
    log = _StepLog(1, log_path, config.log_every)
    log_info(f"Stage 1: {len(records)} records, {config.steps} steps, lr {lr:.2e}, mask mix {config.mask_mix:.2f}")

    try:
        for step in range(1, config.steps + 1):
            batch = []
            step_counts = {'mask': 0, 'points': 0}
            for _ in range(config.batch_size):
                record = records[int(streams['data'].generator.integers(len(records)))]
                kind = _choose(mix, ('mask', 'points'), streams['guidance'])
                if kind == 'mask':
                    z_cond, z_guidance = record.z_masked, record.z_mask
                else:
                    z_guidance, _ = _point_guidance(record, config.policy, codec, streams['points'])
                    z_cond = record.z_inpainted
                step_counts[kind] += 1
                t = float(streams['time'].generator.random())
                eps = gaussian_noise(record.z.shape, streams['noise'])
                batch.append(TrainingExample(
                    z_cond=z_cond, z_guidance=z_guidance, z_t=noisy_latent(record.z, eps, t), t=t,
                    tag=record.tag_id, v_target=velocity_target(record.z, eps),
                ))
            breakdown, grads = backward(params, batch, spec, step=step)
            params, state = adamw_step(params, grads, state, lr, config.beta1, config.beta2, config.weight_decay)
            for kind, n in step_counts.items():
                counts[kind] += n
            log.record(step, breakdown, step_counts, lr)
    finally:
        log.close()

    log_info(f"Stage 1 finished: {counts['mask']} mask-guided, {counts['points']} point-guided examples")
    return TrainResult(params=params, opt_state=state, log=log.rows, guidance_counts=counts)


def _stage2_guidance(kind: str, record: PreparedRecord, point_size: int, codec: LatentCodec, rng: SeededRng):
    if kind == 'mask':
        return record.z_mask, mask_to_point_map(record.mask, record.channels)
    policy = SamplingPolicy.sparse(point_size) if kind == 'sparse' else SamplingPolicy.dense(point_size)
    return _point_guidance(record, policy, codec, rng)


def train_stage2(config: TrainConfig, dataset: Sequence[DatasetRecord], teacher: DenoiserParams,
                 codec: Optional[LatentCodec] = None, init: Optional[DenoiserParams] = None,
                 log_path: Optional[str] = None) -> TrainResult:
    """
    Student fine-tuning with L_fm + lambda1 L_etd + lambda2 L_pa. The student
    sees (E(x_src), z_p); the frozen teacher sees (E(x_m), E(mask)) on the
    same z_t and t. The student starts from the teacher unless init is given.
    """
    config.validate()
    if not dataset:
        raise ValidationError("Training dataset is empty")
    _check_stage2_dataset(dataset)
    codec = codec or LatentCodec(dataset[0].tensor('x').shape[-1], seed=config.seed)
    records = prepare_records(dataset, codec, stage=2)

    rng = SeededRng(config.seed, 'train/stage2')
    params = _initial_params(config, init if init is not None else teacher, rng)
    if params.config != teacher.config:
        raise ShapeError("Teacher and student architectures differ",
                         details={'teacher': vars(teacher.config), 'student': vars(params.config)})
    teacher_digest = teacher.digest()
    state = OptimizerState.zeros(params)
    spec = LossSpec(config.lambda1, config.lambda2, config.reduction, config.weight_etd)
    lr = config.resolved_learning_rate()
    streams = {name: rng.substream(name) for name in ('data', 'guidance', 'points', 'time', 'noise')}
    counts = {kind: 0 for kind in GUIDANCE_KINDS}
    log = _StepLog(2, log_path, config.log_every)
    log_info(f"Stage 2: {len(records)} records, {config.steps} steps, lr {lr:.2e}, "
             f"lambda1 {config.lambda1}, lambda2 {config.lambda2}")

    try:
        for step in range(1, config.steps + 1):
            batch = []
            step_counts = {kind: 0 for kind in GUIDANCE_KINDS}
            for _ in range(config.batch_size):
                record = records[int(streams['data'].generator.integers(len(records)))]
                kind = _choose(config.guidance_mix, GUIDANCE_KINDS, streams['guidance'])
                step_counts[kind] += 1
                z_guidance, point_map = _stage2_guidance(kind, record, config.point_size, codec, streams['points'])
                t = float(streams['time'].generator.random())
                eps = gaussian_noise(record.z.shape, streams['noise'])
                z_t = noisy_latent(record.z, eps, t)
                # Teacher output enters the loss as a constant
                v_teacher = forward(teacher, record.z_masked, record.z_mask, z_t, t, record.tag_id)
                batch.append(TrainingExample(
                    z_cond=record.z_source, z_guidance=z_guidance, z_t=z_t, t=t, tag=record.tag_id,
                    v_target=velocity_target(record.z, eps), v_teacher=v_teacher,
                    weight=weight_map(pool_pointmap(point_map)),
                ))
            breakdown, grads = backward(params, batch, spec, step=step)
            params, state = adamw_step(params, grads, state, lr, config.beta1, config.beta2, config.weight_decay)
            for kind, n in step_counts.items():
                counts[kind] += n
            log.record(step, breakdown, step_counts, lr)
    finally:
        log.close()

    if teacher.digest() != teacher_digest:
        raise Point2InsertError("Teacher parameters changed during Stage 2")
    log_info(f"Stage 2 finished: guidance counts {counts}")
    return TrainResult(params=params, opt_state=state, log=log.rows, guidance_counts=counts)


def distillation_gap(student: DenoiserParams, teacher: DenoiserParams, records: Sequence[DatasetRecord],
                     codec: LatentCodec, rng: SeededRng, point_size: int = 10,
                     draws_per_record: int = 2) -> float:
    """Held-out mean ||v_S - v_T||^2 over fixed sparse clicks, timesteps and noise."""
    prepared = prepare_records(records, codec, stage=2)
    gap_rng = rng.substream('distillation_gap')
    policy = SamplingPolicy.sparse(point_size)
    gaps = []
    for record in prepared:
        for _ in range(draws_per_record):
            z_guidance, _ = _point_guidance(record, policy, codec, gap_rng)
            t = float(gap_rng.generator.random())
            eps = gaussian_noise(record.z.shape, gap_rng)
            z_t = noisy_latent(record.z, eps, t)
            v_s = forward(student, record.z_source, z_guidance, z_t, t, record.tag_id)
            v_t = forward(teacher, record.z_masked, record.z_mask, z_t, t, record.tag_id)
            gaps.append(float(np.mean((v_s - v_t) ** 2)))
    return float(np.mean(gaps))


def loss_trend(log_rows: Sequence[Dict], window: int = 100, key: str = 'l_fm') -> Dict[str, float]:
    """Leading vs trailing window means of a logged loss component."""
    values = [row[key] for row in log_rows]
    if len(values) < 2:
        raise ValidationError("Need at least two logged steps for a trend")
    window = min(window, len(values) // 2)
    return {'leading': float(np.mean(values[:window])), 'trailing': float(np.mean(values[-window:]))}
