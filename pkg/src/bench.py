"""
Point2Insert Bench
Point-response accuracy, background-preservation metrics, warp error and
the evaluation/ablation runner over a grid of guidance policies
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import ndimage

from src.config import SSIM_WINDOW, SSIM_SIGMA, SSIM_K1, SSIM_K2, EWARP_BLOCK, EWARP_SEARCH, DEFAULT_POINT_SIZE
from src.config_manager import BenchConfig, worker_count
from src.datasynth import composite_background
from src.denoiser import DenoiserParams, sample
from src.exceptions import ShapeError, ValidationError
from src.latent_sim import LatentCodec
from src.notifications import log_info
from src.pointmap import (
    DensityMode, PointAnnotation, SamplingPolicy, dilate_and_feather,
    mask_to_point_map, rasterize_points, sample_points_from_mask,
)
from src.storage import DatasetRecord, write_json
from src.tensor_io import SeededRng, VideoTensor, BinaryMask, check_mask, same_shape

METRIC_COLUMNS = ['acc_pos', 'acc_neg', 'mse', 'mae', 'psnr', 'ssim', 'ewarp']
INF_SENTINEL = 'inf'


def detect_inserted_region(output: VideoTensor, source: VideoTensor, threshold: float = 0.08,
                           min_blob: int = 4) -> BinaryMask:
    """Pixels whose max-channel change exceeds threshold, minus 4-connected blobs below min_blob."""
    same_shape(output, source, names=('output', 'source'))
    diff = np.max(np.abs(np.asarray(output, dtype=np.float64) - np.asarray(source, dtype=np.float64)), axis=-1)
    changed = diff > threshold
    mask = np.zeros(changed.shape, dtype=np.uint8)
    for k in range(changed.shape[0]):
        labels, count = ndimage.label(changed[k])
        if count == 0:
            continue
        sizes = np.bincount(labels.ravel())
        keep = sizes >= min_blob
        keep[0] = False
        mask[k] = keep[labels]
    return mask


def point_accuracy(annotations: Sequence[PointAnnotation], predicted_mask: BinaryMask) -> Tuple[float, float]:
    """
    Hit rates of click centres: positives inside the mask, negatives outside.
    acc_neg is NaN when there are no negative clicks.
    """
    predicted_mask = check_mask(predicted_mask)
    positives = [a for a in annotations if a.is_positive]
    negatives = [a for a in annotations if not a.is_positive]
    misses = sum(int(predicted_mask[a.frame, a.row, a.col]) for a in negatives)
    acc_neg = (len(negatives) - misses) / len(negatives) if negatives else float('nan')
    if not positives:
        details = {'negatives': len(negatives)}
        if negatives:
            details['acc_neg'] = acc_neg
        raise ValidationError("Point accuracy needs at least one positive annotation", details=details)
    hits = sum(int(predicted_mask[a.frame, a.row, a.col]) for a in positives)
    return hits / len(positives), acc_neg


@dataclass(frozen=True)
class RegionMetrics:
    mse: float
    mae: float
    psnr: float
    ssim: float


def psnr_from_mse(mse: float) -> float:
    if mse == 0:
        return float('inf')
    return 10.0 * math.log10(1.0 / mse)


def ssim_map(a: VideoTensor, b: VideoTensor) -> np.ndarray:
    """Per-pixel SSIM with an 11x11 Gaussian window (sigma 1.5) applied frame by frame."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    sigma = (0, SSIM_SIGMA, SSIM_SIGMA, 0)
    truncate = (SSIM_WINDOW // 2) / SSIM_SIGMA

    def blur(x):
        return ndimage.gaussian_filter(x, sigma=sigma, truncate=truncate)

    mu_a = blur(a)
    mu_b = blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def region_metrics(a: VideoTensor, b: VideoTensor, region: BinaryMask) -> RegionMetrics:
    """MSE/MAE/PSNR over region pixels; SSIM averaged over windows centred in the region."""
    same_shape(a, b, names=('a', 'b'))
    region = check_mask(region).astype(bool)
    if region.shape != np.shape(a)[:3]:
        raise ShapeError(f"Region {region.shape} does not match video {np.shape(a)}")
    if not region.any():
        raise ValidationError("Metric region is empty")
    diff = np.asarray(a, dtype=np.float64)[region] - np.asarray(b, dtype=np.float64)[region]
    mse = float(np.mean(diff ** 2))
    mae = float(np.mean(np.abs(diff)))
    ssim = float(np.clip(np.mean(ssim_map(a, b)[region]), 0.0, 1.0))
    return RegionMetrics(mse=mse, mae=mae, psnr=psnr_from_mse(mse), ssim=ssim)


def _warp_error(prev: np.ndarray, nxt: np.ndarray, flow: np.ndarray) -> float:
    h, w = prev.shape[:2]
    rows, cols = np.mgrid[0:h, 0:w]
    src_r = np.floor(rows - flow[..., 0] + 0.5).astype(np.int64)
    src_c = np.floor(cols - flow[..., 1] + 0.5).astype(np.int64)
    valid = (src_r >= 0) & (src_r < h) & (src_c >= 0) & (src_c < w)
    if not valid.any():
        return 0.0
    warped = prev[np.clip(src_r, 0, h - 1), np.clip(src_c, 0, w - 1)]
    return float(np.mean(np.abs(nxt - warped)[valid]))


def _search_order(radius: int) -> List[Tuple[int, int]]:
    """Zero displacement first, then by distance, so ties prefer small motion."""
    offsets = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    return sorted(offsets, key=lambda d: (max(abs(d[0]), abs(d[1])), d))


def estimate_flow(prev: np.ndarray, nxt: np.ndarray, block: int = EWARP_BLOCK,
                  search: int = EWARP_SEARCH) -> np.ndarray:
    """Exhaustive block matching: displacement d per block with nxt(p) ~ prev(p - d)."""
    h, w = prev.shape[:2]
    flow = np.zeros((h, w, 2), dtype=np.float64)
    order = _search_order(search)
    for r0 in range(0, h, block):
        for c0 in range(0, w, block):
            r1, c1 = min(r0 + block, h), min(c0 + block, w)
            target = nxt[r0:r1, c0:c1]
            best, best_cost = (0, 0), np.inf
            for dy, dx in order:
                sr0, sc0 = r0 - dy, c0 - dx
                if sr0 < 0 or sc0 < 0 or sr0 + (r1 - r0) > h or sc0 + (c1 - c0) > w:
                    continue
                cost = np.mean(np.abs(target - prev[sr0:sr0 + (r1 - r0), sc0:sc0 + (c1 - c0)]))
                if cost < best_cost:
                    best, best_cost = (dy, dx), cost
            flow[r0:r1, c0:c1] = best
    return flow


def ewarp(video: VideoTensor, flows: Union[str, np.ndarray] = 'estimate') -> float:
    """
    Mean over transitions of mean |frame_{k+1}(p) - frame_k(p - flow_k(p))|
    over validly warped pixels, x100. flows is (f-1, h, w, 2) as (dy, dx),
    'estimate' for block matching, or 'zero'.
    """
    video = np.asarray(video, dtype=np.float64)
    f, h, w = video.shape[:3]
    if f < 2:
        return 0.0
    if isinstance(flows, str):
        if flows not in ('estimate', 'zero'):
            raise ValidationError(f"Unknown flow source '{flows}'")
        if flows == 'zero':
            flows = np.zeros((f - 1, h, w, 2))
        else:
            flows = np.stack([estimate_flow(video[k], video[k + 1]) for k in range(f - 1)])
    flows = np.asarray(flows, dtype=np.float64)
    if flows.shape != (f - 1, h, w, 2):
        raise ShapeError(f"Flows must be {(f - 1, h, w, 2)}, got {flows.shape}")
    errors = [_warp_error(video[k], video[k + 1], flows[k]) for k in range(f - 1)]
    return float(np.mean(errors)) * 100.0


def _json_safe(value: Any) -> Any:
    if isinstance(value, float):
        if math.isnan(value):
            return None
        if math.isinf(value):
            return INF_SENTINEL if value > 0 else '-' + INF_SENTINEL
    if isinstance(value, (np.floating, np.integer)):
        return _json_safe(value.item())
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_json_safe(v) for v in value]
    return value


@dataclass
class EvalReport:
    """Per-record metric rows for one grid cell plus their aggregate means."""
    cell: str
    policy: Dict[str, Any]
    rows: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=['record_id'] + METRIC_COLUMNS))

    def aggregate(self) -> Dict[str, float]:
        summary = {}
        for column in METRIC_COLUMNS:
            values = self.rows[column].astype(float) if column in self.rows else pd.Series(dtype=float)
            summary[column] = float(values.mean()) if values.notna().any() else float('nan')
        summary['records'] = int(len(self.rows))
        return summary

    def to_dict(self) -> Dict[str, Any]:
        return _json_safe({
            'cell': self.cell,
            'policy': self.policy,
            'aggregate': self.aggregate(),
            'rows': self.rows.to_dict(orient='records'),
        })

    def to_table(self) -> str:
        return self.rows.to_string(index=False, float_format=lambda v: f"{v:.4f}")


def reports_table(reports: Dict[str, EvalReport]) -> str:
    """One aligned line per cell with the aggregate metrics."""
    frame = pd.DataFrame([dict(cell=name, **report.aggregate()) for name, report in reports.items()])
    return frame.to_string(index=False, float_format=lambda v: f"{v:.4f}")


def write_reports(reports: Dict[str, EvalReport], out_dir: str, stem: str = 'report') -> Dict[str, str]:
    """JSON for all cells, an aligned text table and a per-record CSV."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        'json': os.path.join(out_dir, f'{stem}.json'),
        'table': os.path.join(out_dir, f'{stem}.txt'),
        'csv': os.path.join(out_dir, f'{stem}_records.csv'),
    }
    write_json(paths['json'], {name: report.to_dict() for name, report in reports.items()})
    with open(paths['table'], 'w', encoding='utf-8') as f:
        f.write(reports_table(reports) + '\n')
    frames = [report.rows.assign(cell=name) for name, report in reports.items()]
    combined = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
    combined.to_csv(paths['csv'], index=False, float_format='%.8g')
    log_info(f"Reports written to {out_dir}")
    return paths


def cell_name(policy: SamplingPolicy) -> str:
    if policy.mode == DensityMode.FULL_MASK:
        return DensityMode.FULL_MASK.value
    return f"{policy.mode.value}/size{policy.point_size}"


def background_region(mask: BinaryMask, margin: int, support: Optional[BinaryMask] = None) -> BinaryMask:
    """
    Complement of the ground-truth mask dilated by margin (square element),
    also excluding the compositing support when one is given.
    """
    mask = check_mask(mask).astype(bool)
    structure = np.ones((1, 2 * margin + 1, 2 * margin + 1), dtype=bool)
    dilated = ndimage.binary_dilation(mask, structure=structure) if margin > 0 else mask
    if support is not None:
        support = check_mask(support).astype(bool)
        if support.shape != dilated.shape:
            raise ShapeError(f"Support {support.shape} does not match mask {dilated.shape}")
        dilated = dilated | support
    return (~dilated).astype(np.uint8)


def compositing_support(guidance: VideoTensor, dilation_radius: int, feather_width: int) -> BinaryMask:
    """Pixels where the feathered guidance lets generated content through."""
    alpha = dilate_and_feather(guidance, dilation_radius, feather_width)
    return (alpha[..., 0] > 0).astype(np.uint8)


def insert_object(params: DenoiserParams, codec: LatentCodec, source: VideoTensor, guidance: VideoTensor,
                  tag: int, steps: int, rng: SeededRng, composite: bool = True,
                  dilation_radius: int = 4, feather_width: int = 4) -> VideoTensor:
    """Sample an insertion for one source video, optionally compositing its background back."""
    z_cond = codec.encode_video(source)
    z_guidance = codec.encode_video(guidance)
    z0 = sample(params, z_cond, z_guidance, tag, steps, rng)
    generated = codec.decode_latent(z0)
    if not composite:
        return generated
    alpha = dilate_and_feather(guidance, dilation_radius, feather_width)
    return composite_background(generated, source, alpha)


def evaluate_record(record: DatasetRecord, params: DenoiserParams, codec: LatentCodec,
                    policy: SamplingPolicy, config: BenchConfig, rng: SeededRng) -> Dict[str, Any]:
    source = record.tensor('x_src')
    mask = record.mask
    channels = source.shape[-1]
    if policy.mode == DensityMode.FULL_MASK:
        guidance = mask_to_point_map(mask, channels)
        # Mask guidance still needs clicks to score
        annotations = sample_points_from_mask(mask, SamplingPolicy.sparse(DEFAULT_POINT_SIZE), rng.substream('clicks'))
    else:
        annotations = sample_points_from_mask(mask, policy, rng.substream('clicks'))
        guidance = rasterize_points(annotations, source.shape)

    output = insert_object(params, codec, source, guidance, record.tag_id, config.sampler_steps,
                           rng.substream('sampler'), config.composite,
                           config.dilation_radius, config.feather_width)
    detected = detect_inserted_region(output, source, config.threshold, config.min_blob)
    acc_pos, acc_neg = point_accuracy(annotations, detected)
    support = compositing_support(guidance, config.dilation_radius, config.feather_width)
    region = background_region(mask, config.region_margin(), support)
    if not region.any():
        raise ValidationError(f"Record {record.record_id} has no background left after dilation")
    metrics = region_metrics(output, source, region)
    return {
        'record_id': record.record_id,
        'acc_pos': acc_pos,
        'acc_neg': acc_neg,
        'mse': metrics.mse,
        'mae': metrics.mae,
        'psnr': metrics.psnr,
        'ssim': metrics.ssim,
        'ewarp': ewarp(output, config.flow),
        'n_pos': sum(1 for a in annotations if a.is_positive),
        'n_neg': sum(1 for a in annotations if not a.is_positive),
        'detected_area': float(detected.mean()),
    }


def run_pointbench(records: Sequence[DatasetRecord], params: DenoiserParams, grid: Sequence[SamplingPolicy],
                   config: Optional[BenchConfig] = None, codec: Optional[LatentCodec] = None,
                   seed: int = 0) -> Dict[str, EvalReport]:
    """One EvalReport per grid cell, every cell scored on the same records."""
    config = config or BenchConfig()
    config.validate()
    if not records:
        raise ValidationError("Bench needs at least one record")
    if config.max_records is not None:
        records = list(records)[:config.max_records]
    codec = codec or LatentCodec(records[0].tensor('x_src').shape[-1], seed=seed)
    root = SeededRng(seed, 'bench')

    reports = {}
    for policy in grid:
        name = cell_name(policy)
        log_info(f"Evaluating cell {name} on {len(records)} records")

        def score(record: DatasetRecord) -> Dict[str, Any]:
            return evaluate_record(record, params, codec, policy, config,
                                   root.substream(f'{name}/{record.record_id}'))

        with ThreadPoolExecutor(max_workers=worker_count()) as executor:
            rows = list(executor.map(score, records))
        reports[name] = EvalReport(cell=name, policy=policy.to_dict(), rows=pd.DataFrame(rows))
    return reports


def ablation_grid(axis: str, config: BenchConfig) -> List[SamplingPolicy]:
    """Policy grid for the grid-only ablation axes."""
    if axis == 'size':
        return [SamplingPolicy(mode=DensityMode.VARIABLE_DENSITY, point_size=size,
                               pos_points_per_kframe=(1, 5), neg_points_per_kframe=(1, 3))
                for size in config.ablation_point_sizes]
    if axis == 'density':
        size = config.point_sizes[0]
        return [
            SamplingPolicy(mode=DensityMode.FIRST_FRAME_ONLY, point_size=size, pos_points_per_kframe=3,
                           neg_points_per_kframe=2),
            SamplingPolicy(mode=DensityMode.FIXED_DENSITY, point_size=size, pos_points_per_kframe=3,
                           neg_points_per_kframe=2),
            SamplingPolicy(mode=DensityMode.VARIABLE_DENSITY, point_size=size, pos_points_per_kframe=(1, 5),
                           neg_points_per_kframe=(1, 3)),
        ]
    raise ValidationError(f"Axis '{axis}' is not a pure policy grid")
