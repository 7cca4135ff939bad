"""
Synthetic training data: rendered scenes with exact object masks, removal
and inpainting oracles, Stage-1/Stage-2 pair assembly and manifests.

Backgrounds live in world coordinates and pan with the camera; objects move
in screen coordinates. The insertion target is always painted last, so its
mask is fully visible and removing it leaves every other pixel untouched.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from src.config import CLASS_TAGS, CLASS_COLORS
from src.config_manager import SynthConfig, worker_count
from src.exceptions import GenerationError, InpaintError, SceneSpecError, ShapeError, ValidationError
from src.notifications import log_info, log_warning
from src.pointmap import (
    DensityMode, SamplingPolicy, dilate_and_feather, mask_to_point_map,
    rasterize_points, sample_points_from_mask,
)
from src.storage import DatasetRecord, DatasetStorage
from src.tensor_io import SeededRng, VideoTensor, BinaryMask, check_mask, same_shape

BACKGROUNDS = ('flat', 'gradient', 'checker', 'noise')
SHAPES = ('disk', 'square')
TRAJECTORIES = ('linear', 'sinusoidal')
CHECKER_CELL = 8
TEXTURE_SIZE = 128


@dataclass
class SceneObject:
    shape: str
    color: Tuple[float, ...]
    size: int                       # disk radius or square side
    start: Tuple[float, float]      # centre (row, col) on frame 0
    velocity: Tuple[float, float] = (0.0, 0.0)
    trajectory: str = 'linear'
    amplitude: float = 0.0          # sinusoidal row wobble, pixels
    period: float = 8.0             # frames
    tag: Optional[str] = None
    partially_visible: bool = False

    def centre(self, k: int) -> Tuple[int, int]:
        row = self.start[0] + k * self.velocity[0]
        col = self.start[1] + k * self.velocity[1]
        if self.trajectory == 'sinusoidal':
            row += self.amplitude * math.sin(2.0 * math.pi * k / self.period)
        return int(math.floor(row + 0.5)), int(math.floor(col + 0.5))

    def extent(self) -> Tuple[int, int]:
        """Pixels covered above/left and below/right of the centre."""
        if self.shape == 'disk':
            return self.size, self.size
        return self.size // 2, self.size - self.size // 2 - 1

    def coverage(self, k: int, h: int, w: int) -> np.ndarray:
        r, c = self.centre(k)
        rr, cc = np.mgrid[0:h, 0:w]
        if self.shape == 'disk':
            return (rr - r) ** 2 + (cc - c) ** 2 <= self.size ** 2
        r0 = r - self.size // 2
        c0 = c - self.size // 2
        return (rr >= r0) & (rr < r0 + self.size) & (cc >= c0) & (cc < c0 + self.size)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['color'] = list(self.color)
        data['start'] = list(self.start)
        data['velocity'] = list(self.velocity)
        return data


@dataclass
class SceneSpec:
    frames: int
    height: int
    width: int
    channels: int = 3
    background: str = 'flat'
    colors: Tuple[Tuple[float, ...], Tuple[float, ...]] = ((0.5, 0.5, 0.5), (0.3, 0.3, 0.3))
    # None draws one from the rng passed to synth_scene, else 0
    texture_seed: Optional[int] = None
    pan: Tuple[float, float] = (0.0, 0.0)
    objects: List[SceneObject] = field(default_factory=list)
    # Index of the insertion target in objects; painted last
    target: int = 0

    def validate(self):
        if self.frames < 1 or self.height < 8 or self.width < 8:
            raise SceneSpecError(f"Scene too small: {self.frames}x{self.height}x{self.width}")
        if self.channels not in (1, 3):
            raise SceneSpecError(f"Scene channels must be 1 or 3, got {self.channels}")
        if self.background not in BACKGROUNDS:
            raise SceneSpecError(f"Unknown background '{self.background}'")
        if self.objects and not 0 <= self.target < len(self.objects):
            raise SceneSpecError(f"Target index {self.target} outside object list")
        for i, obj in enumerate(self.objects):
            if obj.shape not in SHAPES or obj.trajectory not in TRAJECTORIES or obj.size < 1:
                raise SceneSpecError(f"Object {i} is malformed: {obj.to_dict()}")
            if obj.partially_visible:
                continue
            top, bottom = obj.extent()
            for k in range(self.frames):
                r, c = obj.centre(k)
                if r - top < 0 or c - top < 0 or r + bottom >= self.height or c + bottom >= self.width:
                    raise SceneSpecError(f"Object {i} leaves the frame at frame {k} "
                                         f"and is not flagged partially visible")

    @property
    def target_object(self) -> Optional[SceneObject]:
        return self.objects[self.target] if self.objects else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'frames': self.frames, 'height': self.height, 'width': self.width,
            'channels': self.channels, 'background': self.background,
            'colors': [list(c) for c in self.colors], 'texture_seed': self.texture_seed,
            'pan': list(self.pan), 'objects': [o.to_dict() for o in self.objects],
            'target': self.target,
        }


def _color(color: Sequence[float], channels: int) -> np.ndarray:
    color = np.asarray(color, dtype=np.float32)
    if channels == 1:
        return color.mean(keepdims=True)
    return color[:channels]


def _background_plane(spec: SceneSpec, oy: int, ox: int) -> np.ndarray:
    """Intensity in [0, 1] of the background at world offset (oy, ox), shape (h, w)."""
    rows = np.arange(spec.height)[:, None] + oy
    cols = np.arange(spec.width)[None, :] + ox
    if spec.background == 'flat':
        return np.zeros((spec.height, spec.width), dtype=np.float32)
    if spec.background == 'gradient':
        period = 2.0 * (spec.height + spec.width)
        return (0.5 + 0.5 * np.sin(2.0 * np.pi * (rows + cols) / period)).astype(np.float32)
    if spec.background == 'checker':
        return (((rows // CHECKER_CELL) + (cols // CHECKER_CELL)) % 2).astype(np.float32)
    texture = _texture(spec.texture_seed if spec.texture_seed is not None else 0)
    return texture[rows % TEXTURE_SIZE, cols % TEXTURE_SIZE]


def _texture(seed: int) -> np.ndarray:
    gen = SeededRng(seed, 'texture').generator
    noise = ndimage.gaussian_filter(gen.random((TEXTURE_SIZE, TEXTURE_SIZE)), sigma=2.0, mode='wrap')
    lo, hi = noise.min(), noise.max()
    return ((noise - lo) / max(hi - lo, 1e-12)).astype(np.float32)


def render_background(spec: SceneSpec) -> VideoTensor:
    c0 = _color(spec.colors[0], spec.channels)
    c1 = _color(spec.colors[1], spec.channels)
    video = np.empty((spec.frames, spec.height, spec.width, spec.channels), dtype=np.float32)
    for k in range(spec.frames):
        oy = int(math.floor(k * spec.pan[0]))
        ox = int(math.floor(k * spec.pan[1]))
        t = _background_plane(spec, oy, ox)[..., None]
        video[k] = c0 + (c1 - c0) * t
    return np.clip(video, 0.0, 1.0)


def _render(spec: SceneSpec, include_target: bool) -> Tuple[VideoTensor, BinaryMask]:
    spec.validate()
    video = render_background(spec)
    mask = np.zeros((spec.frames, spec.height, spec.width), dtype=np.uint8)
    order = [i for i in range(len(spec.objects)) if i != spec.target]
    if spec.objects and include_target:
        order.append(spec.target)
    for i in order:
        obj = spec.objects[i]
        color = _color(obj.color, spec.channels)
        for k in range(spec.frames):
            covered = obj.coverage(k, spec.height, spec.width)
            video[k][covered] = color
            if i == spec.target:
                mask[k] = covered
    return np.clip(video, 0.0, 1.0), mask


def synth_scene(spec: SceneSpec, rng: Optional[SeededRng] = None) -> Tuple[VideoTensor, BinaryMask, Optional[str]]:
    """
    Render the scene; returns (video, exact target mask, target class tag).
    A noise background without a texture seed takes one from rng and
    records it on spec.
    """
    if rng is not None and spec.background == 'noise' and spec.texture_seed is None:
        spec.texture_seed = int(rng.generator.integers(0, 2 ** 31))
    video, mask = _render(spec, include_target=True)
    target = spec.target_object
    return video, mask, (target.tag if target is not None else None)


def area_fraction(mask: BinaryMask) -> float:
    mask = np.asarray(mask)
    if mask.size == 0:
        return 0.0
    return float(mask.reshape(mask.shape[0], -1).mean(axis=1).mean())


def scale_filter(mask: BinaryMask, low: float = 0.005, high: float = 0.50) -> bool:
    """Accept iff the mean per-frame object area fraction lies in [low, high]."""
    fraction = area_fraction(mask)
    return low <= fraction <= high


def remove_object(x: VideoTensor, m: BinaryMask, spec: SceneSpec, corruption: float = 0.0,
                  rng: Optional[SeededRng] = None) -> VideoTensor:
    """
    Re-render the scene without its target. With corruption > 0 the result
    gets smoothed noise of that std-dev, emulating an imperfect remover.
    """
    same_shape(x[..., 0], m, names=('x', 'm'))
    removed, _ = _render(spec, include_target=False)
    if corruption > 0:
        if rng is None:
            raise ValidationError("Corrupted removal needs an rng")
        noise = rng.generator.standard_normal(removed.shape).astype(np.float32)
        noise = ndimage.gaussian_filter(noise, sigma=(0, 1.0, 1.0, 0)) * np.float32(corruption)
        removed = np.clip(removed + noise, 0.0, 1.0).astype(np.float32)
    return removed


def masked_video(x: VideoTensor, m: BinaryMask) -> VideoTensor:
    """x * (1 - m), the mask broadcast over channels."""
    x = np.asarray(x)
    m = np.asarray(m)
    if m.shape != x.shape[:3]:
        raise ShapeError(f"Mask {m.shape} does not match video {x.shape}")
    return (x * (1 - m[..., None]).astype(x.dtype)).astype(np.float32)


def _neighbour_mean(img: np.ndarray) -> np.ndarray:
    """Mean of the in-frame 4-neighbours of every pixel, img shape (h, w, c)."""
    total = np.zeros_like(img)
    count = np.zeros(img.shape[:2] + (1,), dtype=img.dtype)
    total[1:] += img[:-1]
    count[1:] += 1
    total[:-1] += img[1:]
    count[:-1] += 1
    total[:, 1:] += img[:, :-1]
    count[:, 1:] += 1
    total[:, :-1] += img[:, 1:]
    count[:, :-1] += 1
    return total / count


def boundary_pixels(frame_mask: np.ndarray) -> np.ndarray:
    """Unmasked pixels with at least one masked 4-neighbour."""
    cross = ndimage.generate_binary_structure(2, 1)
    return ndimage.binary_dilation(frame_mask, structure=cross) & ~frame_mask


def traditional_inpaint(x: VideoTensor, m: BinaryMask, iterations: int = 500,
                        tolerance: float = 1e-4) -> VideoTensor:
    """
    Jacobi diffusion fill per frame: masked pixels start at the mean of the
    mask boundary and are repeatedly replaced by the mean of their 4-neighbours
    until the largest update is below tolerance or the iteration cap is hit.
    """
    m = check_mask(m)
    x = np.asarray(x, dtype=np.float32)
    if m.shape != x.shape[:3]:
        raise ShapeError(f"Mask {m.shape} does not match video {x.shape}")
    if iterations < 1:
        raise ValidationError(f"iterations must be >= 1, got {iterations}")

    out = x.copy()
    for k in range(x.shape[0]):
        hole = m[k].astype(bool)
        if not hole.any():
            continue
        if hole.all():
            raise InpaintError(f"Frame {k} is fully masked, nothing to inpaint from")
        frame = x[k].astype(np.float64)
        frame[hole] = frame[boundary_pixels(hole)].mean(axis=0)
        for _ in range(iterations):
            updated = _neighbour_mean(frame)
            delta = np.max(np.abs(updated[hole] - frame[hole]))
            frame[hole] = updated[hole]
            if delta < tolerance:
                break
        out[k][hole] = frame[hole].astype(np.float32)
    return out


def composite_background(generated: VideoTensor, source: VideoTensor, alpha: np.ndarray) -> VideoTensor:
    """alpha * generated + (1 - alpha) * source; alpha may omit the channel axis."""
    generated = np.asarray(generated, dtype=np.float32)
    source = np.asarray(source, dtype=np.float32)
    same_shape(generated, source, names=('generated', 'source'))
    alpha = np.asarray(alpha, dtype=np.float32)
    if alpha.ndim == generated.ndim - 1:
        alpha = alpha[..., None]
    if alpha.shape[:-1] != generated.shape[:-1] or alpha.shape[-1] not in (1, generated.shape[-1]):
        raise ShapeError(f"Alpha {alpha.shape} does not match video {generated.shape}")
    if alpha.size and (alpha.min() < 0.0 or alpha.max() > 1.0):
        raise ValidationError("Alpha must lie in [0, 1]")
    return (alpha * generated + (np.float32(1.0) - alpha) * source).astype(np.float32)


def _place(obj: SceneObject, frames: int, h: int, w: int, gen: np.random.Generator) -> bool:
    """Pick a start so the whole trajectory stays in frame; False if impossible."""
    top, bottom = obj.extent()
    rows, cols = [], []
    for k in range(frames):
        dr = k * obj.velocity[0]
        if obj.trajectory == 'sinusoidal':
            dr += obj.amplitude * math.sin(2.0 * math.pi * k / obj.period)
        rows.append(dr)
        cols.append(k * obj.velocity[1])
    r_lo, r_hi = top - min(rows) + 0.5, h - 1 - bottom - max(rows) - 0.5
    c_lo, c_hi = top - min(cols) + 0.5, w - 1 - bottom - max(cols) - 0.5
    if r_lo > r_hi or c_lo > c_hi:
        return False
    obj.start = (float(gen.uniform(r_lo, r_hi)), float(gen.uniform(c_lo, c_hi)))
    return True


def random_object(tag: str, cfg: SynthConfig, gen: np.random.Generator, partial: bool = False) -> SceneObject:
    shape = 'disk' if tag.endswith('disk') else 'square'
    size = int(gen.integers(6, 13)) if shape == 'disk' else int(gen.integers(12, 25))
    trajectory = TRAJECTORIES[int(gen.integers(len(TRAJECTORIES)))]
    obj = SceneObject(
        shape=shape, color=CLASS_COLORS[tag], size=size, start=(0.0, 0.0),
        velocity=(float(gen.uniform(-1.5, 1.5)), float(gen.uniform(-1.5, 1.5))),
        trajectory=trajectory,
        amplitude=float(gen.uniform(0.0, 3.0)) if trajectory == 'sinusoidal' else 0.0,
        tag=tag,
    )
    if partial:
        obj.start = (float(gen.uniform(0, cfg.height)), float(gen.uniform(0, cfg.width)))
        obj.partially_visible = True
        return obj
    if not _place(obj, cfg.frames, cfg.height, cfg.width, gen):
        obj.velocity = (0.0, 0.0)
        obj.amplitude = 0.0
        if not _place(obj, cfg.frames, cfg.height, cfg.width, gen):
            raise SceneSpecError(f"{tag} of size {size} cannot fit a {cfg.height}x{cfg.width} frame")
    return obj


def random_scene_spec(rng: SeededRng, tag: str, cfg: SynthConfig) -> SceneSpec:
    """A random single-target scene of the given class with a few distractors."""
    gen = rng.generator
    background = BACKGROUNDS[int(gen.integers(len(BACKGROUNDS)))]
    colors = (tuple(float(v) for v in gen.uniform(0.2, 0.6, 3)),
              tuple(float(v) for v in gen.uniform(0.2, 0.6, 3)))
    pan = (float(gen.uniform(-cfg.max_pan, cfg.max_pan)), float(gen.uniform(-cfg.max_pan, cfg.max_pan)))
    others = [t for t in CLASS_TAGS if t != tag]
    distractors = [random_object(others[int(gen.integers(len(others)))], cfg, gen, partial=cfg.allow_partial)
                   for _ in range(int(gen.integers(0, cfg.max_distractors + 1)))]
    target = random_object(tag, cfg, gen)
    return SceneSpec(
        frames=cfg.frames, height=cfg.height, width=cfg.width, channels=cfg.channels,
        background=background, colors=colors, texture_seed=int(gen.integers(0, 2 ** 31)),
        pan=pan, objects=distractors + [target], target=len(distractors),
    )


def _guidance(mask: BinaryMask, policy: SamplingPolicy, rng: SeededRng, channels: int):
    """(point map or mask video, annotations or None) for one record."""
    if policy.mode == DensityMode.FULL_MASK:
        return mask_to_point_map(mask, channels), None
    annotations = sample_points_from_mask(mask, policy, rng)
    return rasterize_points(annotations, mask.shape + (channels,)), annotations


def _assemble(index: int, tag: str, stage: int, policy: SamplingPolicy, rng: SeededRng,
              cfg: SynthConfig) -> Optional[DatasetRecord]:
    for attempt in range(cfg.retry_budget):
        attempt_rng = rng.substream(f'attempt{attempt}')
        spec = random_scene_spec(attempt_rng.substream('scene'), tag, cfg)
        x, m, _ = synth_scene(spec)
        if not scale_filter(m, cfg.scale_low, cfg.scale_high):
            log_warning(f"Scene {index} attempt {attempt} rejected by scale filter "
                        f"(area {area_fraction(m):.4f})")
            continue

        guidance, annotations = _guidance(m, policy, attempt_rng.substream('points'), cfg.channels)
        mask_video = m[..., None].astype(np.float32)
        tensors = {'mask': mask_video}
        if stage == 1:
            tensors['x'] = x
            tensors['x_m'] = masked_video(x, m)
            tensors['x_inp'] = traditional_inpaint(x, m, cfg.inpaint_iterations, cfg.inpaint_tolerance)
        else:
            x_src = remove_object(x, m, spec, cfg.removal_corruption, attempt_rng.substream('corruption'))
            target = x
            if cfg.background_alignment:
                alpha = dilate_and_feather(guidance, cfg.dilation_radius, cfg.feather_width)
                # Never cut into the object itself
                alpha = np.maximum(alpha, mask_video)
                target = composite_background(x, x_src, alpha)
            tensors['x'] = target
            tensors['x_src'] = x_src
            tensors['x_m'] = masked_video(target, m)
        if annotations is not None:
            tensors['x_p'] = guidance

        return DatasetRecord(
            record_id=f"rec{index:05d}", stage=stage, class_tag=tag, tag_id=CLASS_TAGS.index(tag),
            tensors=tensors, annotations=annotations, scene=spec.to_dict(),
            area_fraction=area_fraction(m),
        )
    return None


def synthesize_records(count: int, stage: int, policy: SamplingPolicy, rng: SeededRng,
                       synth_config: Optional[SynthConfig] = None) -> List[DatasetRecord]:
    """Generate records in memory; class tags are scheduled round-robin."""
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    if stage not in (1, 2):
        raise ValidationError(f"stage must be 1 or 2, got {stage}")
    cfg = synth_config or SynthConfig()
    cfg.validate()
    policy.validate()
    root = rng.substream(f'synth/stage{stage}')

    def build(index: int) -> Optional[DatasetRecord]:
        tag = CLASS_TAGS[index % len(CLASS_TAGS)]
        return _assemble(index, tag, stage, policy, root.substream(f'record{index}'), cfg)

    with ThreadPoolExecutor(max_workers=worker_count()) as executor:
        records = list(executor.map(build, range(count)))

    failed = [i for i, r in enumerate(records) if r is None]
    if failed:
        raise GenerationError(f"No scene admitted within {cfg.retry_budget} attempts for records {failed}",
                              details={'retry_budget': cfg.retry_budget})
    return records


def _manifest_entries(record: DatasetRecord, refs: Dict[str, str]) -> List[Dict[str, Any]]:
    has_points = 'x_p' in refs
    base = {
        'scene_id': record.record_id,
        'stage': record.stage,
        'class_tag': record.class_tag,
        'tag_id': record.tag_id,
        'area_fraction': record.area_fraction,
    }
    annotations_ref = f"records/{record.record_id}/annotations.json" if has_points else None
    if record.stage == 1:
        return [
            dict(base, record_id=f"{record.record_id}-mask", guidance_type='mask',
                 files={'source': refs['x_m'], 'guidance': refs['mask'], 'target': refs['x']}),
            dict(base, record_id=f"{record.record_id}-points", guidance_type='points' if has_points else 'mask',
                 files={'source': refs['x_inp'], 'guidance': refs['x_p' if has_points else 'mask'],
                        'target': refs['x'], 'annotations': annotations_ref}),
        ]
    return [dict(base, record_id=record.record_id, guidance_type='points' if has_points else 'mask',
                 files={'source': refs['x_src'], 'guidance': refs['x_p' if has_points else 'mask'],
                        'target': refs['x'], 'masked': refs['x_m'], 'mask': refs['mask'],
                        'annotations': annotations_ref})]


def build_dataset(count: int, stage: int, policy: SamplingPolicy, rng: SeededRng, out_dir: str,
                  synth_config: Optional[SynthConfig] = None) -> Dict[str, Any]:
    """Synthesize, save and index a dataset; returns the manifest."""
    cfg = synth_config or SynthConfig()
    records = synthesize_records(count, stage, policy, rng, cfg)
    storage = DatasetStorage(out_dir)
    entries = []
    for record in records:
        entries.extend(_manifest_entries(record, storage.save_record(record)))
    manifest = {
        'dataset_id': f"p2i-stage{stage}-seed{rng.seed}-n{count}",
        'master_seed': rng.seed,
        'stage': stage,
        'policy': policy.to_dict(),
        'synth': asdict(cfg),
        'class_tags': list(CLASS_TAGS),
        'records': entries,
    }
    storage.write_manifest(manifest)
    log_info(f"Built stage {stage} dataset: {count} scenes, {len(entries)} records")
    return manifest
