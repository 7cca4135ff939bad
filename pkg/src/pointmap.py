"""
Point maps: click annotations, dense rasterisation, sampling from masks,
convex-hull masks for mask-only consumers, and the dilate-and-feather alpha
used for background alignment
"""

import json
import math
from dataclasses import dataclass, asdict, replace
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

from src.config import (
    POSITIVE_VALUE, NEGATIVE_VALUE, BACKGROUND_VALUE, DEFAULT_POINT_SIZE,
    KEYFRAME_INTERVAL, SPARSE_MAX_POINTS, DENSE_COVERAGE,
)
from src.exceptions import SamplingError, ValidationError
from src.notifications import log_warning
from src.tensor_io import SeededRng, VideoTensor, BinaryMask, check_mask

Count = Union[int, Tuple[int, int]]


class Polarity(str, Enum):
    POSITIVE = 'pos'
    NEGATIVE = 'neg'


class DensityMode(str, Enum):
    FIRST_FRAME_ONLY = 'first_frame_only'
    FIXED_DENSITY = 'fixed_density'
    VARIABLE_DENSITY = 'variable_density'
    FULL_MASK = 'full_mask'


@dataclass(frozen=True)
class PointAnnotation:
    """One click: keyframe, pixel centre, polarity and square side."""
    frame: int
    row: int
    col: int
    polarity: Polarity
    size: int = DEFAULT_POINT_SIZE

    @property
    def is_positive(self) -> bool:
        return self.polarity == Polarity.POSITIVE

    def square(self, h: int, w: int) -> Tuple[int, int, int, int]:
        """Clipped (r0, r1, c0, c1) half-open bounds of the painted square."""
        r0 = self.row - self.size // 2
        c0 = self.col - self.size // 2
        return max(r0, 0), min(r0 + self.size, h), max(c0, 0), min(c0 + self.size, w)

    def to_dict(self) -> Dict:
        return {'frame': self.frame, 'row': self.row, 'col': self.col,
                'polarity': self.polarity.value, 'size': self.size}

    @classmethod
    def from_dict(cls, data: Dict) -> 'PointAnnotation':
        try:
            return cls(frame=int(data['frame']), row=int(data['row']), col=int(data['col']),
                       polarity=Polarity(data['polarity']), size=int(data['size']))
        except (KeyError, ValueError, TypeError) as e:
            raise ValidationError(f"Malformed annotation {data!r}: {e}")


@dataclass
class SamplingPolicy:
    mode: DensityMode = DensityMode.FIXED_DENSITY
    keyframe_interval: int = KEYFRAME_INTERVAL
    pos_points_per_kframe: Count = 3
    neg_points_per_kframe: Count = 2
    point_size: int = DEFAULT_POINT_SIZE
    negative_placement: str = 'uniform'
    # When > 0, positives per keyframe are raised until their squares cover
    # this fraction of the mask
    dense_coverage: float = 0.0

    def __post_init__(self):
        self.mode = DensityMode(self.mode)
        if isinstance(self.pos_points_per_kframe, list):
            self.pos_points_per_kframe = tuple(self.pos_points_per_kframe)
        if isinstance(self.neg_points_per_kframe, list):
            self.neg_points_per_kframe = tuple(self.neg_points_per_kframe)
        self.validate()

    def validate(self):
        if self.keyframe_interval < 1:
            raise ValidationError(f"keyframe_interval must be >= 1, got {self.keyframe_interval}")
        if self.point_size < 1:
            raise ValidationError(f"point_size must be >= 1, got {self.point_size}")
        if self.negative_placement not in ('uniform', 'boundary'):
            raise ValidationError(f"Unknown negative_placement '{self.negative_placement}'")
        if not 0.0 <= self.dense_coverage <= 1.0:
            raise ValidationError(f"dense_coverage must be in [0,1], got {self.dense_coverage}")
        for name in ('pos_points_per_kframe', 'neg_points_per_kframe'):
            lo, hi = _count_range(getattr(self, name))
            if lo < 0 or hi < lo:
                raise ValidationError(f"{name} must be a count or an ordered range >= 0")
        if self.mode != DensityMode.FULL_MASK:
            if _count_range(self.pos_points_per_kframe)[1] < 1 and self.dense_coverage <= 0:
                raise ValidationError("Insertion needs at least one positive point per keyframe")

    @classmethod
    def sparse(cls, point_size: int = DEFAULT_POINT_SIZE, **overrides) -> 'SamplingPolicy':
        return cls(mode=DensityMode.VARIABLE_DENSITY, pos_points_per_kframe=(1, SPARSE_MAX_POINTS),
                   neg_points_per_kframe=(0, 2), point_size=point_size, **overrides)

    @classmethod
    def dense(cls, point_size: int = DEFAULT_POINT_SIZE, **overrides) -> 'SamplingPolicy':
        return cls(mode=DensityMode.VARIABLE_DENSITY, pos_points_per_kframe=(SPARSE_MAX_POINTS + 1, 8),
                   neg_points_per_kframe=(1, 3), point_size=point_size,
                   dense_coverage=DENSE_COVERAGE, **overrides)

    @classmethod
    def full_mask(cls) -> 'SamplingPolicy':
        return cls(mode=DensityMode.FULL_MASK)

    def with_size(self, point_size: int) -> 'SamplingPolicy':
        return replace(self, point_size=point_size)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['mode'] = self.mode.value
        for name in ('pos_points_per_kframe', 'neg_points_per_kframe'):
            if isinstance(data[name], tuple):
                data[name] = list(data[name])
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'SamplingPolicy':
        return cls(**data)


def _count_range(count: Count) -> Tuple[int, int]:
    if isinstance(count, (tuple, list)):
        lo, hi = count
        return int(lo), int(hi)
    return int(count), int(count)


def _draw_count(count: Count, rng: SeededRng) -> int:
    lo, hi = _count_range(count)
    if lo == hi:
        return lo
    return int(rng.generator.integers(lo, hi + 1))


def validate_annotations(annotations: Iterable[PointAnnotation], dims: Sequence[int]) -> None:
    f, h, w = dims[:3]
    for a in annotations:
        if not (0 <= a.frame < f and 0 <= a.row < h and 0 <= a.col < w) or a.size < 1:
            raise ValidationError(f"Annotation out of bounds for dims {tuple(dims)}: {a.to_dict()}")


def rasterize_points(annotations: Sequence[PointAnnotation], dims: Sequence[int]) -> VideoTensor:
    """
    Paint each annotation as a size x size square on its own frame.
    Positives are 1.0, negatives 0.5, everything else 0.0; where squares of
    opposite polarity overlap the positive wins.
    """
    f, h, w, c = (int(d) for d in dims)
    validate_annotations(annotations, dims)

    plane = np.full((f, h, w), BACKGROUND_VALUE, dtype=np.float32)
    ordered = sorted(annotations, key=lambda a: a.is_positive)
    for a in ordered:
        r0, r1, c0, c1 = a.square(h, w)
        plane[a.frame, r0:r1, c0:c1] = POSITIVE_VALUE if a.is_positive else NEGATIVE_VALUE

    return np.repeat(plane[..., None], c, axis=3)


def keyframes_for(policy: SamplingPolicy, num_frames: int) -> List[int]:
    if policy.mode == DensityMode.FIRST_FRAME_ONLY:
        return [0]
    return list(range(0, num_frames, policy.keyframe_interval))


def square_fit_map(frame_mask: np.ndarray, size: int) -> np.ndarray:
    """Centres whose full size x size square lies inside the mask."""
    h, w = frame_mask.shape
    fits = np.zeros((h, w), dtype=bool)
    if size > h or size > w:
        return fits
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(frame_mask.astype(np.int64), axis=0), axis=1)
    box = (integral[size:, size:] - integral[:-size, size:]
           - integral[size:, :-size] + integral[:-size, :-size])
    half = size // 2
    fits[half:half + box.shape[0], half:half + box.shape[1]] = box == size * size
    return fits


def chebyshev_distance_to(region: np.ndarray) -> np.ndarray:
    """Chessboard distance from each pixel to the nearest True pixel of region (inf if none)."""
    if not region.any():
        return np.full(region.shape, np.inf)
    return ndimage.distance_transform_cdt(~region, metric='chessboard').astype(np.float64)


def _pick(candidates: np.ndarray, count: int, rng: SeededRng) -> np.ndarray:
    rows, cols = np.nonzero(candidates)
    if count == 0 or rows.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    chosen = rng.generator.choice(rows.size, size=count, replace=count > rows.size)
    return np.stack([rows[chosen], cols[chosen]], axis=1)


def sample_points_from_mask(mask: BinaryMask, policy: SamplingPolicy,
                            rng: SeededRng) -> List[PointAnnotation]:
    """
    Draw clicks on keyframes 0, k, 2k, ... from a ground-truth mask.

    Positives come from mask pixels whose whole square fits in the mask
    (falling back to any mask pixel on keyframes where no square fits).
    Negatives come from background pixels at Chebyshev distance >= point_size
    from the mask, or from the ring [size, 3*size) for boundary placement.
    FULL_MASK returns no annotations: the mask itself is the guidance.
    """
    mask = check_mask(mask)
    if policy.mode == DensityMode.FULL_MASK:
        return []

    size = policy.point_size
    n_pos = _draw_count(policy.pos_points_per_kframe, rng)
    n_neg = _draw_count(policy.neg_points_per_kframe, rng)

    annotations: List[PointAnnotation] = []
    any_positive_source = False
    for k in keyframes_for(policy, mask.shape[0]):
        frame_mask = mask[k].astype(bool)

        eligible = square_fit_map(frame_mask, size)
        if not eligible.any():
            eligible = frame_mask
        if eligible.any():
            any_positive_source = True
            count = n_pos
            if policy.dense_coverage > 0:
                needed = math.ceil(policy.dense_coverage * frame_mask.sum() / float(size * size))
                count = max(count, needed)
            for r, c in _pick(eligible, count, rng):
                annotations.append(PointAnnotation(k, int(r), int(c), Polarity.POSITIVE, size))

        if n_neg == 0:
            continue
        distance = chebyshev_distance_to(frame_mask)
        background = distance >= size
        if policy.negative_placement == 'boundary' and frame_mask.any():
            ring = background & (distance < 3 * size)
            if ring.any():
                background = ring
        if not background.any():
            log_warning(f"No background far enough from the mask for negatives on frame {k}")
            continue
        for r, c in _pick(background, n_neg, rng):
            annotations.append(PointAnnotation(k, int(r), int(c), Polarity.NEGATIVE, size))

    if n_pos > 0 or policy.dense_coverage > 0:
        if not any_positive_source:
            raise SamplingError("No eligible positive pixel on any keyframe")
    return annotations


def _union_of_squares(points: Sequence[PointAnnotation], h: int, w: int) -> np.ndarray:
    plane = np.zeros((h, w), dtype=bool)
    for a in points:
        r0, r1, c0, c1 = a.square(h, w)
        plane[r0:r1, c0:c1] = True
    return plane


def _filled_hull(points: Sequence[PointAnnotation], h: int, w: int) -> np.ndarray:
    coords = np.unique(np.array([[a.row, a.col] for a in points], dtype=np.float64), axis=0)
    if coords.shape[0] < 3:
        return _union_of_squares(points, h, w)
    try:
        hull = ConvexHull(coords)
    except QhullError:
        # collinear
        return _union_of_squares(points, h, w)
    rr, cc = np.mgrid[0:h, 0:w]
    grid = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)
    inside = np.all(grid @ hull.equations[:, :2].T + hull.equations[:, 2] <= 1e-9, axis=1)
    return inside.reshape(h, w)


def convex_hull_mask(annotations: Sequence[PointAnnotation], dims: Sequence[int]) -> BinaryMask:
    """
    Filled hull of each keyframe's positive points, held until the next
    keyframe. Frames before the first annotated keyframe take its hull.
    """
    f, h, w = (int(d) for d in dims[:3])
    validate_annotations(annotations, dims)
    by_frame: Dict[int, List[PointAnnotation]] = {}
    for a in annotations:
        if a.is_positive:
            by_frame.setdefault(a.frame, []).append(a)
    if not by_frame:
        raise ValidationError("Convex hull needs at least one positive annotation")

    keyframes = sorted(by_frame)
    hulls = {k: _filled_hull(by_frame[k], h, w) for k in keyframes}
    mask = np.zeros((f, h, w), dtype=np.uint8)
    current = keyframes[0]
    for t in range(f):
        if t in hulls:
            current = t
        mask[t] = hulls[current]
    return mask


def dilate_and_feather(point_map: VideoTensor, dilation_radius: int,
                       feather_width: int) -> VideoTensor:
    """
    Alpha matte from the positive squares of a point map: 1 on the square
    dilation of radius r, then a linear ramp 1 - d/width over Chebyshev
    distance d beyond it. Negative squares contribute nothing.
    """
    if dilation_radius < 0 or feather_width < 0:
        raise ValidationError("dilation_radius and feather_width must be >= 0")
    point_map = np.asarray(point_map)
    positive = point_map[..., 0] >= (POSITIVE_VALUE + NEGATIVE_VALUE) / 2
    alpha = np.zeros(positive.shape, dtype=np.float32)
    structure = np.ones((2 * dilation_radius + 1, 2 * dilation_radius + 1), dtype=bool)

    for t in range(positive.shape[0]):
        if not positive[t].any():
            continue
        dilated = ndimage.binary_dilation(positive[t], structure=structure) if dilation_radius else positive[t]
        if feather_width == 0:
            alpha[t] = dilated
        else:
            distance = chebyshev_distance_to(dilated)
            alpha[t] = np.clip(1.0 - distance / feather_width, 0.0, 1.0)

    return np.repeat(alpha[..., None], point_map.shape[-1], axis=3)


def mask_to_point_map(mask: BinaryMask, channels: int) -> VideoTensor:
    """A mask used as guidance: mask pixels carry the positive value."""
    mask = check_mask(mask)
    plane = mask.astype(np.float32) * POSITIVE_VALUE
    return np.repeat(plane[..., None], channels, axis=3)


def annotations_to_json(annotations: Sequence[PointAnnotation]) -> str:
    return json.dumps([a.to_dict() for a in annotations], indent=2, sort_keys=True)


def annotations_from_json(text: str) -> List[PointAnnotation]:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError(f"Annotation file is not valid JSON: {e}")
    if not isinstance(data, list):
        raise ValidationError("Annotation JSON must be a list")
    return [PointAnnotation.from_dict(item) for item in data]


def load_annotations(path) -> List[PointAnnotation]:
    with open(path, 'r') as f:
        return annotations_from_json(f.read())


def save_annotations(path, annotations: Sequence[PointAnnotation]) -> None:
    with open(path, 'w') as f:
        f.write(annotations_to_json(annotations))
