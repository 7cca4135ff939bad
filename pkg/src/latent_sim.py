"""
Latent simulator: a fixed linear codec standing in for a video VAE, plus the
spatio-temporal pooling that turns a point map into loss weights.

Shape law: (f, h, w, c) <-> ((f-1)/4 + 1, h/8, w/8, 16). Frame 0 forms its
own temporal group, then every 4 frames share one latent frame.
"""

from typing import Optional

import numpy as np

from src.config import SPATIAL_FACTOR, TEMPORAL_GROUP, LATENT_CHANNELS
from src.exceptions import ShapeError, ValidationError
from src.tensor_io import SeededRng, VideoTensor, LatentTensor, check_latent

LIFT_TOLERANCE = 1e-5


def latent_dims(f: int, h: int, w: int) -> tuple:
    if f < 1 or (f - 1) % TEMPORAL_GROUP != 0:
        raise ShapeError(f"Frame count must be 1 mod {TEMPORAL_GROUP}, got {f}")
    if h % SPATIAL_FACTOR or w % SPATIAL_FACTOR or h == 0 or w == 0:
        raise ShapeError(f"Height and width must be multiples of {SPATIAL_FACTOR}, got {h}x{w}")
    return (f - 1) // TEMPORAL_GROUP + 1, h // SPATIAL_FACTOR, w // SPATIAL_FACTOR


def _pool(video: np.ndarray) -> np.ndarray:
    """Average over 8x8 cells and the temporal groups {0}, {1..4}, {5..8}, ..."""
    f, h, w, c = video.shape
    fl, hl, wl = latent_dims(f, h, w)
    cells = video.reshape(f, hl, SPATIAL_FACTOR, wl, SPATIAL_FACTOR, c).mean(axis=(2, 4), dtype=np.float64)
    pooled = np.empty((fl, hl, wl, c), dtype=np.float64)
    pooled[0] = cells[0]
    if fl > 1:
        pooled[1:] = cells[1:].reshape(fl - 1, TEMPORAL_GROUP, hl, wl, c).mean(axis=1)
    return pooled


def _unpool(pooled: np.ndarray) -> np.ndarray:
    fl, hl, wl, c = pooled.shape
    frames = np.concatenate([pooled[:1], np.repeat(pooled[1:], TEMPORAL_GROUP, axis=0)], axis=0)
    frames = np.repeat(frames, SPATIAL_FACTOR, axis=1)
    return np.repeat(frames, SPATIAL_FACTOR, axis=2)


class LatentCodec:
    """
    Deterministic encoder/decoder. The c -> 16 channel lift has orthonormal
    rows, drawn once from the seeded 'codec' substream.
    """

    def __init__(self, channels: int = 3, rng: Optional[SeededRng] = None, seed: int = 0):
        if channels < 1 or channels > LATENT_CHANNELS:
            raise ValidationError(f"Codec channel count must be 1..{LATENT_CHANNELS}, got {channels}")
        # Only the master seed matters, so a codec can be rebuilt from a checkpoint
        rng = SeededRng(rng.seed if rng is not None else seed, 'codec')
        self.channels = channels
        self.seed = rng.seed
        gaussian = rng.generator.standard_normal((LATENT_CHANNELS, channels))
        q, r = np.linalg.qr(gaussian)
        # Sign-fix so the factorisation is unique
        q = q * np.sign(np.diag(r))
        lift = np.ascontiguousarray(q.T)
        lift.setflags(write=False)
        self._lift = lift
        self._check_orthonormal()

    @property
    def lift(self) -> np.ndarray:
        return self._lift

    def _check_orthonormal(self):
        gram = self._lift @ self._lift.T
        if np.max(np.abs(gram - np.eye(self.channels))) > LIFT_TOLERANCE:
            raise ValidationError("Codec lift rows are not orthonormal")

    def describe(self) -> dict:
        return {'channels': self.channels, 'seed': self.seed, 'label': 'codec'}

    def encode_video(self, video: VideoTensor) -> LatentTensor:
        video = np.asarray(video)
        if video.ndim != 4 or video.shape[-1] != self.channels:
            raise ShapeError(f"Codec expects (f, h, w, {self.channels}), got {video.shape}")
        latent = _pool(video) @ self._lift
        return latent.astype(np.float32)

    def decode_latent(self, latent: LatentTensor) -> VideoTensor:
        latent = check_latent(latent)
        video = _unpool(np.asarray(latent, dtype=np.float64) @ self._lift.T)
        return np.clip(video, 0.0, 1.0).astype(np.float32)


def encode_video(codec: LatentCodec, video: VideoTensor) -> LatentTensor:
    return codec.encode_video(video)


def decode_latent(codec: LatentCodec, latent: LatentTensor) -> VideoTensor:
    return codec.decode_latent(latent)


def pool_pointmap(point_map: VideoTensor) -> LatentTensor:
    """Average-pool channel 0 with strides 1x8x8 (first frame) / 4x8x8, repeated to 16 channels."""
    point_map = np.asarray(point_map)
    if point_map.ndim != 4:
        raise ShapeError(f"Point map must be (f, h, w, c), got {point_map.shape}")
    pooled = _pool(point_map[..., :1])
    return np.repeat(np.clip(pooled, 0.0, 1.0), LATENT_CHANNELS, axis=3).astype(np.float32)


def weight_map(pooled: LatentTensor) -> np.ndarray:
    pooled = np.asarray(pooled)
    if pooled.size and (pooled.min() < 0.0 or pooled.max() > 1.0):
        raise ValidationError("Pooled point map must lie in [0, 1]")
    return np.abs(pooled - 0.5).astype(np.float32)
