"""
Tensor containers, seeded randomness and the P2IT on-disk format

Videos and latents are plain float32 numpy arrays laid out as
(frame, row, col, channel). The helpers here validate them at module
boundaries; every other module trusts what they return.
"""

import hashlib
import io
import os
import struct
from typing import BinaryIO, Sequence, Tuple, Union

import numpy as np

from src.config import LATENT_CHANNELS
from src.exceptions import DimensionError, FormatError, ShapeError, ValidationError

MAGIC = b'P2IT'
FORMAT_VERSION = 1
DTYPE_F32 = 1
MAX_NDIM = 8
MAX_ELEMENTS = 2 ** 31 - 1

VideoTensor = np.ndarray
LatentTensor = np.ndarray
BinaryMask = np.ndarray

PathOrFile = Union[str, os.PathLike, BinaryIO]


class SeededRng:
    """
    Counter-based random stream (Philox) keyed by a master seed and a
    purpose label. Substreams hash their label, so one consumer drawing more
    numbers never shifts another consumer's sequence.
    """

    def __init__(self, seed: int, label: str = 'master'):
        if seed < 0:
            raise ValidationError(f"Seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.label = label
        digest = hashlib.blake2b(f"{self.seed}:{label}".encode('ascii'), digest_size=16).digest()
        self.generator = np.random.Generator(np.random.Philox(key=int.from_bytes(digest, 'little')))

    def substream(self, label: str) -> 'SeededRng':
        return SeededRng(self.seed, f"{self.label}/{label}")

    @property
    def position(self) -> int:
        """Number of 128-bit Philox blocks consumed so far."""
        counter = self.generator.bit_generator.state['state']['counter']
        return int(sum(int(word) << (64 * i) for i, word in enumerate(counter)))

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, label='{self.label}')"


def check_dims(dims: Sequence[int]) -> Tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if len(dims) == 0 or len(dims) > MAX_NDIM:
        raise DimensionError(f"Tensor rank must be 1..{MAX_NDIM}, got {len(dims)}")
    if any(d <= 0 for d in dims):
        raise DimensionError(f"All dimensions must be positive, got {dims}")
    return dims


def make_video(data) -> VideoTensor:
    """Build an intensity video: float32, clamped to [0,1]."""
    video = np.clip(np.asarray(data, dtype=np.float32), 0.0, 1.0)
    return check_video(video)


def check_video(video, name: str = 'video') -> VideoTensor:
    video = np.asarray(video)
    if video.ndim != 4:
        raise ShapeError(f"{name} must be (f, h, w, c), got shape {video.shape}")
    f, h, w, c = video.shape
    if f < 1 or h < 8 or w < 8:
        raise ShapeError(f"{name} needs f >= 1, h >= 8, w >= 8, got {video.shape}")
    if c not in (1, 3):
        raise ShapeError(f"{name} must have 1 or 3 channels, got {c}")
    if not np.all(np.isfinite(video)):
        raise ValidationError(f"{name} contains non-finite values")
    return video.astype(np.float32, copy=False)


def check_latent(latent, name: str = 'latent') -> LatentTensor:
    latent = np.asarray(latent)
    if latent.ndim != 4 or latent.shape[-1] != LATENT_CHANNELS:
        raise ShapeError(f"{name} must be (f', h', w', {LATENT_CHANNELS}), got shape {latent.shape}")
    if not np.all(np.isfinite(latent)):
        raise ValidationError(f"{name} contains non-finite values")
    return latent


def check_mask(mask, name: str = 'mask') -> BinaryMask:
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ShapeError(f"{name} must be (f, h, w), got shape {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValidationError(f"{name} must be exactly binary")
    return mask.astype(np.uint8, copy=False)


def same_shape(*arrays, names: Sequence[str] = ()) -> None:
    shapes = [np.shape(a) for a in arrays]
    if any(s != shapes[0] for s in shapes[1:]):
        label = ', '.join(names) if names else 'operands'
        raise ShapeError(f"Shape mismatch between {label}: {shapes}")


def gaussian_noise(dims: Sequence[int], rng: SeededRng) -> LatentTensor:
    """i.i.d. standard normal samples, float32."""
    dims = check_dims(dims)
    return rng.generator.standard_normal(dims, dtype=np.float32)


def header_size(ndim: int) -> int:
    """Byte offset of the payload for a tensor of the given rank."""
    return 4 + 4 + 4 + 4 * ndim + 4


def encode_tensor(tensor) -> bytes:
    array = np.ascontiguousarray(tensor, dtype='<f4')
    dims = array.shape
    if len(dims) == 0 or len(dims) > MAX_NDIM:
        raise DimensionError(f"Cannot serialise a rank-{len(dims)} tensor")
    header = MAGIC + struct.pack('<II', FORMAT_VERSION, len(dims))
    header += struct.pack(f'<{len(dims)}I', *dims)
    header += struct.pack('<I', DTYPE_F32)
    return header + array.tobytes(order='C')


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError("Bad magic, expected 'P2IT'", offset=0)

    def _u32(offset: int, what: str) -> int:
        if len(blob) < offset + 4:
            raise FormatError(f"Truncated header while reading {what}", offset=len(blob))
        return struct.unpack_from('<I', blob, offset)[0]

    version = _u32(4, 'version')
    if version != FORMAT_VERSION:
        raise FormatError(f"Unsupported version {version}", offset=4)
    ndim = _u32(8, 'ndim')
    if ndim == 0 or ndim > MAX_NDIM:
        raise FormatError(f"Dimension count {ndim} out of range", offset=8)

    dims = []
    count = 1
    for i in range(ndim):
        offset = 12 + 4 * i
        d = _u32(offset, f'dim {i}')
        count *= d
        if count > MAX_ELEMENTS:
            raise FormatError("Dimension overflow", offset=offset)
        dims.append(d)

    dtype_offset = 12 + 4 * ndim
    dtype = _u32(dtype_offset, 'dtype')
    if dtype != DTYPE_F32:
        raise FormatError(f"Unknown dtype code {dtype}", offset=dtype_offset)

    start = header_size(ndim)
    expected = count * 4
    available = len(blob) - start
    if available < expected:
        raise FormatError(
            f"Truncated payload: expected {count} values, found {available // 4}",
            offset=start + available,
        )
    if available > expected:
        raise FormatError("Trailing bytes after payload", offset=start + expected)

    array = np.frombuffer(blob, dtype='<f4', count=count, offset=start)
    return array.reshape(dims).astype(np.float32)


def write_tensor(sink: PathOrFile, tensor) -> None:
    blob = encode_tensor(tensor)
    if hasattr(sink, 'write'):
        sink.write(blob)
    else:
        with open(sink, 'wb') as f:
            f.write(blob)


def read_tensor(source: Union[PathOrFile, bytes]) -> np.ndarray:
    if isinstance(source, (bytes, bytearray)):
        return decode_tensor(bytes(source))
    if hasattr(source, 'read'):
        return decode_tensor(source.read())
    with open(source, 'rb') as f:
        return decode_tensor(f.read())


def tensor_bytes(tensor) -> io.BytesIO:
    """In-memory P2IT blob, handy for hashing and tests."""
    buffer = io.BytesIO()
    write_tensor(buffer, tensor)
    buffer.seek(0)
    return buffer
