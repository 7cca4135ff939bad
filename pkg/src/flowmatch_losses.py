"""
Flow-matching noising, velocity targets and the three training losses.

Each loss has a matching *_grad returning dL/dv_s so the denoiser can chain
it into its reverse pass. Reduction is 'mean' (default) or 'sum'.
"""

from dataclasses import dataclass, asdict
from typing import Dict

import numpy as np

from src.config import LAMBDA1, LAMBDA2
from src.exceptions import ValidationError
from src.tensor_io import LatentTensor, same_shape

REDUCTIONS = ('mean', 'sum')


@dataclass(frozen=True)
class LossBreakdown:
    l_fm: float
    l_etd: float
    l_pa: float
    total: float
    lambda1: float = LAMBDA1
    lambda2: float = LAMBDA2

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def _reduce(values: np.ndarray, reduction: str) -> float:
    if reduction == 'mean':
        return float(np.mean(values, dtype=np.float64))
    if reduction == 'sum':
        return float(np.sum(values, dtype=np.float64))
    raise ValidationError(f"Unknown reduction '{reduction}', expected one of {REDUCTIONS}")


def _scale(size: int, reduction: str) -> float:
    return 1.0 / size if reduction == 'mean' else 1.0


def noisy_latent(z: LatentTensor, eps: LatentTensor, t: float) -> LatentTensor:
    """z_t = t * eps + (1 - t) * z."""
    same_shape(z, eps, names=('z', 'eps'))
    if not 0.0 <= t <= 1.0:
        raise ValidationError(f"Timestep must be in [0, 1], got {t}")
    if t == 0.0:
        return np.array(z, copy=True)
    if t == 1.0:
        return np.array(eps, copy=True)
    return t * eps + (1.0 - t) * z


def velocity_target(z: LatentTensor, eps: LatentTensor) -> LatentTensor:
    same_shape(z, eps, names=('z', 'eps'))
    return eps - z


def fm_loss(v_s, v_t, reduction: str = 'mean') -> float:
    same_shape(v_s, v_t, names=('v_s', 'v_t'))
    residual = np.asarray(v_s, dtype=np.float64) - v_t
    return _reduce(residual ** 2, reduction)


def fm_loss_grad(v_s, v_t, reduction: str = 'mean') -> np.ndarray:
    same_shape(v_s, v_t, names=('v_s', 'v_t'))
    residual = np.asarray(v_s, dtype=np.float64) - v_t
    return 2.0 * residual * _scale(residual.size, reduction)


def etd_loss(v_s, v_teacher, reduction: str = 'mean', weight=None) -> float:
    """||v_s - sg(v_teacher)||^2; the teacher output is a constant here."""
    same_shape(v_s, v_teacher, names=('v_s', 'v_teacher'))
    residual = np.asarray(v_s, dtype=np.float64) - np.asarray(v_teacher, dtype=np.float64)
    if weight is not None:
        residual = weight * residual
    return _reduce(residual ** 2, reduction)


def etd_loss_grad(v_s, v_teacher, reduction: str = 'mean', weight=None) -> np.ndarray:
    same_shape(v_s, v_teacher, names=('v_s', 'v_teacher'))
    residual = np.asarray(v_s, dtype=np.float64) - np.asarray(v_teacher, dtype=np.float64)
    if weight is not None:
        return 2.0 * weight * weight * residual * _scale(residual.size, reduction)
    return 2.0 * residual * _scale(residual.size, reduction)


def pa_loss(v_s, v_t, w, reduction: str = 'mean') -> float:
    """||w ⊙ (v_s - v_t)||^2."""
    same_shape(v_s, v_t, w, names=('v_s', 'v_t', 'w'))
    weighted = np.asarray(w, dtype=np.float64) * (np.asarray(v_s, dtype=np.float64) - v_t)
    return _reduce(weighted ** 2, reduction)


def pa_loss_grad(v_s, v_t, w, reduction: str = 'mean') -> np.ndarray:
    same_shape(v_s, v_t, w, names=('v_s', 'v_t', 'w'))
    w = np.asarray(w, dtype=np.float64)
    residual = np.asarray(v_s, dtype=np.float64) - v_t
    return 2.0 * w * w * residual * _scale(residual.size, reduction)


def total_loss(l_fm: float, l_etd: float, l_pa: float,
               lambda1: float = LAMBDA1, lambda2: float = LAMBDA2) -> LossBreakdown:
    for name, value in (('l_fm', l_fm), ('l_etd', l_etd), ('l_pa', l_pa)):
        if value < 0:
            raise ValidationError(f"Loss component {name} is negative: {value}")
    total = l_fm + lambda1 * l_etd + lambda2 * l_pa
    return LossBreakdown(float(l_fm), float(l_etd), float(l_pa), float(total),
                         float(lambda1), float(lambda2))
