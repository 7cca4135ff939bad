"""
Toy conditional velocity network with a hand-written reverse pass.

Input is the channel concatenation (z_cond, z_guidance, z_t) -> 48 channels.
    h0  = tanh(x W_in + b_in + time(t) + tag_embed[tag])
    h_l = h_{l-1} + tanh(conv3x3(h_{l-1}; K_l) + c_l)      l = 1..depth
    out = h_depth W_out + b_out                              (16 channels)
time(t) is a learned affine readout of 16 sinusoidal features of t.
Convolutions are per frame with zero padding.
"""

import hashlib
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.config import ADAMW_BETAS, ADAMW_EPS, LATENT_CHANNELS, MODEL_INPUT_CHANNELS, LAMBDA1, LAMBDA2
from src.config_manager import DenoiserConfig
from src.exceptions import NumericalError, ShapeError, ValidationError
from src.flowmatch_losses import (
    LossBreakdown, fm_loss, fm_loss_grad, etd_loss, etd_loss_grad, pa_loss, pa_loss_grad, total_loss,
)
from src.tensor_io import SeededRng, LatentTensor, check_latent, gaussian_noise

TIME_FEATURES = 16
TIME_FREQUENCIES = np.pi * 2.0 ** np.arange(TIME_FEATURES // 2) / 8.0


def time_features(t: float) -> np.ndarray:
    angles = TIME_FREQUENCIES * float(t)
    return np.concatenate([np.sin(angles), np.cos(angles)])


class DenoiserParams(Mapping):
    """Named float64 parameter groups plus the architecture they belong to."""

    def __init__(self, config: DenoiserConfig, tensors: Dict[str, np.ndarray]):
        self.config = config
        expected = parameter_shapes(config)
        missing = set(expected) - set(tensors)
        if missing:
            raise ValidationError(f"Missing parameter groups: {sorted(missing)}")
        self._tensors = {}
        for name, shape in expected.items():
            array = np.asarray(tensors[name], dtype=np.float64)
            if array.shape != shape:
                raise ShapeError(f"Parameter {name} has shape {array.shape}, expected {shape}")
            self._tensors[name] = array

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def copy(self) -> 'DenoiserParams':
        return DenoiserParams(self.config, {k: v.copy() for k, v in self._tensors.items()})

    def zeros_like(self) -> 'DenoiserParams':
        return DenoiserParams(self.config, {k: np.zeros_like(v) for k, v in self._tensors.items()})

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self._tensors.values()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self._tensors.values())

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in self._tensors:
            h.update(name.encode('ascii'))
            h.update(np.ascontiguousarray(self._tensors[name]).tobytes())
        return h.hexdigest()


def parameter_shapes(config: DenoiserConfig) -> Dict[str, Tuple[int, ...]]:
    d = config.width
    shapes = {
        'w_in': (MODEL_INPUT_CHANNELS, d),
        'b_in': (d,),
        'w_time': (TIME_FEATURES, d),
        'b_time': (d,),
        'tag_embed': (config.num_tags, d),
    }
    for layer in range(config.depth):
        shapes[f'conv{layer}'] = (3, 3, d, d)
        shapes[f'conv_bias{layer}'] = (d,)
    shapes['w_out'] = (d, LATENT_CHANNELS)
    shapes['b_out'] = (LATENT_CHANNELS,)
    return shapes


def init_params(config: DenoiserConfig, rng: SeededRng) -> DenoiserParams:
    gen = rng.substream('init').generator
    d = config.width
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.startswith('b_') or name.startswith('conv_bias'):
            tensors[name] = np.zeros(shape)
        elif name == 'w_in':
            tensors[name] = gen.standard_normal(shape) / np.sqrt(MODEL_INPUT_CHANNELS)
        elif name == 'w_time':
            tensors[name] = gen.standard_normal(shape) * 0.25
        elif name == 'tag_embed':
            tensors[name] = gen.standard_normal(shape) * 0.1
        elif name.startswith('conv'):
            tensors[name] = gen.standard_normal(shape) * 0.5 / np.sqrt(9 * d)
        else:
            tensors[name] = gen.standard_normal(shape) / np.sqrt(d)
    return DenoiserParams(config, tensors)


@dataclass
class TrainingExample:
    """One latent-level example; teacher velocity and weights are optional."""
    z_cond: LatentTensor
    z_guidance: LatentTensor
    z_t: LatentTensor
    t: float
    tag: int
    v_target: LatentTensor
    v_teacher: Optional[LatentTensor] = None
    weight: Optional[np.ndarray] = None


@dataclass(frozen=True)
class LossSpec:
    lambda1: float = LAMBDA1
    lambda2: float = LAMBDA2
    reduction: str = 'mean'
    # Apply the point-map weights to the distillation residual too
    weight_etd: bool = False

    @classmethod
    def flow_matching_only(cls, reduction: str = 'mean') -> 'LossSpec':
        return cls(lambda1=0.0, lambda2=0.0, reduction=reduction)


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Mapping) -> 'OptimizerState':
        return cls(m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()}, step=0)


def _conv3x3(a: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    f, h, w, _ = a.shape
    padded = np.pad(a, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((f, h, w, kernel.shape[-1]))
    for dy in range(3):
        for dx in range(3):
            out += padded[:, dy:dy + h, dx:dx + w, :] @ kernel[dy, dx]
    return out


def _conv3x3_backward(a: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray):
    f, h, w, d = a.shape
    padded = np.pad(a, ((0, 0), (1, 1), (1, 1), (0, 0)))
    grad_padded = np.zeros_like(padded)
    grad_kernel = np.zeros_like(kernel)
    flat_grad = grad_out.reshape(-1, grad_out.shape[-1])
    for dy in range(3):
        for dx in range(3):
            window = padded[:, dy:dy + h, dx:dx + w, :]
            grad_kernel[dy, dx] = window.reshape(-1, d).T @ flat_grad
            grad_padded[:, dy:dy + h, dx:dx + w, :] += grad_out @ kernel[dy, dx].T
    return grad_padded[:, 1:-1, 1:-1, :], grad_kernel


def _check_inputs(params: DenoiserParams, z_cond, z_guidance, z_t, tag: int):
    for name, z in (('z_cond', z_cond), ('z_guidance', z_guidance), ('z_t', z_t)):
        check_latent(z, name)
    if not (np.shape(z_cond) == np.shape(z_guidance) == np.shape(z_t)):
        raise ShapeError(f"Latents must share (f', h', w'): {np.shape(z_cond)}, "
                         f"{np.shape(z_guidance)}, {np.shape(z_t)}")
    if not 0 <= tag < params.config.num_tags:
        raise ValidationError(f"Condition tag {tag} outside 0..{params.config.num_tags - 1}")


def _forward_cached(params: DenoiserParams, z_cond, z_guidance, z_t, t: float, tag: int):
    x = np.concatenate([z_cond, z_guidance, z_t], axis=-1).astype(np.float64)
    phi = time_features(t)
    shift = phi @ params['w_time'] + params['b_time'] + params['tag_embed'][tag]
    h = np.tanh(x @ params['w_in'] + params['b_in'] + shift)
    activations = [h]
    branches = []
    for layer in range(params.config.depth):
        branch = np.tanh(_conv3x3(h, params[f'conv{layer}']) + params[f'conv_bias{layer}'])
        h = h + branch
        activations.append(h)
        branches.append(branch)
    out = h @ params['w_out'] + params['b_out']
    cache = {'x': x, 'phi': phi, 'tag': tag, 'activations': activations, 'branches': branches}
    return out, cache


def forward(params: DenoiserParams, z_cond_video: LatentTensor, z_guidance: LatentTensor,
            z_t: LatentTensor, t: float, tag: int) -> np.ndarray:
    """Predicted velocity, same shape as z_t."""
    _check_inputs(params, z_cond_video, z_guidance, z_t, tag)
    out, _ = _forward_cached(params, z_cond_video, z_guidance, z_t, t, tag)
    return out


def _backward_single(params: DenoiserParams, cache: dict, grad_out: np.ndarray,
                     grads: Dict[str, np.ndarray], scale: float) -> None:
    d = params.config.width
    activations = cache['activations']
    last = activations[-1]
    grads['w_out'] += scale * last.reshape(-1, d).T @ grad_out.reshape(-1, LATENT_CHANNELS)
    grads['b_out'] += scale * grad_out.sum(axis=(0, 1, 2))

    grad_h = grad_out @ params['w_out'].T
    for layer in reversed(range(params.config.depth)):
        branch = cache['branches'][layer]
        grad_pre = grad_h * (1.0 - branch ** 2)
        grad_input, grad_kernel = _conv3x3_backward(activations[layer], params[f'conv{layer}'], grad_pre)
        grads[f'conv{layer}'] += scale * grad_kernel
        grads[f'conv_bias{layer}'] += scale * grad_pre.sum(axis=(0, 1, 2))
        grad_h = grad_h + grad_input

    grad_pre0 = grad_h * (1.0 - activations[0] ** 2)
    grads['w_in'] += scale * cache['x'].reshape(-1, MODEL_INPUT_CHANNELS).T @ grad_pre0.reshape(-1, d)
    summed = grad_pre0.sum(axis=(0, 1, 2))
    grads['b_in'] += scale * summed
    grads['b_time'] += scale * summed
    grads['w_time'] += scale * np.outer(cache['phi'], summed)
    grads['tag_embed'][cache['tag']] += scale * summed


def _example_losses(v_s: np.ndarray, example: TrainingExample, spec: LossSpec):
    """Loss components and dL/dv_s for one example."""
    l_fm = fm_loss(v_s, example.v_target, spec.reduction)
    grad = fm_loss_grad(v_s, example.v_target, spec.reduction)
    l_etd = 0.0
    l_pa = 0.0
    if example.v_teacher is not None:
        etd_weight = example.weight if (spec.weight_etd and example.weight is not None) else None
        l_etd = etd_loss(v_s, example.v_teacher, spec.reduction, weight=etd_weight)
        grad = grad + spec.lambda1 * etd_loss_grad(v_s, example.v_teacher, spec.reduction, weight=etd_weight)
    if example.weight is not None:
        l_pa = pa_loss(v_s, example.v_target, example.weight, spec.reduction)
        grad = grad + spec.lambda2 * pa_loss_grad(v_s, example.v_target, example.weight, spec.reduction)
    return l_fm, l_etd, l_pa, grad


def _combine(parts: List[Tuple[float, float, float]], spec: LossSpec) -> LossBreakdown:
    n = len(parts)
    l_fm = sum(p[0] for p in parts) / n
    l_etd = sum(p[1] for p in parts) / n
    l_pa = sum(p[2] for p in parts) / n
    return total_loss(l_fm, l_etd, l_pa, spec.lambda1, spec.lambda2)


def loss_value(params: DenoiserParams, batch: Sequence[TrainingExample], loss_spec: LossSpec) -> LossBreakdown:
    if not batch:
        raise ValidationError("Batch must not be empty")
    parts = []
    for example in batch:
        _check_inputs(params, example.z_cond, example.z_guidance, example.z_t, example.tag)
        v_s, _ = _forward_cached(params, example.z_cond, example.z_guidance, example.z_t, example.t, example.tag)
        l_fm, l_etd, l_pa, _ = _example_losses(v_s, example, loss_spec)
        parts.append((l_fm, l_etd, l_pa))
    return _combine(parts, loss_spec)


def backward(params: DenoiserParams, batch: Sequence[TrainingExample],
             loss_spec: LossSpec, step: Optional[int] = None) -> Tuple[LossBreakdown, DenoiserParams]:
    """
    Batch-mean loss breakdown and its gradient w.r.t. params. Teacher
    velocities enter as constants, so nothing flows back to the teacher.
    Examples are accumulated in order, keeping results bit-reproducible.
    """
    if not batch:
        raise ValidationError("Batch must not be empty")
    grads = {name: np.zeros_like(value) for name, value in params.items()}
    scale = 1.0 / len(batch)
    parts = []
    for example in batch:
        _check_inputs(params, example.z_cond, example.z_guidance, example.z_t, example.tag)
        v_s, cache = _forward_cached(params, example.z_cond, example.z_guidance,
                                     example.z_t, example.t, example.tag)
        l_fm, l_etd, l_pa, grad_out = _example_losses(v_s, example, loss_spec)
        parts.append((l_fm, l_etd, l_pa))
        _backward_single(params, cache, grad_out, grads, scale)

    breakdown = _combine(parts, loss_spec)
    if not np.isfinite(breakdown.total):
        raise NumericalError("Non-finite loss", step=step, details=breakdown.to_dict())
    return breakdown, DenoiserParams(params.config, grads)


def _rebuild(params: Mapping, tensors: Dict[str, np.ndarray]) -> Mapping:
    if isinstance(params, DenoiserParams):
        return DenoiserParams(params.config, tensors)
    return tensors


def finite_diff_grad(params: Mapping, batch: Optional[Sequence[TrainingExample]] = None,
                     loss_spec: Optional[LossSpec] = None, h: float = 1e-3,
                     objective: Optional[Callable[[Mapping], float]] = None) -> Mapping:
    """
    Central differences (L(θ+h) - L(θ-h)) / 2h for every parameter element.
    With no objective, L is the total loss of the batch under loss_spec.
    """
    if h <= 0:
        raise ValidationError(f"Step h must be positive, got {h}")
    if objective is None:
        spec = loss_spec or LossSpec()
        objective = lambda p: loss_value(p, batch, spec).total

    base = {name: np.array(value, dtype=np.float64, copy=True) for name, value in params.items()}
    grads = {name: np.zeros_like(value) for name, value in base.items()}
    for name, value in base.items():
        flat = value.reshape(-1)
        out = grads[name].reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            upper = objective(_rebuild(params, base))
            flat[i] = original - h
            lower = objective(_rebuild(params, base))
            flat[i] = original
            out[i] = (upper - lower) / (2.0 * h)
    return _rebuild(params, grads)


def max_relative_error(analytic: Mapping, numeric: Mapping) -> float:
    """Largest per-group ||a - n|| / (||a|| + ||n||)."""
    worst = 0.0
    for name in analytic:
        a = np.asarray(analytic[name], dtype=np.float64)
        n = np.asarray(numeric[name], dtype=np.float64)
        denom = np.linalg.norm(a) + np.linalg.norm(n)
        if denom < 1e-12:
            continue
        worst = max(worst, float(np.linalg.norm(a - n) / denom))
    return worst


def adamw_step(params: Mapping, grads: Mapping, state: OptimizerState, lr: float,
               beta1: float = ADAMW_BETAS[0], beta2: float = ADAMW_BETAS[1],
               weight_decay: float = 0.0, eps_stab: float = ADAMW_EPS) -> Tuple[Mapping, OptimizerState]:
    """Adam with bias correction and decoupled weight decay; returns new params and state."""
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise NumericalError(f"Non-finite gradient in {name}", step=state.step + 1)

    step = state.step + 1
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        new_params[name] = theta - lr * weight_decay * theta - lr * m_hat / (np.sqrt(v_hat) + eps_stab)
        new_m[name] = m
        new_v[name] = v
    return _rebuild(params, new_params), OptimizerState(new_m, new_v, step)


def integrate_euler(velocity_fn: Callable[[np.ndarray, float], np.ndarray],
                    z1: np.ndarray, steps: int) -> np.ndarray:
    """Euler from t=1 down to t=0: z <- z - dt * v(z, t)."""
    if steps < 1:
        raise ValidationError(f"Sampler needs at least one step, got {steps}")
    dt = 1.0 / steps
    z = np.asarray(z1, dtype=np.float64)
    for i in range(steps):
        t = 1.0 - i * dt
        z = z - dt * velocity_fn(z, t)
        if not np.all(np.isfinite(z)):
            raise NumericalError("Sampler state became non-finite", step=i)
    return z.astype(np.float32)


def sample(params: DenoiserParams, z_cond_video: LatentTensor, z_guidance: LatentTensor,
           tag: int, steps: int, rng: SeededRng) -> LatentTensor:
    """Generate a clean latent starting from z_1 = ε."""
    eps = gaussian_noise(np.shape(z_cond_video), rng)
    _check_inputs(params, z_cond_video, z_guidance, eps, tag)
    return integrate_euler(
        lambda z, t: _forward_cached(params, z_cond_video, z_guidance, z, t, tag)[0],
        eps, steps,
    )


GRADCHECK_TOLERANCE = 1e-3


def gradient_check(seed: int = 0, h: float = 1e-3) -> Dict[str, float]:
    """
    Compare backward() with central differences on a tiny model for the
    three loss configurations; returns the max relative error of each.
    """
    config = DenoiserConfig(width=4, depth=2, num_tags=2)
    rng = SeededRng(seed, 'gradcheck')
    params = init_params(config, rng)
    # Nonzero biases so every path carries gradient
    params = DenoiserParams(config, {name: value + 0.1 * rng.generator.standard_normal(value.shape)
                                     for name, value in params.items()})
    dims = (2, 2, 2, LATENT_CHANNELS)

    def latent():
        return rng.generator.standard_normal(dims)

    batch = []
    for tag in range(2):
        batch.append(TrainingExample(
            z_cond=latent(), z_guidance=latent(), z_t=latent(), t=float(rng.generator.random()), tag=tag,
            v_target=latent(), v_teacher=latent(), weight=rng.generator.uniform(0.0, 0.5, dims),
        ))
    fm_only = [TrainingExample(e.z_cond, e.z_guidance, e.z_t, e.t, e.tag, e.v_target) for e in batch]
    with_etd = [TrainingExample(e.z_cond, e.z_guidance, e.z_t, e.t, e.tag, e.v_target, e.v_teacher) for e in batch]

    suites = {
        'fm': (fm_only, LossSpec(0.0, 0.0)),
        'fm+etd': (with_etd, LossSpec(LAMBDA1, 0.0)),
        'fm+etd+pa': (batch, LossSpec(LAMBDA1, LAMBDA2)),
    }
    errors = {}
    for name, (examples, spec) in suites.items():
        _, analytic = backward(params, examples, spec)
        numeric = finite_diff_grad(params, examples, spec, h=h)
        errors[name] = max_relative_error(analytic, numeric)
    return errors
