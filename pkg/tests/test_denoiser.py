"""
Toy denoiser: forward pass, hand-written gradients, AdamW and the sampler
"""

import os
import sys
import unittest

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.config_manager import DenoiserConfig
from src.denoiser import (
    GRADCHECK_TOLERANCE, DenoiserParams, LossSpec, OptimizerState, TrainingExample,
    adamw_step, backward, finite_diff_grad, forward, gradient_check, init_params,
    integrate_euler, loss_value, max_relative_error, parameter_shapes, sample,
)
from src.exceptions import NumericalError, ShapeError, ValidationError
from src.tensor_io import SeededRng

DIMS = (2, 2, 3, 16)


def tiny_params(seed=0, width=4):
    return init_params(DenoiserConfig(width=width, depth=2, num_tags=2), SeededRng(seed))


def example(gen, tag=0, teacher=False, weight=False):
    latent = lambda: gen.standard_normal(DIMS)
    return TrainingExample(
        z_cond=latent(), z_guidance=latent(), z_t=latent(), t=float(gen.random()), tag=tag,
        v_target=latent(),
        v_teacher=latent() if teacher else None,
        weight=gen.uniform(0.0, 0.5, DIMS) if weight else None,
    )


class TestParameters(unittest.TestCase):

    def test_counts_match_config(self):
        for width, depth in ((4, 2), (32, 2), (16, 3)):
            config = DenoiserConfig(width=width, depth=depth)
            params = init_params(config, SeededRng(0))
            self.assertEqual(params.num_parameters(), config.parameter_count())
            self.assertEqual(set(params), set(parameter_shapes(config)))

    def test_default_model_fits_budget(self):
        config = DenoiserConfig()
        config.validate()
        self.assertLessEqual(config.parameter_count(), 50_000)

    def test_architecture_limits(self):
        with self.assertRaises(ValidationError):
            DenoiserConfig(width=64).validate()
        with self.assertRaises(ValidationError):
            DenoiserConfig(depth=4).validate()

    def test_wrong_shape_and_missing_group(self):
        params = tiny_params()
        tensors = dict(params.items())
        tensors['w_out'] = np.zeros((3, 3))
        with self.assertRaises(ShapeError):
            DenoiserParams(params.config, tensors)
        del tensors['w_out']
        with self.assertRaises(ValidationError):
            DenoiserParams(params.config, tensors)

    def test_init_is_deterministic(self):
        self.assertEqual(tiny_params(5).digest(), tiny_params(5).digest())
        self.assertNotEqual(tiny_params(5).digest(), tiny_params(6).digest())


class TestForward(unittest.TestCase):

    def setUp(self):
        self.params = tiny_params()
        self.gen = np.random.default_rng(0)
        self.z = [self.gen.standard_normal(DIMS) for _ in range(3)]

    def test_output_shape(self):
        out = forward(self.params, *self.z, 0.3, 1)
        self.assertEqual(out.shape, DIMS)

    def test_tag_and_time_change_output(self):
        base = forward(self.params, *self.z, 0.3, 0)
        self.assertFalse(np.allclose(base, forward(self.params, *self.z, 0.3, 1)))
        self.assertFalse(np.allclose(base, forward(self.params, *self.z, 0.7, 0)))

    def test_bad_tag(self):
        with self.assertRaises(ValidationError):
            forward(self.params, *self.z, 0.3, 2)

    def test_mismatched_latents(self):
        with self.assertRaises(ShapeError):
            forward(self.params, self.z[0], self.z[1][:1], self.z[2], 0.3, 0)


class TestGradients(unittest.TestCase):

    def test_gradient_suite_within_tolerance(self):
        errors = gradient_check(seed=1)
        self.assertEqual(set(errors), {'fm', 'fm+etd', 'fm+etd+pa'})
        for name, error in errors.items():
            self.assertLess(error, GRADCHECK_TOLERANCE, name)

    def test_weighted_distillation_gradient(self):
        gen = np.random.default_rng(2)
        params = tiny_params(2)
        batch = [example(gen, 0, teacher=True, weight=True), example(gen, 1, teacher=True, weight=True)]
        spec = LossSpec(weight_etd=True)
        _, analytic = backward(params, batch, spec)
        numeric = finite_diff_grad(params, batch, spec)
        self.assertLess(max_relative_error(analytic, numeric), GRADCHECK_TOLERANCE)

    def test_breakdown_matches_loss_value(self):
        gen = np.random.default_rng(3)
        params = tiny_params(3)
        batch = [example(gen, 0, teacher=True, weight=True)]
        breakdown, _ = backward(params, batch, LossSpec())
        self.assertEqual(breakdown, loss_value(params, batch, LossSpec()))

    def test_backward_leaves_params_untouched(self):
        gen = np.random.default_rng(4)
        params = tiny_params(4)
        digest = params.digest()
        backward(params, [example(gen, teacher=True)], LossSpec())
        self.assertEqual(params.digest(), digest)

    def test_empty_batch(self):
        with self.assertRaises(ValidationError):
            backward(tiny_params(), [], LossSpec())

    def test_finite_differences_on_plain_mapping(self):
        theta = {'a': np.array([1.0, -2.0, 3.0])}
        grad = finite_diff_grad(theta, objective=lambda p: float(np.sum(p['a'] ** 2)))
        np.testing.assert_allclose(grad['a'], 2 * theta['a'], atol=1e-6)


class TestAdamW(unittest.TestCase):

    def test_first_step_moves_by_learning_rate(self):
        params = {'w': np.array([1.0, -2.0])}
        grads = {'w': np.array([0.5, -0.1])}
        new, state = adamw_step(params, grads, OptimizerState.zeros(params), lr=0.1)
        np.testing.assert_allclose(new['w'], [0.9, -1.9], atol=1e-6)
        self.assertEqual(state.step, 1)
        np.testing.assert_allclose(state.m['w'], 0.1 * grads['w'])
        np.testing.assert_allclose(state.v['w'], 0.01 * grads['w'] ** 2)

    def test_decay_is_decoupled(self):
        params = {'w': np.array([2.0])}
        new, _ = adamw_step(params, {'w': np.array([0.0])}, OptimizerState.zeros(params),
                            lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(new['w'], [1.9])

    def test_converges_on_quadratic(self):
        params = {'w': np.array([0.0, 10.0])}
        state = OptimizerState.zeros(params)
        for _ in range(2000):
            grads = {'w': 2.0 * (params['w'] - 3.0)}
            params, state = adamw_step(params, grads, state, lr=0.05)
        np.testing.assert_allclose(params['w'], [3.0, 3.0], atol=0.1)

    def test_non_finite_gradient(self):
        params = {'w': np.array([1.0])}
        with self.assertRaises(NumericalError) as ctx:
            adamw_step(params, {'w': np.array([np.inf])}, OptimizerState.zeros(params), lr=0.1)
        self.assertEqual(ctx.exception.step, 1)

    def test_denoiser_params_stay_typed(self):
        params = tiny_params()
        new, _ = adamw_step(params, params.zeros_like(), OptimizerState.zeros(params), lr=0.1)
        self.assertIsInstance(new, DenoiserParams)
        self.assertEqual(new.digest(), params.digest())


class TestSampler(unittest.TestCase):

    def test_straight_path_is_recovered_exactly(self):
        gen = np.random.default_rng(5)
        z0 = gen.standard_normal(DIMS)
        eps = gen.standard_normal(DIMS)
        for steps in (1, 4, 20):
            out = integrate_euler(lambda z, t: eps - z0, eps, steps)
            np.testing.assert_allclose(out, z0, atol=1e-5)

    def test_sampler_visits_times_from_one_down(self):
        seen = []

        def velocity(z, t):
            seen.append(t)
            return np.zeros_like(z)

        integrate_euler(velocity, np.zeros(DIMS), 4)
        self.assertEqual(seen, [1.0, 0.75, 0.5, 0.25])

    def test_zero_steps(self):
        with self.assertRaises(ValidationError):
            integrate_euler(lambda z, t: z, np.zeros(DIMS), 0)

    def test_divergence_reports_step(self):
        with self.assertRaises(NumericalError) as ctx:
            integrate_euler(lambda z, t: np.full_like(z, np.inf), np.zeros(DIMS), 3)
        self.assertEqual(ctx.exception.step, 0)

    def test_sample_is_reproducible(self):
        params = tiny_params()
        gen = np.random.default_rng(6)
        z_cond, z_guid = gen.standard_normal(DIMS), gen.standard_normal(DIMS)
        a = sample(params, z_cond, z_guid, 1, 3, SeededRng(1, 'sampler'))
        b = sample(params, z_cond, z_guid, 1, 3, SeededRng(1, 'sampler'))
        self.assertEqual(a.shape, DIMS)
        np.testing.assert_array_equal(a, b)


if __name__ == '__main__':
    unittest.main()
