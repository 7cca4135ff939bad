"""
Flow-matching noising, losses and their analytic gradients
"""

import os
import sys
import unittest

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.exceptions import ShapeError, ValidationError
from src.flowmatch_losses import (
    etd_loss, etd_loss_grad, fm_loss, fm_loss_grad, noisy_latent, pa_loss, pa_loss_grad,
    total_loss, velocity_target,
)

DIMS = (1, 2, 2, 16)


def numeric_grad(fn, v, h=1e-6):
    grad = np.zeros_like(v)
    flat = v.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        upper = fn(v)
        flat[i] = original - h
        lower = fn(v)
        flat[i] = original
        out[i] = (upper - lower) / (2 * h)
    return grad


class TestNoising(unittest.TestCase):

    def setUp(self):
        gen = np.random.default_rng(0)
        self.z = gen.standard_normal(DIMS)
        self.eps = gen.standard_normal(DIMS)

    def test_endpoints_are_exact(self):
        np.testing.assert_array_equal(noisy_latent(self.z, self.eps, 0.0), self.z)
        np.testing.assert_array_equal(noisy_latent(self.z, self.eps, 1.0), self.eps)

    def test_interpolation(self):
        np.testing.assert_allclose(noisy_latent(self.z, self.eps, 0.25), 0.25 * self.eps + 0.75 * self.z)

    def test_timestep_domain(self):
        with self.assertRaises(ValidationError):
            noisy_latent(self.z, self.eps, 1.5)

    def test_velocity_is_derivative_of_path(self):
        v = velocity_target(self.z, self.eps)
        step = noisy_latent(self.z, self.eps, 0.6) - noisy_latent(self.z, self.eps, 0.4)
        np.testing.assert_allclose(step / 0.2, v, atol=1e-12)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            velocity_target(self.z, self.eps[..., :8])


class TestLosses(unittest.TestCase):

    def setUp(self):
        gen = np.random.default_rng(1)
        self.v_s = gen.standard_normal(DIMS)
        self.v_t = gen.standard_normal(DIMS)
        self.v_teacher = gen.standard_normal(DIMS)
        self.w = gen.uniform(0.0, 0.5, DIMS)

    def test_reductions(self):
        ones, zeros = np.ones((1, 1, 1, 16)), np.zeros((1, 1, 1, 16))
        self.assertEqual(fm_loss(ones, zeros), 1.0)
        self.assertEqual(fm_loss(ones, zeros, 'sum'), 16.0)
        with self.assertRaises(ValidationError):
            fm_loss(ones, zeros, 'max')

    def test_zero_weights_zero_alignment_loss(self):
        self.assertEqual(pa_loss(self.v_s, self.v_t, np.zeros(DIMS)), 0.0)

    def test_weighted_distillation(self):
        expected = np.mean((self.w * (self.v_s - self.v_teacher)) ** 2)
        self.assertAlmostEqual(etd_loss(self.v_s, self.v_teacher, weight=self.w), expected, places=12)

    def test_gradients_match_finite_differences(self):
        cases = [
            (lambda v: fm_loss(v, self.v_t), fm_loss_grad(self.v_s, self.v_t)),
            (lambda v: fm_loss(v, self.v_t, 'sum'), fm_loss_grad(self.v_s, self.v_t, 'sum')),
            (lambda v: etd_loss(v, self.v_teacher), etd_loss_grad(self.v_s, self.v_teacher)),
            (lambda v: etd_loss(v, self.v_teacher, weight=self.w),
             etd_loss_grad(self.v_s, self.v_teacher, weight=self.w)),
            (lambda v: pa_loss(v, self.v_t, self.w), pa_loss_grad(self.v_s, self.v_t, self.w)),
        ]
        for fn, analytic in cases:
            numeric = numeric_grad(fn, self.v_s.copy())
            np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)

    def test_total_decomposition(self):
        l_fm = fm_loss(self.v_s, self.v_t)
        l_etd = etd_loss(self.v_s, self.v_teacher)
        l_pa = pa_loss(self.v_s, self.v_t, self.w)
        breakdown = total_loss(l_fm, l_etd, l_pa)
        expected = l_fm + 1.5 * l_etd + 1.2 * l_pa
        self.assertLess(abs(breakdown.total - expected) / expected, 1e-6)
        self.assertEqual((breakdown.lambda1, breakdown.lambda2), (1.5, 1.2))
        self.assertEqual(set(breakdown.to_dict()), {'l_fm', 'l_etd', 'l_pa', 'total', 'lambda1', 'lambda2'})

    def test_negative_component_rejected(self):
        with self.assertRaises(ValidationError):
            total_loss(1.0, -0.1, 0.0)


if __name__ == '__main__':
    unittest.main()
