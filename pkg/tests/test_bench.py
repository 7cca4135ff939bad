"""
Bench metrics against scalar-loop oracles, plus the evaluation runner
"""

import json
import math
import os
import sys
import tempfile
import unittest

import numpy as np
import pandas as pd

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.bench import (
    EvalReport, ablation_grid, background_region, compositing_support, detect_inserted_region, estimate_flow,
    ewarp, insert_object, point_accuracy, psnr_from_mse, region_metrics, run_pointbench, ssim_map, write_reports,
)
from src.config_manager import BenchConfig, DenoiserConfig, SynthConfig, TrainConfig
from src.datasynth import synthesize_records
from src.denoiser import init_params
from src.exceptions import ShapeError, ValidationError
from src.latent_sim import LatentCodec
from src.pointmap import PointAnnotation, Polarity, SamplingPolicy, dilate_and_feather, rasterize_points
from src.tensor_io import SeededRng
from src.trainer import train_stage1, train_stage2

SLOW = os.getenv('P2I_SLOW_TESTS') == '1'


def loop_accuracy(annotations, mask):
    pos_hits = pos_total = neg_hits = neg_total = 0
    for a in annotations:
        inside = mask[a.frame, a.row, a.col] == 1
        if a.polarity == Polarity.POSITIVE:
            pos_total += 1
            pos_hits += int(inside)
        else:
            neg_total += 1
            neg_hits += int(not inside)
    return pos_hits / pos_total, (neg_hits / neg_total if neg_total else float('nan'))


def loop_errors(a, b, region):
    squared = absolute = 0.0
    count = 0
    f, h, w, c = a.shape
    for k in range(f):
        for r in range(h):
            for col in range(w):
                if not region[k, r, col]:
                    continue
                for ch in range(c):
                    d = float(a[k, r, col, ch]) - float(b[k, r, col, ch])
                    squared += d * d
                    absolute += abs(d)
                    count += 1
    return squared / count, absolute / count


class TestDetection(unittest.TestCase):

    def test_small_blobs_are_dropped(self):
        source = np.zeros((2, 16, 16, 3), dtype=np.float32)
        output = source.copy()
        output[0, 2:5, 2:5] = 0.5
        output[0, 10, 10, 1] = 0.9
        detected = detect_inserted_region(output, source)
        self.assertEqual(detected[0, 2:5, 2:5].sum(), 9)
        self.assertEqual(detected[0, 10, 10], 0)
        self.assertEqual(detected[1].sum(), 0)

    def test_threshold_is_strict(self):
        source = np.zeros((1, 8, 8, 1), dtype=np.float32)
        output = np.full_like(source, 0.25)
        self.assertEqual(detect_inserted_region(output, source, threshold=0.25, min_blob=1).sum(), 0)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            detect_inserted_region(np.zeros((1, 8, 8, 3)), np.zeros((1, 8, 8, 1)))


class TestPointAccuracy(unittest.TestCase):

    def test_matches_loop_oracle(self):
        gen = np.random.default_rng(0)
        for _ in range(100):
            mask = (gen.random((3, 12, 12)) > 0.5).astype(np.uint8)
            n = int(gen.integers(1, 8))
            annotations = [PointAnnotation(int(gen.integers(3)), int(gen.integers(12)), int(gen.integers(12)),
                                           Polarity.POSITIVE if i == 0 or gen.random() < 0.5 else Polarity.NEGATIVE,
                                           2)
                           for i in range(n)]
            acc_pos, acc_neg = point_accuracy(annotations, mask)
            expected_pos, expected_neg = loop_accuracy(annotations, mask)
            self.assertEqual(acc_pos, expected_pos)
            if math.isnan(expected_neg):
                self.assertTrue(math.isnan(acc_neg))
            else:
                self.assertEqual(acc_neg, expected_neg)

    def test_no_negatives_is_nan(self):
        _, acc_neg = point_accuracy([PointAnnotation(0, 1, 1, Polarity.POSITIVE, 2)],
                                    np.ones((1, 4, 4), dtype=np.uint8))
        self.assertTrue(math.isnan(acc_neg))

    def test_needs_a_positive(self):
        with self.assertRaises(ValidationError):
            point_accuracy([PointAnnotation(0, 1, 1, Polarity.NEGATIVE, 2)], np.zeros((1, 4, 4), dtype=np.uint8))

    def test_negative_accuracy_survives_missing_positives(self):
        mask = np.zeros((1, 4, 4), dtype=np.uint8)
        mask[0, 2, 2] = 1
        negatives = [PointAnnotation(0, 1, 1, Polarity.NEGATIVE, 2), PointAnnotation(0, 2, 2, Polarity.NEGATIVE, 2)]
        with self.assertRaises(ValidationError) as ctx:
            point_accuracy(negatives, mask)
        self.assertEqual(ctx.exception.details, {'negatives': 2, 'acc_neg': 0.5})


class TestRegionMetrics(unittest.TestCase):

    def test_matches_loop_oracle(self):
        gen = np.random.default_rng(1)
        for _ in range(100):
            a = gen.random((1, 8, 8, 1)).astype(np.float32)
            b = gen.random((1, 8, 8, 1)).astype(np.float32)
            region = (gen.random((1, 8, 8)) > 0.3).astype(np.uint8)
            region[0, 0, 0] = 1
            metrics = region_metrics(a, b, region)
            mse, mae = loop_errors(a, b, region)
            self.assertAlmostEqual(metrics.mse, mse, places=12)
            self.assertAlmostEqual(metrics.mae, mae, places=12)
            self.assertAlmostEqual(metrics.psnr, 10 * math.log10(1 / mse), places=9)

    def test_identical_videos(self):
        a = np.random.default_rng(2).random((2, 16, 16, 3)).astype(np.float32)
        metrics = region_metrics(a, a, np.ones((2, 16, 16), dtype=np.uint8))
        self.assertEqual(metrics.mse, 0.0)
        self.assertEqual(metrics.psnr, float('inf'))
        self.assertAlmostEqual(metrics.ssim, 1.0, places=10)
        np.testing.assert_allclose(ssim_map(a, a), 1.0, atol=1e-10)

    def test_ssim_is_symmetric(self):
        gen = np.random.default_rng(3)
        a, b = gen.random((1, 16, 16, 1)), gen.random((1, 16, 16, 1))
        np.testing.assert_allclose(ssim_map(a, b), ssim_map(b, a))

    def test_empty_region(self):
        a = np.zeros((1, 8, 8, 1))
        with self.assertRaises(ValidationError):
            region_metrics(a, a, np.zeros((1, 8, 8), dtype=np.uint8))

    def test_psnr(self):
        self.assertAlmostEqual(psnr_from_mse(0.01), 20.0)

    def test_background_region(self):
        mask = np.zeros((1, 16, 16), dtype=np.uint8)
        mask[0, 8, 8] = 1
        np.testing.assert_array_equal(background_region(mask, 0), 1 - mask)
        self.assertEqual(background_region(mask, 2).sum(), 256 - 25)

    def test_background_region_excludes_support(self):
        mask = np.zeros((1, 16, 16), dtype=np.uint8)
        mask[0, 8, 8] = 1
        support = np.zeros_like(mask)
        support[0, :, :2] = 1
        self.assertEqual(background_region(mask, 0, support).sum(), 256 - 1 - 32)
        with self.assertRaises(ShapeError):
            background_region(mask, 0, np.zeros((2, 16, 16), dtype=np.uint8))

    def test_compositing_support_matches_alpha(self):
        guidance = rasterize_points([PointAnnotation(0, 8, 8, Polarity.POSITIVE, 2),
                                     PointAnnotation(0, 20, 20, Polarity.NEGATIVE, 2)], (2, 24, 24, 3))
        support = compositing_support(guidance, 2, 3)
        np.testing.assert_array_equal(support, (dilate_and_feather(guidance, 2, 3)[..., 0] > 0).astype(np.uint8))
        self.assertEqual(support[1].sum(), 0)
        self.assertEqual(support[0, 20, 20], 0)


class TestWarpError(unittest.TestCase):

    def setUp(self):
        gen = np.random.default_rng(4)
        frame = gen.random((32, 32, 1))
        shifted = np.zeros_like(frame)
        shifted[:, 1:] = frame[:, :-1]
        shifted[:, 0] = gen.random((32, 1))
        self.video = np.stack([frame, shifted])

    def test_static_video(self):
        static = np.repeat(self.video[:1], 4, axis=0)
        self.assertEqual(ewarp(static), 0.0)
        self.assertEqual(ewarp(static, 'zero'), 0.0)

    def test_exact_flow_gives_zero(self):
        flows = np.zeros((1, 32, 32, 2))
        flows[..., 1] = 1.0
        self.assertEqual(ewarp(self.video, flows), 0.0)
        self.assertGreater(ewarp(self.video, 'zero'), 0.0)

    def test_block_matching_recovers_shift(self):
        flow = estimate_flow(self.video[0], self.video[1])
        np.testing.assert_array_equal(flow[:, 8:, 0], 0.0)
        np.testing.assert_array_equal(flow[:, 8:, 1], 1.0)

    def test_bad_flow_shape(self):
        with self.assertRaises(ShapeError):
            ewarp(self.video, np.zeros((2, 32, 32, 2)))


class TestReports(unittest.TestCase):

    def test_aggregate_skips_nan(self):
        rows = pd.DataFrame([
            {'record_id': 'a', 'acc_pos': 1.0, 'acc_neg': float('nan'), 'mse': 0.0, 'mae': 0.0,
             'psnr': float('inf'), 'ssim': 1.0, 'ewarp': 2.0},
            {'record_id': 'b', 'acc_pos': 0.5, 'acc_neg': 1.0, 'mse': 0.0, 'mae': 0.0,
             'psnr': float('inf'), 'ssim': 1.0, 'ewarp': 4.0},
        ])
        report = EvalReport('cell', {}, rows)
        summary = report.aggregate()
        self.assertEqual(summary['acc_pos'], 0.75)
        self.assertEqual(summary['acc_neg'], 1.0)
        self.assertEqual(summary['ewarp'], 3.0)
        self.assertEqual(summary['records'], 2)

        with tempfile.TemporaryDirectory() as tmp:
            paths = write_reports({'cell': report}, tmp, 'report')
            with open(paths['json']) as f:
                data = json.load(f)
            self.assertEqual(data['cell']['aggregate']['psnr'], 'inf')
            self.assertIsNone(data['cell']['rows'][0]['acc_neg'])
            self.assertEqual(len(pd.read_csv(paths['csv'])), 2)
            self.assertTrue(os.path.exists(paths['table']))

    def test_ablation_grids(self):
        config = BenchConfig()
        self.assertEqual([p.point_size for p in ablation_grid('size', config)], [2, 6, 10, 20, 30])
        modes = [p.mode.value for p in ablation_grid('density', config)]
        self.assertEqual(modes, ['first_frame_only', 'fixed_density', 'variable_density'])
        with self.assertRaises(ValidationError):
            ablation_grid('colour', config)


class TestRunner(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.records = synthesize_records(2, 2, SamplingPolicy.sparse(4), SeededRng(0),
                                         SynthConfig(frames=5, height=64, width=64))
        cls.params = init_params(DenoiserConfig(width=4, depth=2), SeededRng(0))
        cls.codec = LatentCodec(3, seed=0)
        cls.config = BenchConfig(sampler_steps=2, point_sizes=[4],
                                 density_modes=['variable_density', 'full_mask'])

    def test_background_is_preserved_exactly(self):
        source = self.records[0].tensor('x_src')
        guidance = rasterize_points([PointAnnotation(0, 30, 30, Polarity.POSITIVE, 4)], source.shape)
        output = insert_object(self.params, self.codec, source, guidance, 0, 2, SeededRng(1))
        outside = dilate_and_feather(guidance, 4, 4) == 0
        np.testing.assert_array_equal(output[outside], source[outside])

    def test_reports_per_cell(self):
        reports = run_pointbench(self.records, self.params, self.config.policy_grid(), self.config, self.codec)
        self.assertEqual(sorted(reports), ['full_mask', 'variable_density/size4'])
        for report in reports.values():
            self.assertEqual(len(report.rows), 2)
            self.assertTrue((report.rows['mse'] == 0.0).all())
            self.assertTrue(np.isinf(report.rows['psnr']).all())

    def test_point_size_grid_keeps_background(self):
        config = BenchConfig(sampler_steps=2, ablation_point_sizes=[2, 10, 30])
        reports = run_pointbench(self.records, self.params, ablation_grid('size', config), config, self.codec)
        self.assertEqual(sorted(reports), ['variable_density/size10', 'variable_density/size2',
                                           'variable_density/size30'])
        for report in reports.values():
            self.assertEqual(len(report.rows), 2)
            self.assertTrue((report.rows['mse'] == 0.0).all())

    def test_runner_is_deterministic(self):
        grid = self.config.policy_grid()[:1]
        a = run_pointbench(self.records, self.params, grid, self.config, self.codec, seed=3)
        b = run_pointbench(self.records, self.params, grid, self.config, self.codec, seed=3)
        for name in a:
            pd.testing.assert_frame_equal(a[name].rows, b[name].rows)

    def test_needs_records(self):
        with self.assertRaises(ValidationError):
            run_pointbench([], self.params, self.config.policy_grid(), self.config, self.codec)


@unittest.skipUnless(SLOW, 'set P2I_SLOW_TESTS=1 for the toy insertion run')
class TestToyInsertion(unittest.TestCase):
    """Seed-pinned teacher and student runs scored on 20 held-out records"""

    @classmethod
    def setUpClass(cls):
        synth = SynthConfig()
        policy = SamplingPolicy.sparse(10)
        stage1 = synthesize_records(24, 1, policy, SeededRng(0), synth)
        stage2 = synthesize_records(24, 2, policy, SeededRng(1), synth)
        held_out = synthesize_records(20, 2, policy, SeededRng(2), synth)
        denoiser = DenoiserConfig(width=32, depth=2)
        codec = LatentCodec(3, seed=0)
        teacher = train_stage1(TrainConfig(steps=500, denoiser=denoiser), stage1, codec).params
        student = train_stage2(TrainConfig(stage=2, steps=500, denoiser=denoiser), stage2, teacher, codec).params
        config = BenchConfig(point_sizes=[2, 10])
        cls.reports = run_pointbench(held_out, student, config.policy_grid(), config, codec)

    def test_student_follows_clicks(self):
        summary = self.reports['variable_density/size10'].aggregate()
        self.assertEqual(summary['records'], 20)
        self.assertGreaterEqual(summary['acc_pos'], 0.80)
        self.assertGreaterEqual(summary['acc_neg'], 0.90)

    def test_tiny_points_do_not_beat_default_size(self):
        small = self.reports['variable_density/size2'].aggregate()['acc_pos']
        default = self.reports['variable_density/size10'].aggregate()['acc_pos']
        self.assertGreaterEqual(default, small)


if __name__ == '__main__':
    unittest.main()
