"""
Point2Insert command line
Subcommands: synth, train-teacher, train-student, infer, eval, ablate, gradcheck
"""

import argparse
import os
import sys
import time
from dataclasses import replace
from typing import Any, Dict, List, Optional, Sequence

from src.bench import (
    ablation_grid, detect_inserted_region, insert_object, reports_table, run_pointbench, write_reports,
)
from src.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from src.config import CLASS_TAGS
from src.config_manager import ConfigurationManager
from src.datasynth import build_dataset
from src.denoiser import GRADCHECK_TOLERANCE, gradient_check
from src.exceptions import Point2InsertError, UsageError, ValidationError
from src.latent_sim import LatentCodec
from src.notifications import log_info, log_error, alert_error
from src.pointmap import (
    DensityMode, SamplingPolicy, load_annotations, mask_to_point_map, rasterize_points, sample_points_from_mask,
    save_annotations,
)
from src.storage import MANIFEST_FILE, DatasetRecord, DatasetStorage, write_json
from src.tensor_io import SeededRng, check_video, read_tensor, write_tensor
from src.trainer import distillation_gap, train_stage1, train_stage2

SUBCOMMANDS = ('synth', 'train-teacher', 'train-student', 'infer', 'eval', 'ablate', 'gradcheck')


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, help='Master seed')
    common.add_argument('--config', help='JSON config file (defaults < file < flags)')
    common.add_argument('--out', help='Output directory')
    common.add_argument('--print-config', action='store_true', help='Print the resolved configuration')

    parser = argparse.ArgumentParser(prog='point2insert', description='Point-guided video insertion pipeline')
    sub = parser.add_subparsers(dest='subcommand', required=True)

    synth = sub.add_parser('synth', parents=[common], help='Build a synthetic dataset')
    synth.add_argument('--count', type=int, help='Number of scenes')
    synth.add_argument('--stage', type=int, choices=[1, 2], help='Dataset stage')
    synth.add_argument('--point-size', type=int)
    synth.add_argument('--density-mode', choices=[m.value for m in DensityMode])

    teacher = sub.add_parser('train-teacher', parents=[common], help='Stage-1 training')
    teacher.add_argument('--data', required=True, help='Stage-1 dataset directory')
    teacher.add_argument('--steps', type=int)
    teacher.add_argument('--batch-size', type=int)
    teacher.add_argument('--lr', type=float)
    teacher.add_argument('--mask-mix', type=float, help='Probability of a mask-guided example')

    student = sub.add_parser('train-student', parents=[common], help='Stage-2 distillation')
    student.add_argument('--data', required=True, help='Stage-2 dataset directory')
    student.add_argument('--teacher', required=True, help='Teacher checkpoint directory')
    student.add_argument('--steps', type=int)
    student.add_argument('--batch-size', type=int)
    student.add_argument('--lr', type=float)
    student.add_argument('--lambda1', type=float)
    student.add_argument('--lambda2', type=float)
    student.add_argument('--point-size', type=int)
    student.add_argument('--weight-etd', action='store_true', default=None,
                         help='Apply point-map weights to the distillation residual too')

    infer = sub.add_parser('infer', parents=[common], help='Insert an object into one video')
    infer.add_argument('--checkpoint', required=True)
    infer.add_argument('--data', help='Dataset directory to take the source record from')
    infer.add_argument('--record', help='Record id inside --data (default: first)')
    infer.add_argument('--source', help='Source video P2IT file')
    infer.add_argument('--points', help='Annotation JSON for --source')
    infer.add_argument('--mask', help='Mask P2IT file for --source with mask guidance')
    infer.add_argument('--tag', choices=CLASS_TAGS, help='Object class for --source')
    infer.add_argument('--guidance', choices=['points', 'mask'])
    infer.add_argument('--steps', type=int, help='Sampler steps')

    evaluate = sub.add_parser('eval', parents=[common], help='Run the bench on a dataset')
    evaluate.add_argument('--checkpoint', required=True)
    evaluate.add_argument('--data', required=True, help='Stage-2 evaluation dataset directory')
    evaluate.add_argument('--point-size', type=int, nargs='+')
    evaluate.add_argument('--density-mode', nargs='+', choices=[m.value for m in DensityMode])
    evaluate.add_argument('--steps', type=int, help='Sampler steps')

    ablate = sub.add_parser('ablate', parents=[common], help='Ablation grids')
    ablate.add_argument('--axis', required=True, choices=['size', 'density', 'components', 'guidance'])
    ablate.add_argument('--data', required=True, help='Evaluation dataset (stage 2)')
    ablate.add_argument('--checkpoint', help='Model for the size/density axes')
    ablate.add_argument('--teacher', help='Teacher checkpoint for the components axis')
    ablate.add_argument('--train-data', help='Training dataset for the components/guidance axes')
    ablate.add_argument('--steps', type=int, help='Training steps per ablation run')
    ablate.add_argument('--point-size', type=int, nargs='+')

    gradcheck = sub.add_parser('gradcheck', parents=[common], help='Backward vs finite differences')
    gradcheck.add_argument('--step', type=float, default=1e-3, help='Finite-difference step h')
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    get = lambda name: getattr(args, name, None)
    overrides = {
        'subcommand': args.subcommand,
        'seed': get('seed'),
        'out_dir': get('out'),
        'count': get('count'),
        'stage': get('stage'),
        'dataset_dir': get('data'),
        'checkpoint': get('checkpoint'),
        'teacher_checkpoint': get('teacher'),
        'guidance': get('guidance'),
        'axis': get('axis'),
        'train.batch_size': get('batch_size'),
        'train.learning_rate': get('lr'),
        'train.mask_mix': get('mask_mix'),
        'train.lambda1': get('lambda1'),
        'train.lambda2': get('lambda2'),
        'train.weight_etd': get('weight_etd'),
    }
    if args.subcommand in ('train-teacher', 'train-student'):
        overrides['train.steps'] = get('steps')
        overrides['train.stage'] = 1 if args.subcommand == 'train-teacher' else 2
        overrides['train.point_size'] = get('point_size')
    elif args.subcommand in ('infer', 'eval'):
        overrides['bench.sampler_steps'] = get('steps')
    elif args.subcommand == 'ablate':
        overrides['train.steps'] = get('steps')
    if args.subcommand == 'synth':
        overrides['policy.point_size'] = get('point_size')
        overrides['policy.mode'] = get('density_mode')
    if args.subcommand in ('eval', 'ablate'):
        sizes = get('point_size')
        overrides['bench.point_sizes'] = list(sizes) if sizes else None
        if args.subcommand == 'ablate' and sizes:
            overrides['bench.ablation_point_sizes'] = list(sizes)
        modes = get('density_mode')
        overrides['bench.density_modes'] = list(modes) if modes else None
    return overrides


def _require_dir(path: Optional[str], what: str) -> str:
    if not path or not os.path.isdir(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _require_file(path: Optional[str], what: str) -> str:
    if not path or not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _open_dataset(path: Optional[str]) -> DatasetStorage:
    root = _require_dir(path, 'Dataset directory')
    _require_file(os.path.join(root, MANIFEST_FILE), 'Dataset manifest')
    return DatasetStorage(root)


class Point2Insert:
    """Main Point2Insert application"""

    def __init__(self, manager: ConfigurationManager, args: Optional[argparse.Namespace] = None):
        self.manager = manager
        self.config = manager.config
        self.args = args or argparse.Namespace()
        self.out_dir = self.config.out_dir or os.path.join('runs', self.config.subcommand)

    def _load_scenes(self, path: Optional[str], stage: int) -> List[DatasetRecord]:
        storage = _open_dataset(path)
        manifest = storage.load_manifest()
        if manifest.get('stage') != stage:
            raise ValidationError(f"Dataset {path} is a stage {manifest.get('stage')} dataset, "
                                  f"stage {stage} is required")
        scenes = storage.load_scenes()
        if not scenes:
            raise ValidationError(f"Dataset {path} is empty")
        return scenes

    def _load_model(self, path: Optional[str]) -> Checkpoint:
        return load_checkpoint(_require_dir(path, 'Checkpoint directory'))

    def _codec(self, records: Sequence[DatasetRecord], seed: int) -> LatentCodec:
        return LatentCodec(records[0].tensor('x').shape[-1], seed=seed)

    def run_synth(self) -> Dict[str, Any]:
        cfg = self.config
        manifest = build_dataset(cfg.count, cfg.stage, cfg.policy, SeededRng(cfg.seed), self.out_dir, cfg.synth)
        return {'dataset_id': manifest['dataset_id'], 'records': len(manifest['records'])}

    def run_train_teacher(self) -> Dict[str, Any]:
        cfg = self.config
        scenes = self._load_scenes(cfg.dataset_dir, 1)
        codec = self._codec(scenes, cfg.seed)
        result = train_stage1(cfg.train, scenes, codec, log_path=os.path.join(self.out_dir, 'train_log.jsonl'))
        save_checkpoint(self.out_dir, result.params, result.opt_state, self.manager.snapshot(),
                        seed=cfg.seed, codec_seed=codec.seed)
        return {'steps': cfg.train.steps, 'final_l_fm': result.log[-1]['l_fm'] if result.log else None,
                'guidance_counts': result.guidance_counts}

    def run_train_student(self) -> Dict[str, Any]:
        cfg = self.config
        teacher = self._load_model(cfg.teacher_checkpoint)
        scenes = self._load_scenes(cfg.dataset_dir, 2)
        # The student inherits the teacher architecture
        cfg.train.denoiser = teacher.params.config
        codec = self._codec(scenes, teacher.codec_seed)
        result = train_stage2(cfg.train, scenes, teacher.params, codec,
                              log_path=os.path.join(self.out_dir, 'train_log.jsonl'))
        save_checkpoint(self.out_dir, result.params, result.opt_state, self.manager.snapshot(),
                        seed=cfg.seed, codec_seed=codec.seed)
        return {'steps': cfg.train.steps, 'final_total': result.log[-1]['total'] if result.log else None,
                'guidance_counts': result.guidance_counts}

    def _infer_inputs(self):
        """(source video, guidance video, annotations or None, tag id, record id)."""
        cfg = self.config
        opt = lambda name: getattr(self.args, name, None)
        if opt('source'):
            source = check_video(read_tensor(_require_file(opt('source'), 'Source video')))
            tag = CLASS_TAGS.index(opt('tag') or CLASS_TAGS[0])
            if cfg.guidance == 'mask':
                mask = read_tensor(_require_file(opt('mask'), 'Mask file')).astype('uint8')
                if mask.ndim == 4:
                    mask = mask[..., 0]
                return source, mask_to_point_map(mask, source.shape[-1]), None, tag, 'source'
            annotations = load_annotations(_require_file(opt('points'), 'Annotation file'))
            return source, rasterize_points(annotations, source.shape), annotations, tag, 'source'

        storage = _open_dataset(cfg.dataset_dir)
        scenes = storage.load_scenes()
        if not scenes:
            raise ValidationError(f"Dataset {cfg.dataset_dir} is empty")
        record = scenes[0]
        if opt('record'):
            matches = [s for s in scenes if s.record_id == opt('record')]
            if not matches:
                raise UsageError(f"Record {opt('record')} not in {cfg.dataset_dir}")
            record = matches[0]
        if record.stage == 2:
            source = record.tensor('x_src')
        else:
            source = record.tensor('x_m' if cfg.guidance == 'mask' else 'x_inp')
        if cfg.guidance == 'mask':
            return source, mask_to_point_map(record.mask, source.shape[-1]), None, record.tag_id, record.record_id
        annotations = record.annotations
        if not annotations:
            annotations = sample_points_from_mask(record.mask, SamplingPolicy.sparse(cfg.policy.point_size),
                                                  SeededRng(cfg.seed, 'infer/clicks'))
        return source, rasterize_points(annotations, source.shape), annotations, record.tag_id, record.record_id

    def run_infer(self) -> Dict[str, Any]:
        cfg = self.config
        model = self._load_model(cfg.checkpoint)
        source, guidance, annotations, tag, record_id = self._infer_inputs()
        codec = LatentCodec(source.shape[-1], seed=model.codec_seed)
        output = insert_object(model.params, codec, source, guidance, tag, cfg.bench.sampler_steps,
                               SeededRng(cfg.seed, 'infer'), cfg.bench.composite,
                               cfg.bench.dilation_radius, cfg.bench.feather_width)
        detected = detect_inserted_region(output, source, cfg.bench.threshold, cfg.bench.min_blob)
        os.makedirs(self.out_dir, exist_ok=True)
        write_tensor(os.path.join(self.out_dir, 'output.p2it'), output)
        write_tensor(os.path.join(self.out_dir, 'detected.p2it'), detected[..., None])
        if annotations is not None:
            save_annotations(os.path.join(self.out_dir, 'annotations.json'), annotations)
        return {'record': record_id, 'guidance': cfg.guidance, 'detected_area': float(detected.mean())}

    def _bench(self, params, scenes, codec_seed, grid, stem: str) -> Dict[str, Any]:
        cfg = self.config
        reports = run_pointbench(scenes, params, grid, cfg.bench, self._codec(scenes, codec_seed), seed=cfg.seed)
        write_reports(reports, self.out_dir, stem)
        print(reports_table(reports))
        return {name: report.aggregate() for name, report in reports.items()}

    def run_eval(self) -> Dict[str, Any]:
        cfg = self.config
        model = self._load_model(cfg.checkpoint)
        scenes = self._load_scenes(cfg.dataset_dir, 2)
        return self._bench(model.params, scenes, model.codec_seed, cfg.bench.policy_grid(), 'report')

    def run_ablate(self) -> Dict[str, Any]:
        cfg = self.config
        scenes = self._load_scenes(cfg.dataset_dir, 2)
        if cfg.axis in ('size', 'density'):
            model = self._load_model(cfg.checkpoint)
            return self._bench(model.params, scenes, model.codec_seed,
                               ablation_grid(cfg.axis, cfg.bench), f'ablate_{cfg.axis}')
        if cfg.axis == 'components':
            return self._ablate_components(scenes)
        return self._ablate_guidance(scenes)

    def _ablate_components(self, eval_scenes: List[DatasetRecord]) -> Dict[str, Any]:
        cfg = self.config
        teacher = self._load_model(cfg.teacher_checkpoint)
        cfg.train.denoiser = teacher.params.config
        train_scenes = self._load_scenes(getattr(self.args, 'train_data', None), 2)
        codec = self._codec(train_scenes, teacher.codec_seed)
        runs = {
            'full': (cfg.train.lambda1, cfg.train.lambda2),
            'no_pa': (cfg.train.lambda1, 0.0),
            'no_etd': (0.0, cfg.train.lambda2),
            'fm_only': (0.0, 0.0),
        }
        summary = {}
        for name, (lambda1, lambda2) in runs.items():
            train_cfg = replace(cfg.train, lambda1=lambda1, lambda2=lambda2, stage=2)
            result = train_stage2(train_cfg, train_scenes, teacher.params, codec)
            gap = distillation_gap(result.params, teacher.params, eval_scenes, codec, SeededRng(cfg.seed, 'ablate'))
            summary[name] = {
                'lambda1': lambda1, 'lambda2': lambda2, 'distillation_gap': gap,
                'bench': self._bench(result.params, eval_scenes, codec.seed, cfg.bench.policy_grid(),
                                     f'ablate_components_{name}'),
            }
        write_json(os.path.join(self.out_dir, 'ablate_components.json'), summary)
        return summary

    def _ablate_guidance(self, eval_scenes: List[DatasetRecord]) -> Dict[str, Any]:
        cfg = self.config
        train_scenes = self._load_scenes(getattr(self.args, 'train_data', None), 1)
        codec = self._codec(train_scenes, cfg.seed)
        summary = {}
        for name, mask_mix, mode in (('mask_only', 1.0, DensityMode.FULL_MASK.value),
                                     ('point_only', 0.0, DensityMode.VARIABLE_DENSITY.value)):
            result = train_stage1(replace(cfg.train, mask_mix=mask_mix, stage=1), train_scenes, codec)
            bench = replace(cfg.bench, density_modes=[mode])
            reports = run_pointbench(eval_scenes, result.params, bench.policy_grid(), bench, codec, seed=cfg.seed)
            write_reports(reports, self.out_dir, f'ablate_guidance_{name}')
            summary[name] = {name_: r.aggregate() for name_, r in reports.items()}
        write_json(os.path.join(self.out_dir, 'ablate_guidance.json'), summary)
        return summary

    def run_gradcheck(self) -> Dict[str, Any]:
        errors = gradient_check(self.config.seed, h=getattr(self.args, 'step', 1e-3))
        worst = max(errors.values())
        for name, error in errors.items():
            print(f"{name:<12} max relative error {error:.3e}")
        print(f"max relative error: {worst:.3e}")
        return {'errors': errors, 'max_relative_error': worst, 'passed': worst < GRADCHECK_TOLERANCE}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0

    start = time.time()
    try:
        try:
            manager = ConfigurationManager(args.config, _overrides(args))
        except ValidationError as e:
            raise UsageError(f"Invalid configuration: {e}", details=e.details)
        if args.print_config:
            manager.print_configuration()
        app = Point2Insert(manager, args)

        if args.subcommand != 'gradcheck' or args.out:
            manager.write_snapshot(app.out_dir)
        log_info(f"Starting {args.subcommand} (seed {manager.config.seed})")
        handler = getattr(app, 'run_' + args.subcommand.replace('-', '_'))
        results = handler()
    except UsageError as e:
        log_error(f"Usage error: {e}")
        print(f"ERROR: {e}", file=sys.stderr)
        return 2
    except Point2InsertError as e:
        alert_error(args.subcommand, e)
        print(f"ERROR: {e}", file=sys.stderr)
        return 1

    print("=" * 60)
    print("POINT2INSERT EXECUTION SUMMARY")
    print("=" * 60)
    print(f"Subcommand: {args.subcommand}")
    print(f"Duration: {time.time() - start:.1f}s")
    for key, value in results.items():
        print(f"{key}: {value}")
    print("=" * 60)

    if args.subcommand == 'gradcheck' and not results['passed']:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
