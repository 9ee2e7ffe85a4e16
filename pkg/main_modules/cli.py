import argparse
import logging
import os
import sys
from dataclasses import fields
from functools import wraps
from pathlib import Path

import numpy as np
import torch
from helper_modules.analysis_helpers import MATCH_MODES
from helper_modules.config_helpers import Manifest, RunConfig, ShapeEntry, build_config, load_manifest, save_manifest
from helper_modules.descriptor_helpers import (
    DescriptorField,
    generate_synthetic,
    load_chirality,
    load_descriptors,
    load_labels,
    normalize,
    save_annotations,
    save_chirality,
    save_descriptors,
    save_labels,
)
from helper_modules.errors import EXIT_INTERNAL, EXIT_OK, EXIT_VALIDATION, ShapeMismatchError, StorageError, SymmetryError, ValidationError
from helper_modules.mesh_helpers import connected_components, load_mesh, save_mesh
from helper_modules.refine_helpers import build_instance, energy, solve, threshold_labels
from main_modules.disentangler import load_checkpoint
from main_modules.evaluator import CLUSTERINGS, FEATURES, EvaluationService
from main_modules.trainer import TrainerService, write_loss_log

logger = logging.getLogger(__name__)

# Get the log level from an environment variable when --log-level is not given
LOG_LEVEL_ENV = 'SYMDIS_LOG_LEVEL'
LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

# Set the endpoints and midpoint of the diverging color ramp
RAMP_LOW = np.array([59, 76, 192], dtype=np.float64)
RAMP_MID = np.array([255, 255, 255], dtype=np.float64)
RAMP_HIGH = np.array([180, 4, 38], dtype=np.float64)

# Set the defaults of the synthetic corpus generator
SYNTHETIC_COUNT = 20
SYNTHETIC_RESOLUTION = 16
SYNTHETIC_NOISE = 0.01

def configure_logging(level=None):
    level = (level or os.environ.get(LOG_LEVEL_ENV) or 'INFO').upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ValidationError(f'unknown log level {level!r}')
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)

def diverging_colors(values):

    """
    Maps a scalar field to RGB through a blue-white-red ramp after min-max normalization.
    A constant field maps to the midpoint; binary labels map to the two endpoints.

    Args:
        values (array_like): Per-vertex scalars.

    Returns:
        np.ndarray: (|V|, 3) uint8 colors.
    """

    values = np.asarray(values, dtype=np.float64)
    low, high = values.min(), values.max()
    t = np.full_like(values, 0.5) if high == low else (values - low) / (high - low)
    lower = RAMP_LOW + (RAMP_MID - RAMP_LOW) * np.clip(2.0 * t, 0.0, 1.0)[:, None]
    upper = RAMP_MID + (RAMP_HIGH - RAMP_MID) * np.clip(2.0 * t - 1.0, 0.0, 1.0)[:, None]
    return np.rint(np.where((t < 0.5)[:, None], lower, upper)).astype(np.uint8)

def write_report(path, pairs):

    """
    Writes `key=value` lines with sorted keys; floats use repr.
    """

    text = ''.join(f'{key}={value!r}\n' for key, value in sorted(pairs.items()))
    try:
        Path(path).write_text(text)
    except OSError as e:
        raise StorageError(f'cannot write report {path}: {e}')

def _write_text(path, text, what):
    try:
        Path(path).write_text(text)
    except OSError as e:
        raise StorageError(f'cannot write {what} {path}: {e}')

def _ensure_dir(path):
    try:
        Path(path).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f'cannot create directory {path}: {e}')

def reports_errors(f):

    """
    A decorator that turns exceptions raised by a command into a single stderr line
    `symdis-error <kind> <exit_code>: <message>` and the matching exit code.

    Args:
        f (function): The command to be decorated.

    Returns:
        decorated_function (function): The command returning an exit code.
    """

    @wraps(f)
    def decorated_function(self, *args, **kwargs):
        try:
            f(self, *args, **kwargs)
            return EXIT_OK
        except SymmetryError as e:
            logger.error('%s failed: %s', f.__name__, e)
            print(f'symdis-error {e.kind} {e.exit_code}: {e}', file=sys.stderr)
            return e.exit_code
        except Exception as e:
            logger.exception('%s failed unexpectedly', f.__name__)
            print(f'symdis-error internal {EXIT_INTERNAL}: {type(e).__name__}: {e}', file=sys.stderr)
            return EXIT_INTERNAL
    return decorated_function

def _add_config_flags(parser):
    for item in fields(RunConfig):
        kind = item.type if item.type in (int, float) else str
        parser.add_argument('--' + item.name.replace('_', '-'), dest=item.name, type=kind, default=None)

class SymmetryCLI:

    """
    Command-line front end with the subcommands gen-synthetic, train, infer, refine, eval,
    match and export-colors.

    Attributes:
        parser (argparse.ArgumentParser): The argument parser.
        commands (dict): Subcommand name to handler.
    """

    def __init__(self):
        self.commands = {
            'gen-synthetic': self.gen_synthetic,
            'train': self.train,
            'infer': self.infer,
            'refine': self.refine,
            'eval': self.evaluate,
            'match': self.match,
            'export-colors': self.export_colors,
        }
        self.parser = self.build_parser()

    def build_parser(self):
        parser = argparse.ArgumentParser(prog='symdis', description='Symmetry-aware descriptor disentanglement.')
        parser.add_argument('--log-level', default=None, help='DEBUG, INFO, WARNING or ERROR')
        sub = parser.add_subparsers(dest='command', required=True)

        gen = sub.add_parser('gen-synthetic', help='write a synthetic bilateral corpus')
        gen.add_argument('--seed', type=int, default=0)
        gen.add_argument('--count', type=int, default=SYNTHETIC_COUNT)
        gen.add_argument('--resolution', type=int, default=SYNTHETIC_RESOLUTION)
        gen.add_argument('--dim', type=int, default=RunConfig.dim)
        gen.add_argument('--noise', type=float, default=SYNTHETIC_NOISE)
        gen.add_argument('--basis-seed', type=int, default=None)
        gen.add_argument('--out-dir', required=True)

        train = sub.add_parser('train', help='train the disentangler on a manifest')
        train.add_argument('--config', default=None)
        _add_config_flags(train)

        infer = sub.add_parser('infer', help='write F^C and F^S of a descriptor file')
        infer.add_argument('--checkpoint', required=True)
        infer.add_argument('--descriptors', required=True)
        infer.add_argument('--out-chi', required=True)
        infer.add_argument('--out-agno', required=True)

        refine = sub.add_parser('refine', help='refine a chirality field by MRF min-cut')
        refine.add_argument('--chi', required=True)
        refine.add_argument('--mesh', required=True)
        refine.add_argument('--omega', type=float, default=RunConfig.omega)
        refine.add_argument('--out-labels', required=True)
        refine.add_argument('--out-report', default=None)

        evaluate = sub.add_parser('eval', help='evaluate a manifest')
        evaluate.add_argument('--config', default=None)
        evaluate.add_argument('--cluster', choices=CLUSTERINGS, default='chi')
        evaluate.add_argument('--features', choices=FEATURES, default='agno')
        evaluate.add_argument('--out-report', default=None)
        evaluate.add_argument('--out-json', default=None)
        _add_config_flags(evaluate)

        match = sub.add_parser('match', help='match two shapes')
        match.add_argument('--source-mesh', required=True)
        match.add_argument('--source-descriptors', required=True)
        match.add_argument('--target-mesh', required=True)
        match.add_argument('--target-descriptors', required=True)
        match.add_argument('--checkpoint', default=None)
        match.add_argument('--mode', choices=MATCH_MODES, default='raw')
        match.add_argument('--alpha', type=float, default=RunConfig.alpha)
        match.add_argument('--omega', type=float, default=RunConfig.omega)
        match.add_argument('--out', required=True)

        export = sub.add_parser('export-colors', help='color a mesh by a scalar field or labels')
        export.add_argument('--mesh', required=True)
        source = export.add_mutually_exclusive_group(required=True)
        source.add_argument('--chi', default=None)
        source.add_argument('--labels', default=None)
        export.add_argument('--out', required=True)
        export.add_argument('--ascii', action='store_true')
        return parser

    def run(self, argv=None):

        """
        Parses arguments and runs one subcommand.

        Returns:
            int: The exit code.
        """

        try:
            args = self.parser.parse_args(argv)
        except SystemExit as e:
            if not e.code:
                return EXIT_OK
            print(f'symdis-error validation {EXIT_VALIDATION}: invalid command line', file=sys.stderr)
            return EXIT_VALIDATION
        try:
            configure_logging(args.log_level)
        except ValidationError as e:
            print(f'symdis-error {e.kind} {e.exit_code}: {e}', file=sys.stderr)
            return e.exit_code
        return self.commands[args.command](args)

    def _config(self, args):
        overrides = {item.name: getattr(args, item.name, None) for item in fields(RunConfig)}
        config = build_config(args.config, overrides)
        torch.set_num_threads(config.num_threads)
        return config

    @reports_errors
    def gen_synthetic(self, args):
        if args.count < 1:
            raise ValidationError(f'count must be at least 1, got {args.count}')
        out_dir = Path(args.out_dir)
        _ensure_dir(out_dir)
        basis_seed = args.seed if args.basis_seed is None else args.basis_seed
        manifest = Manifest(args.dim, args.seed, root=out_dir)
        for index in range(args.count):
            name = f'shape_{index:03d}'
            mesh, field, gt = generate_synthetic(args.seed + index, args.resolution, args.dim, args.noise, basis_seed)
            save_mesh(out_dir / f'{name}.ply', mesh)
            save_descriptors(out_dir / f'{name}.sdf', field)
            save_annotations(out_dir / f'{name}.ann', gt)
            manifest.shapes.append(ShapeEntry(name, f'{name}.ply', f'{name}.sdf', f'{name}.ann'))
        save_manifest(out_dir / 'manifest.json', manifest)
        logger.info('Wrote %d synthetic shapes to %s', args.count, out_dir)

    @reports_errors
    def train(self, args):
        config = self._config(args)
        config.require('manifest', 'output_dir')
        _ensure_dir(config.output_dir)
        if not config.checkpoint:
            config.checkpoint = str(Path(config.output_dir) / 'model.ckpt')
        trainer = TrainerService(config)
        result = trainer.train(trainer.load_corpus(load_manifest(config.manifest)))
        write_loss_log(Path(config.output_dir) / 'loss_log.csv', result.log)

    @reports_errors
    def infer(self, args):
        field = load_descriptors(args.descriptors)
        model = load_checkpoint(args.checkpoint, field.dim)
        chi, agno, _, agno_flipped = model.disentangle(normalize(field))
        save_chirality(args.out_chi, chi)
        save_descriptors(args.out_agno, DescriptorField(agno, agno_flipped))
        logger.info('Wrote chirality of %d vertices to %s', len(chi), args.out_chi)

    @reports_errors
    def refine(self, args):
        chi = load_chirality(args.chi)
        mesh = load_mesh(args.mesh)
        instance = build_instance(chi, mesh, args.omega)
        labeling = solve(instance)
        save_labels(args.out_labels, labeling.labels)
        if args.out_report:
            threshold = threshold_labels(chi)
            write_report(args.out_report, {
                'energy': labeling.energy,
                'energy_threshold': energy(instance, threshold),
                'components': connected_components(mesh, labeling.labels),
                'components_threshold': connected_components(mesh, threshold),
                'label1_vertices': int(labeling.labels.sum()),
                'omega': float(args.omega),
                'vertices': mesh.num_vertices,
            })
        logger.info('Refined %d vertices, energy %.6g', mesh.num_vertices, labeling.energy)

    @reports_errors
    def evaluate(self, args):
        config = self._config(args)
        config.require('manifest')
        manifest = load_manifest(config.manifest)
        model = load_checkpoint(config.checkpoint, manifest.dim) if config.checkpoint else None
        report = EvaluationService(config, model).evaluate(manifest, args.cluster, args.features)
        text = report.to_text()
        if args.out_report:
            _write_text(args.out_report, text, 'report')
        else:
            sys.stdout.write(text)
        if args.out_json:
            _write_text(args.out_json, report.to_json(), 'report')

    @reports_errors
    def match(self, args):
        config = RunConfig(match_mode=args.mode, alpha=args.alpha, omega=args.omega).validate()
        source = (load_mesh(args.source_mesh), load_descriptors(args.source_descriptors))
        target = (load_mesh(args.target_mesh), load_descriptors(args.target_descriptors))
        if source[1].dim != target[1].dim:
            raise ShapeMismatchError(f'descriptor widths differ: {source[1].dim} vs {target[1].dim}')
        model = load_checkpoint(args.checkpoint, source[1].dim) if args.checkpoint else None
        if model is None and args.mode != 'raw':
            raise ValidationError(f'matching mode {args.mode} needs a checkpoint')
        service = EvaluationService(config, model)
        prediction = service.match_pair(service.prepare('source', *source), service.prepare('target', *target))
        _write_text(args.out, ''.join(f'{index}\n' for index in prediction), 'vertex map')
        logger.info('Matched %d source vertices with mode %s', len(prediction), args.mode)

    @reports_errors
    def export_colors(self, args):
        mesh = load_mesh(args.mesh)
        values = load_chirality(args.chi) if args.chi else load_labels(args.labels)
        if values.shape != (mesh.num_vertices,):
            raise ShapeMismatchError(f'{values.size} field values for {mesh.num_vertices} vertices')
        save_mesh(args.out, mesh, diverging_colors(values), binary=not args.ascii)
        logger.info('Wrote colored mesh %s', args.out)
