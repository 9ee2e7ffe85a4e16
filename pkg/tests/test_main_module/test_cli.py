import io
import os
import sys
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

import numpy as np
from helper_modules.descriptor_helpers import load_chirality, load_descriptors, load_labels, save_chirality, save_labels
from helper_modules.mesh_helpers import load_colors, load_mesh, save_mesh
from main_modules.cli import RAMP_HIGH, RAMP_LOW, RAMP_MID, SymmetryCLI, diverging_colors

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), os.path.pardir)))

from fixtures import flat_grid

# Set the flags of a small corpus that trains in a few seconds
SMALL_CORPUS = ['--count', '2', '--resolution', '3', '--dim', '8', '--seed', '5']

# Set the consistency sample of the recovery run; the consistency loss grows with the sample and
# at 512 vertices it keeps chirality in the agnostic block
RECOVERY_SAMPLES = 4

class TestSymmetryCLI(unittest.TestCase):

    def setUp(self):

        """
        Creates a scratch directory and a CLI instance.
        """

        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.cli = SymmetryCLI()

    def tearDown(self):
        self.tmp.cleanup()

    def run_cli(self, *argv):

        """
        Runs one command with logging silenced.

        Returns:
            Tuple: (exit code, stdout text, stderr text).
        """

        stdout, stderr = io.StringIO(), io.StringIO()
        with redirect_stdout(stdout), redirect_stderr(stderr):
            code = self.cli.run(['--log-level', 'CRITICAL'] + [str(arg) for arg in argv])
        return code, stdout.getvalue(), stderr.getvalue()

    def generate(self, name='corpus'):
        out = self.dir / name
        code, _, _ = self.run_cli('gen-synthetic', *SMALL_CORPUS, '--out-dir', out)
        self.assertEqual(code, 0)
        return out

    def train(self, corpus, output='run'):
        code, _, stderr = self.run_cli('train', '--manifest', corpus / 'manifest.json', '--output-dir', self.dir / output,
                                       '--dim', '8', '--steps', '4', '--consistency-samples', '16', '--learning-rate', '1e-3')
        self.assertEqual(code, 0, stderr)
        return self.dir / output

    def test_gen_synthetic_is_deterministic(self):

        """
        Test that two runs with the same seed write byte-identical corpora.
        """

        first, second = self.generate('first'), self.generate('second')
        names = sorted(path.name for path in first.iterdir())
        self.assertEqual(names, sorted(path.name for path in second.iterdir()))
        self.assertIn('manifest.json', names)
        self.assertIn('shape_001.ann', names)
        for name in names:
            self.assertEqual((first / name).read_bytes(), (second / name).read_bytes(), name)

    def test_train_infer_refine_eval(self):

        """
        Test the file pipeline from corpus generation to an evaluation report.
        """

        corpus = self.generate()
        run = self.train(corpus)
        self.assertTrue((run / 'model.ckpt').exists())
        log_lines = (run / 'loss_log.csv').read_text().splitlines()
        self.assertEqual(log_lines[0], 'step,shape,L_dis,L_sim,L_rec,L_bou,L_con,total')
        self.assertEqual(len(log_lines), 5)

        code, _, _ = self.run_cli('infer', '--checkpoint', run / 'model.ckpt', '--descriptors', corpus / 'shape_000.sdf',
                                  '--out-chi', self.dir / 'chi.scv', '--out-agno', self.dir / 'agno.sdf')
        self.assertEqual(code, 0)
        num_vertices = load_mesh(corpus / 'shape_000.ply').num_vertices
        chi = load_chirality(self.dir / 'chi.scv')
        self.assertEqual(chi.shape, (num_vertices,))
        self.assertLessEqual(np.abs(chi).max(), 1.0 + 1e-12)
        self.assertEqual(load_descriptors(self.dir / 'agno.sdf').dim, 7)

        code, _, _ = self.run_cli('refine', '--chi', self.dir / 'chi.scv', '--mesh', corpus / 'shape_000.ply',
                                  '--out-labels', self.dir / 'labels.txt', '--out-report', self.dir / 'refine.txt')
        self.assertEqual(code, 0)
        self.assertEqual(load_labels(self.dir / 'labels.txt').shape, (num_vertices,))
        report = dict(line.split('=', 1) for line in (self.dir / 'refine.txt').read_text().splitlines())
        self.assertEqual(sorted(report), ['components', 'components_threshold', 'energy', 'energy_threshold',
                                          'label1_vertices', 'omega', 'vertices'])
        self.assertLessEqual(float(report['energy']), float(report['energy_threshold']))
        self.assertEqual(int(report['vertices']), num_vertices)

        evaluation = ['eval', '--manifest', corpus / 'manifest.json', '--checkpoint', run / 'model.ckpt']
        code, stdout, _ = self.run_cli(*evaluation)
        self.assertEqual(code, 0)
        keys = [line.split('=', 1)[0] for line in stdout.splitlines()]
        for key in ('acc_lr', 'acc_lr_refined', 'avg_components', 'err_int', 'err_mat', 'count.shapes'):
            self.assertIn(key, keys)

        code, _, _ = self.run_cli(*evaluation, '--out-report', self.dir / 'a.txt', '--out-json', self.dir / 'a.json')
        self.assertEqual(code, 0)
        code, _, _ = self.run_cli(*evaluation, '--out-report', self.dir / 'b.txt')
        self.assertEqual((self.dir / 'a.txt').read_bytes(), (self.dir / 'b.txt').read_bytes())
        self.assertEqual((self.dir / 'a.txt').read_text(), stdout)
        self.assertTrue((self.dir / 'a.json').read_text().startswith('{'))

    def test_training_is_reproducible(self):

        """
        Test that two training runs with one seed write identical loss logs and checkpoints.
        """

        corpus = self.generate()
        first, second = self.train(corpus, 'first'), self.train(corpus, 'second')
        for name in ('loss_log.csv', 'model.ckpt'):
            self.assertEqual((first / name).read_bytes(), (second / name).read_bytes(), name)

    def test_match(self):

        """
        Test that raw matching of a shape with itself gives the identity and that other modes need a checkpoint.
        """

        corpus = self.generate()
        shape = ['--source-mesh', corpus / 'shape_000.ply', '--source-descriptors', corpus / 'shape_000.sdf',
                 '--target-mesh', corpus / 'shape_000.ply', '--target-descriptors', corpus / 'shape_000.sdf']
        code, _, _ = self.run_cli('match', *shape, '--out', self.dir / 'map.txt')
        self.assertEqual(code, 0)
        indices = [int(line) for line in (self.dir / 'map.txt').read_text().splitlines()]
        self.assertEqual(indices, list(range(len(indices))))

        code, _, stderr = self.run_cli('match', *shape, '--mode', 'agno+chi', '--out', self.dir / 'map.txt')
        self.assertEqual(code, 1)
        self.assertTrue(stderr.startswith('symdis-error validation 1:'))

        run = self.train(corpus)
        code, _, _ = self.run_cli('match', *shape, '--mode', 'agno+refined', '--checkpoint', run / 'model.ckpt',
                                  '--out', self.dir / 'refined.txt')
        self.assertEqual(code, 0)
        self.assertEqual(len((self.dir / 'refined.txt').read_text().splitlines()), len(indices))

    def test_error_reporting(self):

        """
        Test the single-line error prefix and the exit codes of failing commands.
        """

        code, _, stderr = self.run_cli('infer', '--checkpoint', self.dir / 'missing.ckpt', '--descriptors', self.dir / 'missing.sdf',
                                       '--out-chi', self.dir / 'c.scv', '--out-agno', self.dir / 'a.sdf')
        self.assertEqual(code, 2)
        self.assertEqual(len(stderr.splitlines()), 1)
        self.assertTrue(stderr.startswith('symdis-error io 2:'))

        code, _, stderr = self.run_cli('train', '--steps', 'many')
        self.assertEqual(code, 1)
        self.assertIn('symdis-error validation 1: invalid command line', stderr)

        code, _, stderr = self.run_cli('train', '--steps', '3')
        self.assertEqual(code, 1)
        self.assertIn('missing required setting manifest', stderr)

        (self.dir / 'bad.cfg').write_text('steps = 3\nspeed = 2\n')
        code, _, stderr = self.run_cli('train', '--config', self.dir / 'bad.cfg')
        self.assertEqual(code, 1)
        self.assertTrue(stderr.startswith('symdis-error format 1:'))
        self.assertIn('bad.cfg:2:', stderr)

        code, _, _ = self.run_cli('gen-synthetic', '--count', '0', '--out-dir', self.dir / 'empty')
        self.assertEqual(code, 1)

        stdout, stderr = io.StringIO(), io.StringIO()
        with redirect_stdout(stdout), redirect_stderr(stderr):
            self.assertEqual(self.cli.run(['--log-level', 'LOUD', 'gen-synthetic', '--out-dir', str(self.dir)]), 1)
            self.assertEqual(self.cli.run(['--help']), 0)
        self.assertIn('gen-synthetic', stdout.getvalue())

    def test_export_colors(self):

        """
        Test that labels give exactly two colors, a constant field one, and the ASCII variant parses.
        """

        mesh = flat_grid(4, 3)
        save_mesh(self.dir / 'grid.ply', mesh)
        save_labels(self.dir / 'labels.txt', (mesh.positions[:, 0] >= 2).astype(int))
        save_chirality(self.dir / 'flat.scv', np.full(mesh.num_vertices, 0.3))

        code, _, _ = self.run_cli('export-colors', '--mesh', self.dir / 'grid.ply', '--labels', self.dir / 'labels.txt',
                                  '--out', self.dir / 'labels.ply')
        self.assertEqual(code, 0)
        colors = load_colors(self.dir / 'labels.ply')
        self.assertEqual({tuple(c) for c in colors.tolist()}, {tuple(RAMP_LOW.astype(int)), tuple(RAMP_HIGH.astype(int))})

        code, _, _ = self.run_cli('export-colors', '--mesh', self.dir / 'grid.ply', '--chi', self.dir / 'flat.scv',
                                  '--out', self.dir / 'flat.ply', '--ascii')
        self.assertEqual(code, 0)
        self.assertEqual({tuple(c) for c in load_colors(self.dir / 'flat.ply').tolist()}, {tuple(RAMP_MID.astype(int))})

        save_labels(self.dir / 'short.txt', [0, 1])
        code, _, stderr = self.run_cli('export-colors', '--mesh', self.dir / 'grid.ply', '--labels', self.dir / 'short.txt',
                                       '--out', self.dir / 'short.ply')
        self.assertEqual(code, 1)
        self.assertTrue(stderr.startswith('symdis-error shape 1:'))

    def test_diverging_colors(self):

        """
        Test the ramp endpoints and midpoint.
        """

        colors = diverging_colors([-2.0, 0.0, 2.0])
        self.assertEqual(colors.tolist(), [RAMP_LOW.tolist(), RAMP_MID.tolist(), RAMP_HIGH.tolist()])
        self.assertEqual(colors.dtype, np.uint8)

class TestSyntheticRecovery(unittest.TestCase):

    def test_recovery(self):

        """
        Train on 20 noisy bilateral shapes with the default loss weights and check side classification,
        detection against raw descriptors and the effect of refinement.
        """

        with tempfile.TemporaryDirectory() as tmp:
            directory = Path(tmp)
            cli = SymmetryCLI()
            self.assertEqual(cli.run(['gen-synthetic', '--count', '20', '--resolution', '16', '--dim', '16',
                                      '--noise', '0.01', '--out-dir', str(directory / 'corpus')]), 0)
            manifest = str(directory / 'corpus' / 'manifest.json')
            self.assertEqual(cli.run(['train', '--manifest', manifest, '--output-dir', str(directory / 'run'),
                                      '--steps', '2000', '--learning-rate', '1e-3',
                                      '--consistency-samples', str(RECOVERY_SAMPLES)]), 0)

            def evaluate(features, name):
                path = directory / name
                common = ['eval', '--manifest', manifest, '--checkpoint', str(directory / 'run' / 'model.ckpt')]
                self.assertEqual(cli.run(common + ['--cluster', 'chi', '--features', features, '--out-report', str(path)]), 0)
                return {key: float(value) for key, value in
                        (line.split('=', 1) for line in path.read_text().splitlines() if not line.startswith('skipped.'))}

            disentangled = evaluate('agno', 'agno.txt')
            raw = evaluate('raw', 'raw.txt')
            self.assertGreaterEqual(disentangled['acc_lr'], 0.95)
            self.assertLessEqual(disentangled['err_int'], 0.5 * raw['err_int'])
            self.assertLessEqual(disentangled['avg_components_refined'], disentangled['avg_components'])
            self.assertLessEqual(disentangled['avg_components_refined'], 3.0)
            self.assertGreaterEqual(disentangled['acc_lr_refined'], disentangled['acc_lr'] - 0.01)

if __name__ == '__main__':
    unittest.main()
