import contextlib
import io
import os
import sys
import tempfile
import unittest
from unittest import mock

from cellmatch import __version__, cli
from cellmatch.exceptions import ConfigError


def run_main(*argv):
    """Run the command line with ``argv``; returns (exit code, stdout)."""
    out = io.StringIO()
    code = 0
    with mock.patch.object(sys, 'argv', ['cellmatch'] + list(argv)), \
            contextlib.redirect_stdout(out):
        try:
            cli.main()
        except SystemExit as e:
            code = e.code
    return code, out.getvalue()


class TestGetAction(unittest.TestCase):

    def test_valid(self):
        with mock.patch.object(sys, 'argv', ['cellmatch', 'generate', '--out', 'x']):
            self.assertEqual(cli.get_action(), 'generate')
            self.assertEqual(sys.argv, ['cellmatch', '--out', 'x'])

    def test_unknown_and_missing(self):
        for argv in (['cellmatch'], ['cellmatch', 'frobnicate']):
            with mock.patch.object(sys, 'argv', argv), \
                    contextlib.redirect_stdout(io.StringIO()):
                self.assertRaisesRegex(SystemExit, '2', cli.get_action)

    def test_help_and_version(self):
        code, out = run_main('--version')
        self.assertEqual(code, 0)
        self.assertEqual(out.strip(), __version__)
        code, out = run_main('--help')
        self.assertEqual(code, 0)
        self.assertIn('pipeline-unsup', out)


class TestOptions(unittest.TestCase):

    def test_env_seed(self):
        with mock.patch.dict(os.environ, {'CELLMATCH_SEED': '17'}):
            self.assertEqual(cli.env_seed(3), 17)
        with mock.patch.dict(os.environ, {'CELLMATCH_SEED': 'x'}):
            with self.assertRaises(ConfigError):
                cli.env_seed()
        with mock.patch.dict(os.environ, clear=True):
            self.assertEqual(cli.env_seed(3), 3)

    def test_parse_helpers(self):
        self.assertEqual(cli.parse_trials('4,5,6'), (4, 5, 6))
        with self.assertRaises(ConfigError):
            cli.parse_trials('4,5')
        self.assertEqual(cli.parse_lambda('1,0.5,0'), (1.0, 0.5, 0.0))
        self.assertIsNone(cli.parse_lambda(None))
        with self.assertRaises(ConfigError):
            cli.parse_lambda('a,b,c')


class TestCommands(unittest.TestCase):

    def setUp(self):
        self._env = mock.patch.dict(os.environ)
        self._env.start()
        os.environ.pop('CELLMATCH_SEED', None)
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()
        self._env.stop()

    def generate(self, name, seed='5', *extra):
        path = os.path.join(self.tmp.name, name)
        code, _ = run_main('generate', '--out', path, '--n-train', '3',
                           '--n-test', '1', '--labels', '8', '--seed', seed,
                           '-q', *extra)
        self.assertEqual(code, 0)
        return path

    def read(self, *parts):
        with open(os.path.join(self.tmp.name, *parts), 'rb') as f:
            return f.read()

    def test_generate_is_reproducible(self):
        self.generate('a')
        self.generate('b')
        names = sorted(os.listdir(os.path.join(self.tmp.name, 'a', 'train')))
        self.assertEqual(len(names), 3)
        for name in names:
            self.assertEqual(self.read('a', 'train', name),
                             self.read('b', 'train', name))
        self.assertEqual(self.read('a', 'model.json'), self.read('b', 'model.json'))

    def test_env_seed_overrides_flag(self):
        self.generate('a', seed='5')
        with mock.patch.dict(os.environ, {'CELLMATCH_SEED': '5'}):
            self.generate('b', seed='99')
        self.assertEqual(self.read('a', 'model.json'), self.read('b', 'model.json'))

    def test_prealign(self):
        data = self.generate('data')
        out = os.path.join(self.tmp.name, 'aligned')
        code, _ = run_main('prealign', '--data', data, '--out', out, '-q')
        self.assertEqual(code, 0)
        self.assertTrue(os.path.isfile(os.path.join(out, 'transforms.json')))
        self.assertEqual(len(os.listdir(os.path.join(out, 'test'))), 1)

    def test_missing_input_is_usage_error(self):
        code, _ = run_main('match', '--atlas',
                           os.path.join(self.tmp.name, 'none.json'),
                           '--data', self.tmp.name, '--out',
                           os.path.join(self.tmp.name, 'm.json'), '-q')
        self.assertEqual(code, 2)

    def test_unsupervised_atlas_needs_universe(self):
        data = self.generate('data')
        code, _ = run_main('build-atlas', '--data', os.path.join(data, 'train'),
                           '--out', os.path.join(self.tmp.name, 'atlas.json'),
                           '-q')
        self.assertEqual(code, 2)

    def test_supervised_atlas_and_match(self):
        raw = self.generate('raw', '5', '--dropout', '0')
        data = os.path.join(self.tmp.name, 'data')
        self.assertEqual(run_main('prealign', '--data', raw, '--out', data,
                                  '-q')[0], 0)
        atlas = os.path.join(self.tmp.name, 'atlas.json')
        code, _ = run_main('build-atlas', '--data', os.path.join(data, 'train'),
                           '--supervised', '--out', atlas, '-q')
        self.assertEqual(code, 0)
        matches = os.path.join(self.tmp.name, 'matches.json')
        code, out = run_main('match', '--atlas', atlas, '--data',
                             os.path.join(data, 'test'), '--out', matches,
                             '--realign', '0', '-q')
        self.assertEqual(code, 0)
        self.assertIn('pooled accuracy', out)


if __name__ == '__main__':
    unittest.main()
