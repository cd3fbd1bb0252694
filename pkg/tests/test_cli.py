import os

import pytest
from click.testing import CliRunner

from eqvx import __version__
from eqvx.cli import EXIT_CONFIG, EXIT_INPUT, EXIT_OK, EXIT_VERIFY, cli
from eqvx.pipeline import MANIFEST_NAME, REPORT_NAME


@pytest.fixture
def runner():
    return CliRunner()


def scene_args(scene_dir):
    return ['--scan', str(scene_dir / 'scan.bin'), '--boxes', str(scene_dir / 'boxes.txt')]


class TestCli(object):

    def test_version(self, runner):
        result = runner.invoke(cli, ['--version'])
        assert result.exit_code == EXIT_OK
        assert __version__ in result.output

    def test_make_scene(self, runner, tmp_path):
        out = tmp_path / 'scene'
        result = runner.invoke(cli, ['--seed', '4', 'make-scene', '--out', str(out), '--points', '500'])
        assert result.exit_code == EXIT_OK, result.output
        size = os.path.getsize(out / 'scan.bin')
        assert size > 0 and size % 16 == 0
        assert len(os.listdir(out / 'bank')) == 6

    def test_run(self, runner, small_config_file, scene_dir, tmp_path):
        out = tmp_path / 'out'
        result = runner.invoke(cli, ['--config', small_config_file, 'run', *scene_args(scene_dir), '--out', str(out)])
        assert result.exit_code == EXIT_OK, result.output
        assert (out / MANIFEST_NAME).exists()
        assert 'group_order: 8' in result.output

    def test_stage_command(self, runner, small_config_file, scene_dir, tmp_path):
        out = tmp_path / 'out'
        result = runner.invoke(cli, ['--config', small_config_file, '--threads', '2', 'tebev',
                                     *scene_args(scene_dir), '--out', str(out)])
        assert result.exit_code == EXIT_OK, result.output
        assert (out / 'tebev.eqvx').exists()
        assert not (out / 'tivoxel.eqvx').exists()

    def test_bad_scan(self, runner, small_config_file, scene_dir, tmp_path):
        scan = tmp_path / 'bad.bin'
        scan.write_bytes(b'\x00' * 20)
        result = runner.invoke(cli, ['--config', small_config_file, 'run', '--scan', str(scan),
                                     '--boxes', str(scene_dir / 'boxes.txt'), '--out', str(tmp_path / 'out')])
        assert result.exit_code == EXIT_INPUT
        assert 'multiple of 16' in result.output

    def test_missing_scan(self, runner, small_config_file, scene_dir, tmp_path):
        result = runner.invoke(cli, ['--config', small_config_file, 'run', '--scan', str(tmp_path / 'nope.bin'),
                                     '--boxes', str(scene_dir / 'boxes.txt'), '--out', str(tmp_path / 'out')])
        assert result.exit_code == EXIT_INPUT

    def test_bad_config(self, runner, scene_dir, tmp_path):
        config = tmp_path / 'bad.cfg'
        config.write_text('group.rotations = 4\n', encoding='utf-8')
        result = runner.invoke(cli, ['--config', str(config), 'run', *scene_args(scene_dir),
                                     '--out', str(tmp_path / 'out')])
        assert result.exit_code == EXIT_CONFIG
        assert 'unknown key' in result.output


class TestCheckCommand(object):

    def test_writes_report(self, runner, small_config_file, scene_dir, tmp_path):
        out = tmp_path / 'report'
        result = runner.invoke(cli, ['--config', small_config_file, 'check', *scene_args(scene_dir),
                                     '--out', str(out)])
        assert result.exit_code == EXIT_OK, result.output
        assert 'overall.pass: true' in (out / REPORT_NAME).read_text(encoding='utf-8')

    def test_open_group_refused(self, runner, small_config_file, scene_dir, tmp_path):
        config = tmp_path / 'open.cfg'
        config.write_text(open(small_config_file, encoding='utf-8').read() + 'group.beta = 0.5\n',
                          encoding='utf-8')
        result = runner.invoke(cli, ['--config', str(config), 'check', *scene_args(scene_dir)])
        assert result.exit_code == EXIT_CONFIG

    def test_failed_report(self, runner, small_config_file, scene_dir, tmp_path):
        config = tmp_path / 'strict.cfg'
        config.write_text(open(small_config_file, encoding='utf-8').read() + 'check.permutation_tolerance = -1.0\n',
                          encoding='utf-8')
        result = runner.invoke(cli, ['--config', str(config), 'check', *scene_args(scene_dir)])
        assert result.exit_code == EXIT_VERIFY
        assert 'overall.pass: false' in result.output


class TestAugmentCommand(object):

    def test_writes_scene(self, runner, small_config_file, scene_dir, tmp_path):
        out = tmp_path / 'augmented'
        result = runner.invoke(cli, ['--config', small_config_file, '--seed', '3', 'augment', *scene_args(scene_dir),
                                     '--bank', str(scene_dir / 'bank'), '--out', str(out)])
        assert result.exit_code == EXIT_OK, result.output
        paths = result.output.splitlines()[-2:]
        assert [os.path.basename(p) for p in paths] == ['scan.bin', 'boxes.txt']
        assert all(os.path.exists(p) for p in paths)


class TestExportWeightsCommand(object):

    def test_exported_weights_load(self, runner, small_config_file, scene_dir, tmp_path):
        weights = tmp_path / 'weights'
        result = runner.invoke(cli, ['--config', small_config_file, '--seed', '6', 'export-weights',
                                     '--out', str(weights)])
        assert result.exit_code == EXIT_OK, result.output
        backbone_path, tivoxel_path = result.output.splitlines()[-2:]
        assert os.path.exists(backbone_path) and os.path.exists(tivoxel_path)

        config = tmp_path / 'loaded.cfg'
        config.write_text(open(small_config_file, encoding='utf-8').read() +
                          f'model.backbone_weights = {backbone_path}\nmodel.tivoxel_weights = {tivoxel_path}\n',
                          encoding='utf-8')
        result = runner.invoke(cli, ['--config', str(config), 'run', *scene_args(scene_dir),
                                     '--out', str(tmp_path / 'out')])
        assert result.exit_code == EXIT_OK, result.output

    def test_mismatched_weights(self, runner, small_config_file, scene_dir, tmp_path):
        result = runner.invoke(cli, ['--config', small_config_file, 'export-weights', '--out', str(tmp_path / 'w')])
        assert result.exit_code == EXIT_OK, result.output
        config = tmp_path / 'wide.cfg'
        config.write_text(open(small_config_file, encoding='utf-8').read() + 'attention.channels = 8\n' +
                          f'model.tivoxel_weights = {result.output.splitlines()[-1]}\n', encoding='utf-8')
        result = runner.invoke(cli, ['--config', str(config), 'run', *scene_args(scene_dir),
                                     '--out', str(tmp_path / 'out')])
        assert result.exit_code == EXIT_INPUT
