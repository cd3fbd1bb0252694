import math
import os

import numpy as np
import pytest

from eqvx import io, pipeline
from eqvx.config import CheckConfig
from eqvx.exceptions import FormatError, InvalidArgumentError, RefusalError, StageError
from eqvx.pipeline import (MANIFEST_NAME, Manifest, Report, build_model, check_equivariance, encode_scene,
                           run_pipeline, save_model)
from eqvx.pointcloud import PointCloud, ProposalSet
from eqvx.tebev import BevMap, resample_bev


def scene_paths(scene_dir):
    return str(scene_dir / 'scan.bin'), str(scene_dir / 'boxes.txt')


class TestRun(object):

    def test_outputs_and_manifest(self, small_config, scene_dir, tmp_path):
        scan, boxes = scene_paths(scene_dir)
        out = tmp_path / 'out'
        manifest = run_pipeline(small_config, scan, boxes, str(out))
        assert sorted(os.listdir(out)) == [MANIFEST_NAME, 'tebev.eqvx', 'tebev.eqvx.geo', 'tivoxel.eqvx']
        assert manifest['group_order'] == '8'
        assert manifest['num_proposals'] == '3'
        assert manifest['config_sha256'] == small_config.sha256()
        assert 'time.tivoxel_s' in manifest
        assert io.read_tensor(out / 'tivoxel.eqvx').shape == (3, 32)
        assert io.read_bev_map(out / 'tebev.eqvx').data.shape[:2] == (21, 21)
        assert Manifest.read(str(out / MANIFEST_NAME)).entries == manifest.entries

    def test_same_inputs_same_hashes(self, small_config, scene_dir, tmp_path):
        scan, boxes = scene_paths(scene_dir)
        first = run_pipeline(small_config, scan, boxes, str(tmp_path / 'a'))
        second = run_pipeline(small_config, scan, boxes, str(tmp_path / 'b'))
        assert first.hashes() == second.hashes()

    def test_thread_count_does_not_change_outputs(self, small_config, scene_dir, tmp_path):
        scan, boxes = scene_paths(scene_dir)
        single = run_pipeline(small_config, scan, boxes, str(tmp_path / 'a'))
        threaded = run_pipeline(small_config.override(**{'run.threads': 3}), scan, boxes, str(tmp_path / 'b'))
        outputs = [k for k in single.entries if k.startswith('output.')]
        assert outputs
        assert [single[k] for k in outputs] == [threaded[k] for k in outputs]

    def test_stop_after_voxelize(self, small_config, scene_dir, tmp_path):
        scan, boxes = scene_paths(scene_dir)
        out = tmp_path / 'out'
        manifest = run_pipeline(small_config, scan, boxes, str(out), stop_after='voxelize')
        names = sorted(os.listdir(out))
        assert names == sorted([MANIFEST_NAME] + [f'voxels_{i}.eqvx' for i in range(8)])
        assert 'output.voxels_7.eqvx_sha256' in manifest
        assert 'time.backbone_s' not in manifest

    def test_seed_changes_features(self, small_config, scene_dir, tmp_path):
        scan, boxes = scene_paths(scene_dir)
        a = run_pipeline(small_config, scan, boxes, str(tmp_path / 'a'))
        b = run_pipeline(small_config.override(**{'run.seed': 9}), scan, boxes, str(tmp_path / 'b'))
        assert a['output.tivoxel.eqvx_sha256'] != b['output.tivoxel.eqvx_sha256']

    def test_empty_scan(self, small_config, scene_dir, tmp_path):
        scan = tmp_path / 'empty.bin'
        scan.write_bytes(b'')
        out = tmp_path / 'out'
        run_pipeline(small_config, str(scan), str(scene_dir / 'boxes.txt'), str(out))
        np.testing.assert_array_equal(io.read_tensor(out / 'tivoxel.eqvx'), np.zeros((3, 32)))

    def test_no_boxes(self, small_config, scene_dir, tmp_path):
        boxes = tmp_path / 'none.txt'
        boxes.write_text('# nothing detected\n', encoding='utf-8')
        out = tmp_path / 'out'
        manifest = run_pipeline(small_config, str(scene_dir / 'scan.bin'), str(boxes), str(out))
        assert manifest['num_proposals'] == '0'
        assert io.read_tensor(out / 'tivoxel.eqvx').shape == (0, 32)

    def test_bad_scan_names_stage(self, small_config, scene_dir, tmp_path):
        scan = tmp_path / 'bad.bin'
        scan.write_bytes(b'\x00' * 15)
        out = tmp_path / 'out'
        with pytest.raises(StageError, match='stage "read" failed') as info:
            run_pipeline(small_config, str(scan), str(scene_dir / 'boxes.txt'), str(out))
        assert info.value.stage == 'read'
        assert not out.exists() or not os.listdir(out)

    def test_unknown_stage(self, small_config, mini_scene):
        scene, boxes = mini_scene
        with pytest.raises(InvalidArgumentError, match='unknown stage'):
            encode_scene(small_config, build_model(small_config), scene, boxes, stop_after='detect')


class TestEncode(object):

    def test_stages_fill_in_order(self, small_config):
        points = PointCloud([[1.0, 2.0, 0.0], [-3.0, 0.5, -1.0]], [0.5, 0.2])
        timings = {}
        features = encode_scene(small_config, build_model(small_config), points, ProposalSet(),
                                stop_after='backbone', timings=timings)
        assert len(features.voxels) == 8
        assert features.encoded is not None and features.bev is None
        assert list(timings) == ['voxelize', 'backbone']


class TestReport(object):

    def test_add_test(self):
        report = Report()
        report.add_test('x', [0.1, 2.0], [1.0, 1.0])
        assert not report.passed
        assert report.residual('x', 1) == 2.0
        assert 'test.x.max: 2.0' in report.to_lines()
        assert 'test.x.pass: false' in report.to_lines()

    def test_write(self, tmp_path):
        report = Report()
        report.add('group_order', 6)
        report.add_test('a', [0.0], [1e-6])
        path = tmp_path / 'report.txt'
        report.write(str(path))
        assert path.read_text(encoding='utf-8').splitlines() == report.to_lines()
        assert report.passed


class TestCheck(object):

    def test_quarter_turns_pass(self, small_config, scene_dir):
        report = check_equivariance(small_config, *scene_paths(scene_dir))
        assert report.passed
        assert report.entries['overall.pass'] == 'true'
        for g in range(8):
            assert report.residual('a', g) <= 1e-12
            assert report.residual('b', g) <= 1e-9
            assert report.residual('c', g) <= 1e-6

    def test_three_rotations(self, small_config, scene_dir):
        config = small_config.override(**{'group.n_rotations': 3})
        report = check_equivariance(config, *scene_paths(scene_dir))
        assert report.entries['group_order'] == '6'
        for g in range(6):
            assert report.residual('a', g) <= 1e-6
            assert report.residual('c', g) <= 1e-6
            assert math.isfinite(report.residual('b', g))
        assert float(report.entries['test.c.tolerance']) == 1e-6

    def test_misaligned_map_fails(self, small_config, scene_dir, monkeypatch):
        def shifted(bev, action):
            out = resample_bev(bev, action)
            return BevMap(np.roll(out.data, 1, axis=1), out.origin, out.pixel_size)
        monkeypatch.setattr(pipeline, 'resample_bev', shifted)
        report = check_equivariance(small_config, *scene_paths(scene_dir))
        assert not report.passed
        assert report.entries['test.a.pass'] == 'true'
        assert report.entries['test.b.pass'] == 'false'
        assert report.entries['overall.pass'] == 'false'

    def test_interp_tolerances_can_fail(self):
        check = CheckConfig()
        data = np.zeros((21, 21, 1))
        data[10, 10, 0] = 5.0
        reference = BevMap(data, (-10.5, -10.5), (1.0, 1.0))
        moved = BevMap(np.roll(data, 1, axis=1), reference.origin, reference.pixel_size)
        assert pipeline._bev_residual(moved, reference, check.interior_margin) > check.bev_interp_tolerance
        assert check.tivoxel_interp_tolerance == check.tivoxel_lattice_tolerance

    def test_refuses_open_group(self, small_config, scene_dir):
        with pytest.raises(RefusalError, match='not a multiple of 2pi'):
            check_equivariance(small_config.override(**{'group.beta': 0.5}), *scene_paths(scene_dir))

    def test_refuses_asymmetric_range(self, small_config, scene_dir):
        config = small_config.override(**{'voxel.range': '-10.25, -9.75, -2.0, 10.25, 10.25, 1.5'})
        with pytest.raises(RefusalError, match='symmetric'):
            check_equivariance(config, *scene_paths(scene_dir))

    def test_refuses_off_centre_stride(self, small_config, scene_dir):
        config = small_config.override(**{'voxel.range': '-10.0, -10.0, -2.0, 10.0, 10.0, 1.5'})
        with pytest.raises(RefusalError, match='stride 2'):
            check_equivariance(config, *scene_paths(scene_dir))

    def test_identity_group_is_exact(self, small_config, scene_dir):
        config = small_config.override(**{'group.n_rotations': 1, 'group.include_reflection': False})
        report = check_equivariance(config, *scene_paths(scene_dir))
        assert report.entries['group_order'] == '1'
        assert [report.residual(name, 0) for name in 'abc'] == [0.0, 0.0, 0.0]


class TestModelWeights(object):

    def weight_config(self, config, paths):
        backbone_path, tivoxel_path = paths
        return config.override(**{'model.backbone_weights': backbone_path, 'model.tivoxel_weights': tivoxel_path})

    def test_loaded_weights_replace_seed(self, small_config, scene_dir, tmp_path):
        scan, boxes = scene_paths(scene_dir)
        seeded = small_config.override(**{'run.seed': 9})
        paths = save_model(build_model(seeded), str(tmp_path / 'weights'))
        assert [os.path.basename(p) for p in paths] == ['backbone.eqvx', 'tivoxel_weights.eqvx']

        loaded = self.weight_config(small_config, paths)
        first = run_pipeline(loaded, scan, boxes, str(tmp_path / 'a'))
        second = run_pipeline(loaded.override(**{'run.seed': 5}), scan, boxes, str(tmp_path / 'b'))
        reference = run_pipeline(seeded, scan, boxes, str(tmp_path / 'c'))
        assert first['output.tivoxel.eqvx_sha256'] == second['output.tivoxel.eqvx_sha256']
        np.testing.assert_allclose(io.read_tensor(tmp_path / 'a' / 'tivoxel.eqvx'),
                                   io.read_tensor(tmp_path / 'c' / 'tivoxel.eqvx'), rtol=1e-4, atol=1e-5)

    def test_loaded_model_matches_saved(self, small_config, tmp_path):
        model = build_model(small_config)
        loaded = build_model(self.weight_config(small_config, save_model(model, str(tmp_path))))
        for ours, theirs in zip(model.backbone.layers, loaded.backbone.layers):
            np.testing.assert_array_equal(ours.kernel.astype(np.float32), theirs.kernel)
        for ours, theirs in zip(model.weights.vsa.arrays() + model.weights.attention.arrays(),
                                loaded.weights.vsa.arrays() + loaded.weights.attention.arrays()):
            np.testing.assert_array_equal(ours.astype(np.float32), theirs)

    def test_weights_must_fit_config(self, small_config, tmp_path):
        paths = save_model(build_model(small_config), str(tmp_path))
        wider = self.weight_config(small_config, paths).override(**{'attention.channels': 8})
        with pytest.raises(FormatError, match='tensor'):
            build_model(wider)
        deeper = self.weight_config(small_config, paths).override(**{'backbone.layers': 'subm:3:8'})
        with pytest.raises(FormatError, match='expected 2 tensors'):
            build_model(deeper)

    def test_bad_weights_fail_read_stage(self, small_config, scene_dir, tmp_path):
        weights = tmp_path / 'broken.eqvx'
        weights.write_bytes(b'EQVX')
        config = small_config.override(**{'model.tivoxel_weights': str(weights)})
        with pytest.raises(StageError, match='stage "read" failed'):
            run_pipeline(config, *scene_paths(scene_dir), str(tmp_path / 'out'))
