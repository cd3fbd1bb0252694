import numpy as np
import pytest
from scipy import ndimage

from eqvx.exceptions import FormatError, InvalidArgumentError
from eqvx.tespconv import (Backbone, LayerSpec, SparseConvLayer, backbone_forward, build_backbone,
                           build_rulebook, load_backbone, output_geometry, save_backbone, sparse_conv_forward)
from eqvx.testkit import dense_conv_oracle, densify
from eqvx.voxelizer import SparseVoxelTensor, transform_and_voxelize
from eqvx.xform import build_group

SHAPE = (7, 6, 5)


def random_tensor(rng, channels=3, count=40, shape=SHAPE):
    flat = rng.choice(int(np.prod(shape)), size=count, replace=False)
    coords = np.stack(np.unravel_index(flat, shape), axis=1)
    return SparseVoxelTensor((0.5, 0.5, 0.5), (0.0, 0.0, 0.0), shape, coords,
                             rng.normal(size=(count, channels)))


def random_layer(rng, k=3, c_in=3, c_out=2, stride=1, mode='subm', activation='none', bias=True):
    kernel = rng.normal(size=(k, k, k, c_in, c_out))
    b = rng.normal(size=c_out) if bias else np.zeros(c_out)
    return SparseConvLayer(kernel, b, (stride,) * 3, mode, activation)


class TestSubmanifold(object):

    @pytest.mark.parametrize('k', [1, 3, 5])
    def test_matches_dense_oracle(self, rng, k):
        tensor = random_tensor(rng)
        layer = random_layer(rng, k=k, bias=False)
        out = sparse_conv_forward(layer, tensor)
        dense, occupied = densify(tensor.coords, tensor.features, tensor.spatial_shape)
        expected = dense_conv_oracle(dense, layer.kernel, mode='subm', occupied=occupied)
        np.testing.assert_array_equal(out.coords, tensor.coords)
        np.testing.assert_allclose(out.features, expected[tuple(out.coords.T)], atol=1e-12)

    def test_bias_and_relu(self, rng):
        tensor = random_tensor(rng)
        layer = random_layer(rng, activation='relu')
        out = sparse_conv_forward(layer, tensor)
        dense, occupied = densify(tensor.coords, tensor.features, tensor.spatial_shape)
        expected = dense_conv_oracle(dense, layer.kernel, occupied=occupied)[tuple(tensor.coords.T)]
        np.testing.assert_allclose(out.features, np.maximum(expected + layer.bias, 0), atol=1e-12)
        assert np.all(out.features >= 0)

    def test_isolated_voxel_sees_only_centre_weight(self):
        kernel = np.zeros((3, 3, 3, 1, 1))
        kernel[1, 1, 1, 0, 0] = 2.0
        kernel[0, 1, 1, 0, 0] = 100.0
        tensor = SparseVoxelTensor((1, 1, 1), (0, 0, 0), (5, 5, 5), [[2, 2, 2]], [[3.0]])
        out = sparse_conv_forward(SparseConvLayer(kernel, [0.5]), tensor)
        np.testing.assert_array_equal(out.features, [[6.5]])

    def test_width_mismatch(self, rng):
        with pytest.raises(InvalidArgumentError, match='does not match layer C_in'):
            sparse_conv_forward(random_layer(rng, c_in=4), random_tensor(rng, channels=3))

    def test_empty_input(self, rng):
        empty = SparseVoxelTensor((1, 1, 1), (0, 0, 0), SHAPE, np.zeros((0, 3)), np.zeros((0, 3)))
        out = sparse_conv_forward(random_layer(rng), empty)
        assert len(out) == 0
        assert out.num_channels == 2

    def test_keeps_action_index(self, rng):
        tensor = random_tensor(rng)
        tensor = SparseVoxelTensor(tensor.voxel_size, tensor.origin, tensor.spatial_shape,
                                   tensor.coords, tensor.features, action_index=5)
        assert sparse_conv_forward(random_layer(rng), tensor).action_index == 5


class TestStrided(object):

    @pytest.mark.parametrize('stride', [1, 2, 3])
    def test_matches_dense_oracle(self, rng, stride):
        tensor = random_tensor(rng)
        layer = random_layer(rng, stride=stride, mode='spconv', bias=False)
        out = sparse_conv_forward(layer, tensor)
        dense, occupied = densify(tensor.coords, tensor.features, tensor.spatial_shape)
        expected = dense_conv_oracle(dense, layer.kernel, stride=stride, mode='spconv')
        assert out.spatial_shape == expected.shape[:3]
        np.testing.assert_allclose(out.features, expected[tuple(out.coords.T)], atol=1e-12)

        footprint = ndimage.correlate(occupied.astype(float), np.ones((3, 3, 3)), mode='constant')
        active = np.argwhere(footprint[::stride, ::stride, ::stride] > 0)
        assert sorted(map(tuple, out.coords)) == sorted(map(tuple, active))

    def test_output_geometry(self, rng):
        tensor = SparseVoxelTensor((0.5, 0.5, 0.25), (-4.25, -4.25, -1.0), (17, 17, 8),
                                   [[8, 8, 4]], [[1.0, 1.0, 1.0]])
        voxel_size, origin, shape = output_geometry(random_layer(rng, stride=2, mode='spconv'), tensor)
        assert shape == (9, 9, 4)
        assert voxel_size == pytest.approx((1.0, 1.0, 0.5))
        assert origin == pytest.approx((-4.5, -4.5, -1.125))

    def test_strided_output_stays_centred(self, rng):
        tensor = SparseVoxelTensor((0.5, 0.5, 0.5), (-4.25, -4.25, -1.0), (17, 17, 4),
                                   [[8, 8, 2]], [[1.0, 1.0, 1.0]])
        out = sparse_conv_forward(random_layer(rng, stride=2, mode='spconv'), tensor)
        centres = out.voxel_centers()
        np.testing.assert_allclose(np.mean(centres[:, :2], axis=0), [0.0, 0.0], atol=1e-12)


class TestRulebook(object):

    @pytest.mark.parametrize('mode,stride', [('subm', 1), ('spconv', 2)])
    def test_pairs_match_lookup(self, rng, mode, stride):
        tensor = random_tensor(rng, count=60)
        layer = random_layer(rng, mode=mode, stride=stride)
        rulebook = build_rulebook(layer, tensor)
        assert len(rulebook.pairs) == 27
        centres = rulebook.out_coords * stride
        for (sources, targets), offset in zip(rulebook.pairs, layer.offsets()):
            found = tensor.lookup(centres + offset)
            order = np.argsort(targets)
            np.testing.assert_array_equal(targets[order], np.flatnonzero(found >= 0))
            np.testing.assert_array_equal(sources[order], found[targets[order]])

    def test_out_coords_in_key_order(self, rng):
        tensor = random_tensor(rng, count=60)
        layer = random_layer(rng, mode='spconv', stride=2)
        out = build_rulebook(layer, tensor).out_coords
        nx, ny, _ = output_geometry(layer, tensor)[2]
        keys = (out[:, 2] * ny + out[:, 1]) * nx + out[:, 0]
        assert np.all(np.diff(keys) > 0)

    def test_reuse_across_submanifold_layers(self, rng):
        tensor = random_tensor(rng)
        layers = (random_layer(rng, c_out=4, activation='relu'), random_layer(rng, c_in=4, c_out=3),
                  random_layer(rng, c_in=3, c_out=2, mode='spconv', stride=2))
        rulebook = build_rulebook(layers[0], tensor)
        assert rulebook.reusable_for(layers[1])
        assert not rulebook.reusable_for(layers[2])
        assert not rulebook.reusable_for(random_layer(rng, k=5))
        chained = tensor
        for layer in layers:
            chained = sparse_conv_forward(layer, chained)
        out = Backbone(layers).forward(tensor)
        np.testing.assert_array_equal(out.coords, chained.coords)
        np.testing.assert_array_equal(out.features, chained.features)


class TestLayerSpec(object):

    def test_rejects_even_kernel(self):
        with pytest.raises(InvalidArgumentError, match='odd'):
            LayerSpec('subm', 2, 8)

    def test_rejects_strided_submanifold(self):
        with pytest.raises(InvalidArgumentError, match='stride 1'):
            LayerSpec('subm', 3, 8, stride=2)

    def test_str_is_config_syntax(self):
        assert str(LayerSpec('subm', 3, 16)) == 'subm:3:16'
        assert str(LayerSpec('spconv', 3, 32, stride=2)) == 'spconv:3:2:32'


class TestBackbone(object):

    SPECS = (LayerSpec('subm', 3, 4), LayerSpec('spconv', 3, 6, stride=2))

    def test_seeded_weights(self):
        a = build_backbone(self.SPECS, 4, seed=7)
        b = build_backbone(self.SPECS, 4, seed=7)
        c = build_backbone(self.SPECS, 4, seed=8)
        np.testing.assert_array_equal(a.layers[1].kernel, b.layers[1].kernel)
        assert not np.array_equal(a.layers[1].kernel, c.layers[1].kernel)
        bound = 1.0 / np.sqrt(27 * 4)
        assert np.max(np.abs(a.layers[0].kernel)) <= bound
        assert (a.c_in, a.c_out) == (4, 6)

    def test_linear_without_activation(self, rng):
        layers = (random_layer(rng, c_out=4, bias=False), random_layer(rng, c_in=4, c_out=4, bias=False),
                  random_layer(rng, c_in=4, c_out=2, mode='spconv', stride=2, bias=False))
        backbone = Backbone(layers)
        x = random_tensor(rng)
        y = SparseVoxelTensor(x.voxel_size, x.origin, x.spatial_shape, x.coords, rng.normal(size=x.features.shape))
        mixed = SparseVoxelTensor(x.voxel_size, x.origin, x.spatial_shape, x.coords,
                                  2.5 * x.features - 0.75 * y.features)
        fx, fy, fmixed = backbone.forward(x), backbone.forward(y), backbone.forward(mixed)
        np.testing.assert_array_equal(fmixed.coords, fx.coords)
        np.testing.assert_allclose(fmixed.features, 2.5 * fx.features - 0.75 * fy.features, atol=1e-10)

    def test_width_chain_checked(self, rng):
        with pytest.raises(InvalidArgumentError, match='layer 1 expects'):
            Backbone((random_layer(rng, c_out=2), random_layer(rng, c_in=3)))

    def test_same_weights_on_every_channel(self, random_cloud):
        group = build_group(2)
        channel_set = transform_and_voxelize(random_cloud(200, 1.9), group, (0.25, 0.25, 0.25),
                                             (-2, -2, -1, 2, 2, 1))
        backbone = build_backbone(self.SPECS, 4)
        encoded = backbone_forward(backbone, channel_set)
        for i in range(group.order):
            expected = backbone.forward(channel_set[i])
            np.testing.assert_array_equal(encoded[i].features, expected.features)
        threaded = backbone_forward(backbone, channel_set, threads=4)
        for a, b in zip(encoded.channels, threaded.channels):
            np.testing.assert_array_equal(a.features, b.features)

    def test_saved_weights_load_back(self, tmp_path):
        backbone = build_backbone(self.SPECS, 4, seed=3)
        path = tmp_path / 'backbone.eqvx'
        save_backbone(backbone, path)
        loaded = load_backbone(path, self.SPECS, c_in=4)
        for a, b in zip(loaded.layers, backbone.layers):
            np.testing.assert_array_equal(a.kernel, b.kernel.astype(np.float32))
            assert a.stride == b.stride and a.mode == b.mode

    def test_load_with_wrong_specs(self, tmp_path):
        path = tmp_path / 'backbone.eqvx'
        save_backbone(build_backbone(self.SPECS, 4), path)
        with pytest.raises(FormatError, match='expected 6 tensors'):
            load_backbone(path, self.SPECS + (LayerSpec('subm', 3, 6),))
        with pytest.raises(FormatError, match='do not match'):
            load_backbone(path, (LayerSpec('subm', 3, 5), LayerSpec('spconv', 3, 6, stride=2)))
