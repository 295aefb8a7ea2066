"""Physical positional/channel encodings and token-grid assembly."""

import numpy as np
import pytest

from lessvit import embedding as emb
from lessvit import tensor as tc
from lessvit.data_io import SENTINEL2_WAVELENGTHS_NM
from lessvit.embedding import EmbedParams, MetadataError
from lessvit.tensor import Tensor

RNG = np.random.default_rng(7)

# sin/cos(160 / 10000^(2i/8)) frozen from a 40-digit evaluation
SPATIAL_PE_1_10_16_8 = np.array(
    [
        0.21942525837900473713, -0.97562931279523731385,
        -0.28790331666506529478, -0.9576594803233846419,
        0.99957360304150516434, -0.029199522301288726206,
        0.15931820661424596331, 0.98722728337562694904,
    ]
)
# sin/cos(442.7 / 10000^(2i/8)) frozen from a 40-digit evaluation
CHANNEL_PE_4427_8 = np.array(
    [
        0.26148861366599677405, -0.9652065607542434671,
        0.28375024240555939686, 0.9588982218852980446,
        -0.95955221532543858232, -0.28153071957433552845,
        0.42838073904024976259, 0.90359833024377011236,
    ]
)


class TestSpatialEncoding:
    def test_origin_alternates_zero_one(self):
        out = emb.spatial_encoding(0, 10.0, 16, 12)
        assert np.array_equal(out, np.tile([0.0, 1.0], 6))

    def test_metric_product_equivalence_is_bitwise(self):
        a = emb.spatial_encoding(2, 10.0, 16, 32)
        b = emb.spatial_encoding(1, 20.0, 16, 32)
        assert np.array_equal(a, b)

    def test_frozen_high_precision_values(self):
        out = emb.spatial_encoding(1, 10.0, 16, 8)
        assert np.abs(out - SPATIAL_PE_1_10_16_8).max() < 1e-14

    def test_two_dimensional_split(self):
        d = 16
        out = emb.spatial_encoding_2d(3, 5, 10.0, 16, d)
        assert np.array_equal(out[: d // 2], emb.spatial_encoding(3, 10.0, 16, d // 2))
        assert np.array_equal(out[d // 2 :], emb.spatial_encoding(5, 10.0, 16, d // 2))

    def test_odd_dim_rejected(self):
        with pytest.raises(tc.DimensionError):
            emb.spatial_encoding(1, 10.0, 16, 7)


class TestChannelEncoding:
    def test_sentinel2_band_centers(self):
        assert SENTINEL2_WAVELENGTHS_NM[0] == 442.7
        assert SENTINEL2_WAVELENGTHS_NM[1] == 492.4
        assert SENTINEL2_WAVELENGTHS_NM[-1] == 2202.4
        assert len(SENTINEL2_WAVELENGTHS_NM) == 13

    def test_equal_wavelengths_identical(self):
        assert np.array_equal(emb.channel_encoding(832.8, 64), emb.channel_encoding(832.8, 64))

    def test_frozen_high_precision_values(self):
        out = emb.channel_encoding(442.7, 8)
        assert np.abs(out - CHANNEL_PE_4427_8).max() < 1e-12

    def test_sentinel2_embeds_without_collision(self):
        table = emb.channel_encodings(SENTINEL2_WAVELENGTHS_NM, 32)
        for i in range(13):
            for j in range(i + 1, 13):
                assert not np.array_equal(table[i], table[j])

    def test_nonpositive_wavelength_rejected(self):
        with pytest.raises(ValueError):
            emb.channel_encoding(0.0, 8)


class TestTiedPatchEmbed:
    def _params(self, patch=4, dim=16, radar=True):
        return EmbedParams.init(np.random.default_rng(0), patch=patch, dim=dim, radar=radar)

    def test_zero_image_zero_tokens(self):
        params = self._params()
        out = emb.tied_patch_embed(np.zeros((2, 3, 8, 8)), [500.0, 600.0, 700.0], 3, params)
        assert out.shape == (2, 4, 3, 16)
        assert np.all(out.data == 0.0)

    def test_channel_permutation_permutes_tokens(self):
        params = self._params()
        px = RNG.normal(size=(1, 4, 8, 8))
        wl = [450.0, 550.0, 650.0, 750.0]
        base = emb.tied_patch_embed(px, wl, 4, params).data
        swapped = emb.tied_patch_embed(px[:, [1, 0, 2, 3]], wl, 4, params).data
        assert np.array_equal(swapped[:, :, 0], base[:, :, 1])
        assert np.array_equal(swapped[:, :, 1], base[:, :, 0])
        assert np.array_equal(swapped[:, :, 2:], base[:, :, 2:])

    def test_identity_projection_returns_flattened_patch(self):
        patch = 4
        params = self._params(patch=patch, dim=16)
        params.w_optical = Tensor(np.eye(16))
        px = RNG.normal(size=(1, 1, patch, patch))
        out = emb.tied_patch_embed(px, [500.0], 1, params)
        assert np.allclose(out.data[0, 0, 0], px[0, 0].reshape(-1), atol=1e-12)

    def test_indivisible_patch_rejected(self):
        with pytest.raises(tc.DimensionError):
            emb.tied_patch_embed(np.zeros((1, 1, 10, 10)), [500.0], 1, self._params())

    def test_wavelength_count_mismatch_rejected(self):
        with pytest.raises(MetadataError):
            emb.tied_patch_embed(np.zeros((1, 2, 8, 8)), [500.0], 2, self._params())

    def test_modalities_use_their_own_projection(self):
        params = self._params()
        px = RNG.normal(size=(1, 3, 8, 8))
        wl = [500.0, 600.0, 100000.0]
        mixed = emb.tied_patch_embed(px, wl, 2, params).data
        optical_only = emb.tied_patch_embed(px, wl, 3, params).data
        assert np.array_equal(mixed[:, :, :2], optical_only[:, :, :2])
        assert not np.allclose(mixed[:, :, 2], optical_only[:, :, 2])

    def test_weight_sharing_across_channels(self):
        # perturbing the shared projection shifts identical patches identically
        params = self._params()
        px = np.tile(RNG.normal(size=(1, 1, 8, 8)), (1, 3, 1, 1))
        wl = [500.0, 600.0, 700.0]
        before = emb.tied_patch_embed(px, wl, 3, params).data
        params.w_optical = Tensor(params.w_optical.data + 0.5)
        after = emb.tied_patch_embed(px, wl, 3, params).data
        delta = after - before
        assert np.allclose(delta[:, :, 0], delta[:, :, 1], atol=1e-12)
        assert np.allclose(delta[:, :, 1], delta[:, :, 2], atol=1e-12)


class TestAssembleTokenGrid:
    def _grid(self, n_channels=3, size=8, patch=4, dim=16, resolution=10.0, seed=0):
        params = EmbedParams.init(np.random.default_rng(seed), patch=patch, dim=dim)
        wl = np.linspace(450, 900, n_channels)
        px = np.random.default_rng(seed + 1).normal(size=(1, n_channels, size, size))
        raw = emb.tied_patch_embed(px, wl, n_channels, params)
        grid = emb.assemble_token_grid(
            raw, params, grid_h=size // patch, grid_w=size // patch,
            resolution=resolution, wavelengths=wl,
        )
        return grid, raw, params

    def test_output_shape(self):
        grid, raw, _ = self._grid()
        n, c = raw.shape[1], raw.shape[2]
        assert grid.tokens.shape == (1, n + 1, c + 1, 16)

    def test_additive_construction(self):
        grid, raw, _ = self._grid()
        n, c, d = raw.shape[1], raw.shape[2], raw.shape[3]
        pe_sp = emb.grid_spatial_encodings(np.arange(n), grid.grid_w, 10.0, 4, d)
        pe_ch = emb.channel_encodings(grid.wavelengths, d)
        for nn in range(n):
            for cc in range(c):
                delta = grid.tokens.data[0, nn + 1, cc + 1] - raw.data[0, nn, cc]
                assert np.allclose(delta, pe_sp[nn] + pe_ch[cc], atol=1e-12)

    def test_cls_tokens_receive_axis_encoding_only(self):
        grid, _, params = self._grid()
        d = grid.dim
        pe_sp = emb.grid_spatial_encodings(np.arange(grid.n_positions), grid.grid_w, 10.0, 4, d)
        pe_ch = emb.channel_encodings(grid.wavelengths, d)
        assert np.allclose(grid.tokens.data[0, 0, 0], params.cls_global.data, atol=1e-12)
        for nn in range(grid.n_positions):
            expected = params.cls_spatial.data + pe_sp[nn]
            assert np.allclose(grid.tokens.data[0, nn + 1, 0], expected, atol=1e-12)
        for cc in range(grid.n_channels):
            expected = params.cls_spectral.data + pe_ch[cc]
            assert np.allclose(grid.tokens.data[0, 0, cc + 1], expected, atol=1e-12)

    def test_resolution_changes_encodings(self):
        g10, _, _ = self._grid(resolution=10.0)
        g30, _, _ = self._grid(resolution=30.0)
        assert not np.allclose(g10.tokens.data[0, 2, 1], g30.tokens.data[0, 2, 1])

    def test_grid_coordinates_recoverable(self):
        grid, _, _ = self._grid()
        w = grid.grid_w
        for n in range(1, grid.n_positions + 1):
            assert grid.grid_coords(n) == ((n - 1) // w, (n - 1) % w)

    @pytest.mark.parametrize("channels", [1, 13, 15, 20])
    def test_channel_count_independence(self, channels):
        # one parameter set, any channel count, no reshaping anywhere
        params = EmbedParams.init(np.random.default_rng(0), patch=4, dim=16)
        wl = np.linspace(450, 2300, channels)
        px = RNG.normal(size=(1, channels, 8, 8))
        grid = emb.embed_cube(px, wl, channels, 10.0, params)
        assert grid.tokens.shape == (1, 5, channels + 1, 16)
