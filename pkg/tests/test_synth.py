import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcemu import synth
from dcemu.errors import ConfigError, CorruptFileError, DataError, VersionMismatchError

# TOA at SR=0.3, AOD=0.2, solar zenith 30 deg, nadir view; from a scalar math-module
# evaluation of the closed form, frozen here
GOLDEN = (0.26305979197679813, 0.26487957166360554, 0.27206848485871404,
          0.2806209549464625, 0.291222844064731, 0.29448005544204)


def uniform_scene(sr, aod, sza, shape=(3, 4), **kw):
    h, w = shape
    return synth.SceneParams(np.full((h, w, 6), sr, float), np.full((h, w), aod, float),
                             np.full((h, w), sza, float), np.zeros((h, w), np.uint8), **kw)


def scalar_toa(sr, aod, sza_deg, band):
    lam = synth.WAVELENGTHS[band]
    tr = 0.0088 * lam ** -4.05
    ta = aod * (lam / 0.55) ** -1.3
    mu = math.cos(math.radians(sza_deg))
    path = (0.75 * tr + 0.4 * ta) / (4 * mu)
    t = math.exp(-0.5 * (tr + ta) * (1 / mu + 1))
    s = 0.3 * (1 - math.exp(-(tr + ta)))
    return min(max(path + t * sr / (1 - s * sr), 0.0), 1.0)


def test_transparent_atmosphere_is_identity():
    sr = np.random.default_rng(0).uniform(0, 1, size=(5, 5, 6))
    scene = synth.SceneParams(sr, np.zeros((5, 5)), np.zeros((5, 5)), np.zeros((5, 5), np.uint8),
                              rayleigh=np.zeros(6))
    for b in range(6):
        np.testing.assert_array_equal(synth.toa_forward(scene, b), sr[..., b])


def test_dark_surface_returns_path_reflectance():
    scene = uniform_scene(0.0, 0.3, 40.0)
    for b in range(6):
        path, _, _ = synth.atmosphere(synth.RAYLEIGH[b], synth.AEROSOL[b], 0.3, 40.0)
        np.testing.assert_array_equal(synth.toa_forward(scene, b), path)


def test_golden_values():
    scene = uniform_scene(0.3, 0.2, 30.0, shape=(1, 1))
    for b in range(6):
        assert synth.toa_forward(scene, b).item() == pytest.approx(GOLDEN[b], rel=1e-12)
        assert scalar_toa(0.3, 0.2, 30.0, b) == pytest.approx(GOLDEN[b], rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 0.95), st.floats(0, 2.0), st.floats(0, 75), st.integers(0, 5))
def test_forward_matches_scalar_reference(sr, aod, sza, band):
    scene = uniform_scene(sr, aod, sza, shape=(1, 1))
    assert synth.toa_forward(scene, band).item() == pytest.approx(scalar_toa(sr, aod, sza, band),
                                                                  rel=1e-12, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 0.98), st.floats(0, 1.5), st.floats(0, 70), st.integers(0, 5))
def test_forward_increasing_in_surface_reflectance(sr, aod, sza, band):
    h = 1e-4
    lo = synth.toa_forward(uniform_scene(sr, aod, sza, (1, 1)), band).item()
    hi = synth.toa_forward(uniform_scene(sr + h, aod, sza, (1, 1)), band).item()
    assert hi > lo or hi == 1.0


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1.5), st.floats(1e-3, 0.5), st.floats(0, 70), st.integers(0, 5))
def test_coefficient_monotonicity(aod, daod, sza, band):
    r, a = synth.RAYLEIGH[band], synth.AEROSOL[band]
    p0, t0, s0 = synth.atmosphere(r, a, aod, sza)
    p1, t1, s1 = synth.atmosphere(r, a, aod + daod, sza)
    _, t2, _ = synth.atmosphere(r, a, aod, sza + 5.0)
    assert p1 > p0 and t1 < t0 and t2 < t0
    assert 0 <= s0 <= 0.3 and 0 <= s1 <= 0.3


def test_scene_validation():
    with pytest.raises(DataError):
        uniform_scene(1.2, 0.1, 10.0)
    with pytest.raises(DataError):
        uniform_scene(0.2, -0.1, 10.0)
    with pytest.raises(DataError):
        synth.SceneParams(np.zeros((2, 2, 6)), np.zeros((2, 2)), np.zeros((2, 2)),
                          np.full((2, 2), 2, np.uint8))


def test_generate_scene_rejects_small_grids():
    with pytest.raises(ConfigError):
        synth.generate_scene(0, 49, 60)


def test_zero_coverage_gives_empty_mask():
    scene = synth.generate_scene(3, 60, 60, synth.SceneConfig(cloud_coverage=0.0))
    assert scene.cloud.sum() == 0


def test_coverage_fraction_is_respected():
    scene = synth.generate_scene(3, 100, 100, synth.SceneConfig(cloud_coverage=0.3))
    assert scene.cloud.mean() == pytest.approx(0.3, abs=0.01)


def test_scene_is_deterministic():
    a, b = synth.generate_scene(11, 64, 80), synth.generate_scene(11, 64, 80)
    for f in ("sr", "aod", "sza", "cloud", "class_map", "cloud_albedo"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    assert not np.array_equal(a.sr, synth.generate_scene(12, 64, 80).sr)


def test_blue_mean_magnitude_and_band_ordering():
    means = np.mean([synth.generate_scene(s, 100, 100).sr.reshape(-1, 6).mean(0) for s in range(10)], 0)
    assert abs(means[0] - 0.064) < 0.02
    assert means[3] > means[0]


def test_clouds_brighter_than_clear_visible_pixels():
    for seed in range(4):
        scene = synth.generate_scene(seed, 100, 100)
        cloudy = scene.cloud > 0
        for b in range(3):
            toa = synth.toa_forward(scene, b)
            assert toa[cloudy].min() > np.percentile(toa[~cloudy], 99)
            assert 0.6 <= toa[cloudy].min() and toa[cloudy].max() <= 0.95


def test_cloud_albedo_is_spatially_smooth():
    scene = synth.generate_scene(0, 100, 100, synth.SceneConfig(cloud_coverage=1.0))
    toa = synth.toa_forward(scene, 0)
    step = np.abs(np.diff(toa, axis=1)).mean()
    # white noise would give a mean step of about 1.13 std
    assert step < 0.5 * toa.std()


def test_class_map_has_small_integer_categories():
    scene = synth.generate_scene(2, 80, 80)
    assert set(np.unique(scene.class_map)) == {0, 1, 2, 3}


def test_teacher_masks_cloudy_pixels():
    tile = synth.make_tile(4, 60, 60)
    assert np.isnan(tile.target[tile.clear == 0]).all()
    assert np.isfinite(tile.target[tile.clear == 1]).all()
    assert tile.inputs.shape == (60, 60, len(synth.INPUT_CHANNELS))


# raster and dataset files ------------------------------------------------------

def test_raster_round_trip(tmp_path):
    tile = synth.make_tile(5, 50, 60)
    synth.save_tile(tile, tmp_path / "t.gtil")
    back = synth.load_tile(tmp_path / "t.gtil", tile.tile_id, 5)
    np.testing.assert_array_equal(back.inputs, tile.inputs)
    np.testing.assert_array_equal(back.target, tile.target)
    np.testing.assert_array_equal(back.clear, tile.clear)
    np.testing.assert_array_equal(back.class_map, tile.class_map)
    assert back.input_names == tile.input_names


def test_raster_header_layout():
    blob = synth.encode_raster({"a": np.zeros((2, 3)), "bb": np.ones((2, 3))})
    assert blob[:4] == b"GTIL"
    assert blob[4:6] == (1).to_bytes(2, "little")
    assert blob[6:10] == (2).to_bytes(4, "little") and blob[10:14] == (3).to_bytes(4, "little")
    assert len(blob) == 18 + (2 + 1) + (2 + 2) + 2 * 6 * 4 + 4


def test_raster_corruption_detected():
    blob = bytearray(synth.encode_raster({"a": np.arange(6.0).reshape(2, 3)}))
    blob[-6] ^= 0xFF
    with pytest.raises(CorruptFileError):
        synth.decode_raster(bytes(blob))
    with pytest.raises(CorruptFileError):
        synth.decode_raster(b"XXXX" + bytes(30))
    with pytest.raises(CorruptFileError):
        synth.decode_raster(synth.encode_raster({"a": np.zeros((2, 2))})[:-9])


def test_raster_version_mismatch():
    import struct
    import zlib
    body = bytearray(synth.encode_raster({"a": np.zeros((2, 2))})[:-4])
    body[4:6] = struct.pack("<H", 9)
    with pytest.raises(VersionMismatchError):
        synth.decode_raster(bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))))


def test_overlapping_splits_rejected():
    with pytest.raises(ConfigError):
        synth.build_dataset([0, 1], [1, 2], height=50, width=50)


def test_dataset_split_and_manifest(tmp_path):
    train, test, manifest = synth.build_dataset([0, 1], [7], tmp_path, 50, 50)
    assert {t.tile_id for t in train}.isdisjoint({t.tile_id for t in test})
    back = synth.Manifest.read(tmp_path / "manifest.txt")
    assert back == manifest
    assert [e.seed for e in back.split("test")] == [7]
    loaded = synth.load_split(tmp_path, "train")
    np.testing.assert_array_equal(loaded[1].inputs, train[1].inputs)


def test_regeneration_is_byte_identical(tmp_path):
    _, _, manifest = synth.build_dataset([3], [9], tmp_path, 50, 70)
    for entry, tile in zip(manifest.entries, synth.regenerate(manifest)):
        synth.save_tile(tile, tmp_path / "again.gtil")
        assert synth.file_checksum(tmp_path / "again.gtil") == synth.file_checksum(tmp_path / entry.path)


def test_bad_manifest_line():
    with pytest.raises(DataError):
        synth.Manifest.from_text("a\tb\tc\n")


# patches and normalization ---------------------------------------------------

def test_patch_counts():
    assert len(list(synth.extract_patches(synth.make_tile(0, 100, 100), 50, 50))) == 4
    assert len(list(synth.extract_patches(synth.make_tile(0, 50, 50), 50, 50))) == 1
    assert len(list(synth.extract_patches(synth.make_tile(0, 100, 120), 50, 25))) == 3 * 3


def test_patch_too_large():
    with pytest.raises(DataError):
        list(synth.extract_patches(synth.make_tile(0, 50, 50), 60))


def test_stride_equal_size_covers_each_pixel_once():
    tile = synth.make_tile(1, 100, 150)
    count = np.zeros((100, 150), int)
    for r, c, batch in synth.extract_patches(tile, 50, 50):
        count[r:r + 50, c:c + 50] += 1
        np.testing.assert_array_equal(batch.inputs[0], tile.inputs[r:r + 50, c:c + 50])
    assert (count == 1).all()


def test_patch_scan_order_is_row_major():
    corners = [(r, c) for r, c, _ in synth.extract_patches(synth.make_tile(0, 100, 100), 50, 25)]
    assert corners == sorted(corners)


def test_normalized_training_channels_are_standard():
    tiles = [synth.make_tile(s, 50, 50) for s in range(3)]
    stats = synth.fit_stats(tiles)
    x = synth.normalize(np.concatenate([t.inputs.reshape(-1, 8) for t in tiles]), stats)
    np.testing.assert_allclose(x.mean(0), 0, atol=1e-6)
    np.testing.assert_allclose(x.std(0), 1, atol=1e-6)


def test_constant_channel_is_floored():
    tiles = [synth.make_tile(s, 50, 50) for s in range(2)]
    for t in tiles:
        t.inputs[..., 7] = 0.25
    with pytest.warns(UserWarning, match="aod"):
        stats = synth.fit_stats(tiles)
    assert stats.std[7] == synth.STD_FLOOR
    assert (synth.normalize(tiles[0].inputs, stats)[..., 7] == 0).all()


def test_normalize_round_trip():
    tiles = [synth.make_tile(0, 50, 50)]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        stats = synth.fit_stats(tiles)
    x = tiles[0].inputs
    np.testing.assert_allclose(synth.denormalize(synth.normalize(x, stats), stats), x, atol=1e-12)
    assert synth.NormStats.from_dict(stats.to_dict()).mean.tolist() == stats.mean.tolist()
