import numpy as np
import pytest

from camid.errors import DataError
from camid.patchex import (PatchCache, PatchClass, classify_patch,
                           classify_stds, preprocess_patch, select_patches,
                           tile_grid, tile_image, tile_statistics,
                           write_cache)
from helpers import two_pass_mean, two_pass_std


def tile_count(h, w, size=128, stride=32):
    return ((h - size) // stride + 1) * ((w - size) // stride + 1)


def brute_force_origins(h, w, size=128, stride=32):
    out = []
    r = 0
    while r + size <= h:
        c = 0
        while c + size <= w:
            out.append((r, c))
            c += stride
        r += stride
    return out


# -- tiling ----------------------------------------------------------------------


def test_tile_single():
    img = np.zeros((128, 128, 3))
    patches = tile_image(img)
    assert len(patches) == 1 and patches[0].origin == (0, 0)


def test_tile_256_gives_25():
    assert len(tile_image(np.zeros((256, 256, 3)))) == 25


def test_tile_matches_brute_force_enumeration():
    img = np.zeros((300, 200, 3))
    got = [p.origin for p in tile_image(img)]
    assert got == brute_force_origins(300, 200)


@pytest.mark.parametrize("seed", range(8))
def test_tile_count_formula_random_sizes(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(128, 700, size=2)
    assert len(tile_grid(h, w)) == tile_count(h, w)
    assert tile_grid(h, w) == brute_force_origins(h, w)


def test_tile_too_small():
    with pytest.raises(DataError):
        tile_image(np.zeros((100, 200, 3)))


# -- classification --------------------------------------------------------------


def test_constant_patch_is_saturated():
    patch = tile_image(np.full((128, 128, 3), 0.42))[0]
    patch = classify_patch(patch)
    assert patch.klass is PatchClass.SATURATED
    assert np.allclose(patch.channel_stds, 0.0)


def test_boundary_stds_are_homogeneous():
    assert classify_stds([0.005, 0.005, 0.005]) is PatchClass.HOMOGENEOUS
    assert classify_stds([0.02, 0.02, 0.02]) is PatchClass.HOMOGENEOUS
    assert classify_stds([0.01, 0.01, 0.01]) is PatchClass.HOMOGENEOUS
    assert classify_stds([0.005, 0.01, 0.02]) is PatchClass.HOMOGENEOUS


def test_just_outside_boundaries():
    assert classify_stds([0.0049, 0.0049, 0.0049]) is PatchClass.SATURATED
    assert classify_stds([0.0201, 0.01, 0.01]) is PatchClass.NONHOMOGENEOUS
    # one channel below the floor but another above it: not saturated,
    # not homogeneous
    assert classify_stds([0.001, 0.01, 0.01]) is PatchClass.NONHOMOGENEOUS


@pytest.mark.parametrize("seed", range(6))
def test_classify_matches_two_pass_oracle(seed):
    rng = np.random.default_rng(seed)
    scale = rng.choice([0.003, 0.01, 0.05])
    values = 0.5 + rng.standard_normal((3, 128, 128)) * scale
    values = np.clip(values, 0.0, 1.0)
    patch = tile_image(np.transpose(values, (1, 2, 0)))[0]
    patch = classify_patch(patch)
    oracle_stds = two_pass_std(values)
    assert np.allclose(patch.channel_stds, oracle_stds, atol=1e-12)
    assert patch.klass is classify_stds(oracle_stds)


# -- preprocessing ---------------------------------------------------------------


def test_preprocess_constant_channel_goes_to_zero():
    img = np.full((128, 128, 3), 0.7)
    patch = preprocess_patch(tile_image(img)[0])
    assert np.allclose(patch.values, 0.0, atol=1e-7)


def test_preprocess_zero_mean_and_matches_oracle():
    rng = np.random.default_rng(1)
    img = rng.random((128, 128, 3))
    raw = tile_image(img)[0]
    patch = preprocess_patch(raw)
    means = two_pass_mean(raw.values)
    assert np.all(np.abs(patch.values.mean(axis=(1, 2))) <= 1e-6)
    expected = raw.values.astype(np.float64) - means[:, None, None]
    assert np.allclose(patch.values, expected, atol=1e-7)
    # stds unchanged by the shift
    assert np.allclose(two_pass_std(patch.values), two_pass_std(raw.values),
                       atol=1e-6)


def test_preprocess_idempotent():
    rng = np.random.default_rng(2)
    img = rng.random((128, 128, 3))
    once = preprocess_patch(tile_image(img)[0])
    twice = preprocess_patch(once)
    assert np.allclose(once.values, twice.values, atol=1e-6)


# -- selection -------------------------------------------------------------------


def striped_image(tile_specs, size=128):
    """One row of non-overlapping tiles with prescribed per-tile std."""
    rng = np.random.default_rng(0)
    img = np.zeros((size, size * len(tile_specs), 3))
    for t, std in enumerate(tile_specs):
        if std == 0.0:
            block = np.full((size, size, 3), 0.5)
        else:
            noise = rng.standard_normal((size, size, 3))
            noise = (noise - noise.mean(axis=(0, 1))) / noise.std(axis=(0, 1))
            block = 0.5 + noise * std
        img[:, t * size:(t + 1) * size, :] = block
    return np.clip(img, 0.0, 1.0)


def test_all_homogeneous_when_supply_suffices():
    img = striped_image([0.01, 0.012, 0.015, 0.018], size=128)
    sel = select_patches(img, 3, stride=128)
    assert sel.counts == (3, 0, 0)
    assert all(p.klass is PatchClass.HOMOGENEOUS for p in sel.patches)
    # flattest first
    stds = [p.channel_stds.max() for p in sel.patches]
    assert stds == sorted(stds)


def test_all_constant_image_selects_saturated():
    img = np.full((256, 256, 3), 0.3)
    sel = select_patches(img, 5)
    assert len(sel.patches) == 5
    assert sel.counts == (0, 0, 5)
    assert all(p.klass is PatchClass.SATURATED for p in sel.patches)


def test_fallback_order_and_oracle_counts():
    specs = [0.01, 0.012, 0.015, 0.05, 0.06, 0.08, 0.09, 0.0, 0.002, 0.003]
    img = striped_image(specs, size=128)
    sel = select_patches(img, 10, stride=128)
    # oracle: classify every tile independently
    oracle = [classify_patch(p).klass for p in tile_image(img, stride=128)]
    n_h = sum(k is PatchClass.HOMOGENEOUS for k in oracle)
    n_n = sum(k is PatchClass.NONHOMOGENEOUS for k in oracle)
    n_s = sum(k is PatchClass.SATURATED for k in oracle)
    assert (n_h, n_n, n_s) == (3, 4, 3)
    assert sel.counts == (3, 4, 3)
    got = [p.klass for p in sel.patches]
    assert got[:3] == [PatchClass.HOMOGENEOUS] * 3
    assert got[3:7] == [PatchClass.NONHOMOGENEOUS] * 4
    assert got[7:] == [PatchClass.SATURATED] * 3
    # saturated fall back in descending std order (least blank first)
    sat_stds = [p.channel_stds.max() for p in sel.patches[7:]]
    assert sat_stds == sorted(sat_stds, reverse=True)
    # homogeneous patches are exhausted before any fallback patch
    sel_partial = select_patches(img, 2, stride=128)
    assert sel_partial.counts == (2, 0, 0)


def test_selection_truncates_to_available_tiles():
    img = striped_image([0.01, 0.012], size=128)
    sel = select_patches(img, 99, stride=128)
    assert len(sel.patches) == 2
    assert sel.requested == 99


def test_selected_patches_are_preprocessed():
    img = striped_image([0.01, 0.012, 0.05], size=128)
    sel = select_patches(img, 3, stride=128)
    for p in sel.patches:
        assert abs(float(p.values.mean())) < 1e-6


def test_selection_deterministic():
    rng = np.random.default_rng(5)
    img = np.clip(0.5 + rng.standard_normal((256, 256, 3)) * 0.01, 0, 1)
    a = select_patches(img, 10, seed=0)
    b = select_patches(img, 10, seed=1)
    assert [p.origin for p in a.patches] == [p.origin for p in b.patches]
    assert all(np.array_equal(x.values, y.values)
               for x, y in zip(a.patches, b.patches))


def test_tile_statistics_agrees_with_per_patch():
    rng = np.random.default_rng(6)
    img = rng.random((192, 224, 3))
    origins, means, stds = tile_statistics(img)
    patches = [classify_patch(p) for p in tile_image(img)]
    assert origins == [p.origin for p in patches]
    assert np.allclose(means, [p.channel_means for p in patches], atol=1e-12)
    assert np.allclose(stds, [p.channel_stds for p in patches], atol=1e-12)


# -- cache -----------------------------------------------------------------------


def test_cache_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    img_a = np.clip(0.5 + rng.standard_normal((192, 192, 3)) * 0.01, 0, 1)
    img_b = np.clip(0.5 + rng.standard_normal((160, 256, 3)) * 0.01, 0, 1)
    entries = {
        "/data/a.png": select_patches(img_a, 4),
        "/data/b.png": select_patches(img_b, 6),
    }
    path = tmp_path / "patches.cache"
    write_cache(path, entries)
    cache = PatchCache(path)
    assert cache.image_paths() == ["/data/a.png", "/data/b.png"]
    assert cache.n_patches("/data/a.png") == 4
    assert cache.counts("/data/b.png") == entries["/data/b.png"].counts
    for key, sel in entries.items():
        loaded = cache.load(key)
        for orig, got in zip(sel.patches, loaded):
            assert np.array_equal(orig.values, got.values)
            assert got.origin == orig.origin
            assert got.klass is orig.klass
            assert np.allclose(got.channel_stds, orig.channel_stds)


def test_cache_partial_load_preserves_rank(tmp_path):
    rng = np.random.default_rng(8)
    img = np.clip(0.5 + rng.standard_normal((256, 256, 3)) * 0.01, 0, 1)
    sel = select_patches(img, 10)
    write_cache(tmp_path / "c.cache", {"x.png": sel})
    cache = PatchCache(tmp_path / "c.cache")
    first3 = cache.load("x.png", range(3))
    assert [p.origin for p in first3] == [p.origin for p in sel.patches[:3]]


def test_cache_missing_image(tmp_path):
    write_cache(tmp_path / "c.cache", {})
    cache = PatchCache(tmp_path / "c.cache")
    with pytest.raises(DataError):
        cache.load("missing.png")


def test_cache_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.cache"
    p.write_bytes(b"JUNKJUNKJUNK")
    with pytest.raises(DataError):
        PatchCache(p)
