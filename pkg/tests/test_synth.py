import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from barlowtuple.errors import DataError, NumericError
from barlowtuple.synth import (BACKGROUND, DEFAULT_PROFILES, NON_TUMOR, TUMOR, DataConfig, ScannerProfile,
                               SplitSpec, build_dataset, generate_slide, label_background, load_dataset, normalize,
                               patch_quota, plan_hash, plan_patches, render_domain, sample_patches, save_dataset,
                               zscore_stats)


@pytest.fixture(scope="module")
def small_dataset():
    cfg = DataConfig(seed=3, slide_size=64, n_train=3, n_val=1, n_test=1)
    return cfg, build_dataset(cfg)


# --- generate_slide --------------------------------------------------------

def test_same_seed_same_slide():
    a, b = generate_slide(5, 64), generate_slide(5, 64)
    np.testing.assert_array_equal(a.base_image, b.base_image)
    np.testing.assert_array_equal(a.mask, b.mask)


@pytest.mark.parametrize("seed", range(5))
def test_background_rule_holds_on_generated_slides(seed):
    s = generate_slide(seed, 96)
    bg = s.mask == BACKGROUND
    gray = s.base_image.mean(axis=0)
    assert np.all(gray[bg] > 235 / 255)
    labeled = label_background(render_domain(s, ScannerProfile.identity()))
    assert np.all(labeled[bg])
    # the brightest stroma fibres may cross the threshold; keep that rare
    assert labeled[~bg].mean() < 0.01


@pytest.mark.parametrize("seed", range(5))
def test_every_class_covers_five_percent(seed):
    mask = generate_slide(seed, 64).mask
    frac = np.bincount(mask.ravel(), minlength=3) / mask.size
    assert np.all(frac >= 0.05)


def test_image_in_unit_range():
    img = generate_slide(1, 64).base_image
    assert img.shape == (3, 64, 64) and img.min() >= 0 and img.max() <= 1


# --- render_domain ---------------------------------------------------------

def test_identity_profile_leaves_image_unchanged():
    s = generate_slide(2, 64)
    np.testing.assert_array_equal(render_domain(s, ScannerProfile.identity()), s.base_image)


def test_domains_differ_in_pixels_not_mask(small_dataset):
    _, ds = small_dataset
    for i, mask in ds.masks.items():
        imgs = [ds.image(i, d) for d in ds.split.all_domains]
        for a in imgs[1:]:
            assert not np.array_equal(imgs[0], a)
            assert a.shape == imgs[0].shape


def test_rendering_deterministic():
    s = generate_slide(4, 64)
    for p in DEFAULT_PROFILES:
        np.testing.assert_array_equal(render_domain(s, p), render_domain(s, p))


@pytest.mark.parametrize("scale", [0.73, 0.88, 1.0, 1.04, 1.3])
def test_render_keeps_dimensions(scale):
    s = generate_slide(0, 60)
    out = render_domain(s, ScannerProfile("x", scale=scale, blur_sigma=0.5, noise_sigma=0.01))
    assert out.shape == (3, 60, 60) and out.min() >= 0 and out.max() <= 1


def test_render_order_is_scale_blur_color_gamma_brightness_noise():
    from scipy import ndimage
    from barlowtuple.synth import _resample
    s = generate_slide(6, 48)
    p = DEFAULT_PROFILES[1]
    x = _resample(s.base_image, p.scale)
    x = ndimage.gaussian_filter(x, (0, p.blur_sigma, p.blur_sigma), mode="nearest")
    x = np.einsum("ij,jhw->ihw", np.asarray(p.color_matrix), x)
    x = np.clip(x, 0, None) ** p.gamma + p.brightness
    x = x + np.random.default_rng([p.seed, s.seed]).normal(0, p.noise_sigma, size=x.shape)
    np.testing.assert_allclose(render_domain(s, p), np.clip(x, 0, 1), atol=1e-12)


def test_invalid_profile():
    with pytest.raises(ValueError):
        ScannerProfile("bad", blur_sigma=-1)


# --- label_background ------------------------------------------------------

def test_white_and_black():
    assert label_background(np.ones((3, 4, 4))).all()
    assert not label_background(np.zeros((3, 4, 4))).any()


def test_threshold_is_strict():
    assert not label_background(np.full((3, 1, 1), 235 / 255)).any()
    assert label_background(np.full((3, 1, 1), 236 / 255)).all()


def test_luma_weights_option():
    # channel mean 0.95 is background; Rec. 601 luma 0.912 is not
    img = np.array([1.0, 0.85, 1.0])[:, None, None]
    assert label_background(img).all()
    assert not label_background(img, weights=(0.299, 0.587, 0.114)).any()


# --- patch sampling --------------------------------------------------------

def test_quota_default():
    assert patch_quota(50, 0.10) == {BACKGROUND: 5, TUMOR: 23, NON_TUMOR: 22}


def test_quota_rounding_half_up():
    assert patch_quota(16, 0.10)[BACKGROUND] == 2
    assert patch_quota(15, 0.10)[BACKGROUND] == 2  # 1.5 rounds up
    assert patch_quota(14, 0.10)[BACKGROUND] == 1


def test_quota_missing_class_redistributed():
    q = patch_quota(50, 0.10, available=(BACKGROUND, NON_TUMOR))
    assert q == {BACKGROUND: 5, NON_TUMOR: 45}
    q = patch_quota(10, 0.10, available=(TUMOR, NON_TUMOR))
    assert q == {TUMOR: 5, NON_TUMOR: 5}
    with pytest.raises(DataError):
        patch_quota(10, 0.1, available=())


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 200), frac=st.floats(0, 1), avail=st.sets(st.sampled_from([0, 1, 2]), min_size=1))
def test_quota_sums_to_n(n, frac, avail):
    q = patch_quota(n, frac, avail)
    assert sum(q.values()) == n and set(q) == set(avail)
    if {TUMOR, NON_TUMOR} <= avail:
        assert abs(q[TUMOR] - q[NON_TUMOR]) <= 1


def _masks(n, size=64):
    return {i: generate_slide(100 + i, size).mask for i in range(n)}


def test_plan_class_balance_over_twenty_slides():
    masks = _masks(20)
    plan = plan_patches(masks, epoch_seed=1, patch=32, per_slide=50)
    for i, mask in masks.items():
        mine = [o for o in plan if o.slide_id == i]
        counts = np.bincount([o.patch_class for o in mine], minlength=3)
        assert counts[BACKGROUND] == 5
        assert abs(counts[TUMOR] - counts[NON_TUMOR]) <= 1
        for o in mine:
            window = mask[o.y:o.y + 32, o.x:o.x + 32]
            assert np.bincount(window.ravel(), minlength=3).argmax() == o.patch_class
            assert 0 <= o.y <= 32 and 0 <= o.x <= 32


def test_plan_deterministic_and_epoch_dependent():
    masks = _masks(3)
    assert plan_patches(masks, 7, patch=32, per_slide=20) == plan_patches(masks, 7, patch=32, per_slide=20)
    hashes = {plan_hash(plan_patches(masks, e, patch=32, per_slide=20)) for e in range(10)}
    assert len(hashes) == 10
    assert plan_patches(masks, 7, patch=32, per_slide=20, split_seed=1) != plan_patches(masks, 7, patch=32,
                                                                                        per_slide=20)


def test_plan_patch_too_large():
    with pytest.raises(DataError):
        plan_patches(_masks(1, 32), 0, patch=64)


def test_sample_patches_crops(small_dataset):
    cfg, ds = small_dataset
    samples = sample_patches(ds, ds.split.train, domain=1, epoch_seed=0, patch=32, per_slide=6)
    assert len(samples) == 18
    for s in samples:
        y, x = s.origin
        assert s.image.shape == (3, 32, 32) and s.mask.shape == (32, 32)
        np.testing.assert_array_equal(s.image, ds.image(s.slide_id, 1)[:, y:y + 32, x:x + 32])
        np.testing.assert_array_equal(s.mask, ds.masks[s.slide_id][y:y + 32, x:x + 32])


# --- z-score ---------------------------------------------------------------

def test_constant_tissue_stats():
    # a constant channel has zero spread, which is rejected as degenerate ...
    img = np.full((3, 4, 4), 0.5)
    mask = np.ones((4, 4), dtype=np.uint8)
    with pytest.raises(NumericError):
        zscore_stats([img], [mask])
    # ... while the mean of a tissue region is its constant value, mapped to 0
    img[:, 0, 0] = [0.9, 0.9, 0.9]
    mask[0, 1] = BACKGROUND
    img[:, 0, 1] = 1.0
    stats = zscore_stats([img], [mask])
    c = (0.5 * 14 + 0.9) / 15
    np.testing.assert_allclose(stats.mean, c, rtol=1e-15)
    assert np.all(normalize(np.full((3, 2, 2), c), stats) == 0.0)


def test_stats_exclude_background():
    s = generate_slide(3, 64)
    a = zscore_stats([s.base_image], [s.mask])
    whitened = s.base_image.copy()
    whitened[:, s.mask == BACKGROUND] = 1.0
    b = zscore_stats([whitened], [s.mask])
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.std, b.std)


def test_zero_std_rejected():
    with pytest.raises(NumericError):
        zscore_stats([np.full((3, 4, 4), 0.5)], [np.ones((4, 4), dtype=np.uint8)])


def test_reference_stats_shift_other_domains(small_dataset):
    _, ds = small_dataset
    ref = zscore_stats([ds.image(i, 0) for i in ds.split.train], [ds.masks[i] for i in ds.split.train])
    for d in (0, 1, 3):
        tissue = np.concatenate([normalize(ds.image(i, d), ref)[:, ds.masks[i] != BACKGROUND]
                                 for i in ds.split.train], axis=1)
        if d == 0:
            np.testing.assert_allclose(tissue.mean(axis=1), 0, atol=1e-10)
        else:
            assert np.abs(tissue.mean(axis=1)).max() > 1e-3


def test_normalize_batch_shape():
    stats = zscore_stats([np.random.default_rng(0).random((3, 4, 4))], [np.ones((4, 4), dtype=np.uint8)])
    assert normalize(np.zeros((5, 3, 4, 4)), stats).shape == (5, 3, 4, 4)


# --- splits and persistence ------------------------------------------------

def test_split_validation():
    with pytest.raises(DataError):
        SplitSpec([0, 1], [1], [2], [0, 1], [2])
    with pytest.raises(DataError):
        SplitSpec([0], [1], [2], [0, 1], [1])


def test_masks_shared_across_domains(small_dataset):
    _, ds = small_dataset
    assert set(ds.masks) == set(ds.split.train + ds.split.val + ds.split.test)
    assert len(ds.renders) == len(ds.masks) * 5


def test_save_load_round_trip(small_dataset, tmp_path):
    cfg, ds = small_dataset
    manifest = save_dataset(ds, cfg, tmp_path)
    loaded, cfg2 = load_dataset(manifest)
    assert cfg2 == cfg
    assert loaded.split == ds.split
    for key, img in ds.renders.items():
        np.testing.assert_array_equal(loaded.renders[key], img)
    for i, m in ds.masks.items():
        np.testing.assert_array_equal(loaded.masks[i], m)


def test_build_dataset_deterministic(small_dataset):
    cfg, ds = small_dataset
    again = build_dataset(cfg)
    for key, img in ds.renders.items():
        assert again.renders[key].tobytes() == img.tobytes()


def test_load_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope.json")
