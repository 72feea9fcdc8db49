import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sibling_fcn.data import (
    CENTROID_MARGIN,
    AugmentRanges,
    GenerationError,
    MaskPair,
    Nucleus,
    SynthConfig,
    assign_splits,
    augment,
    crop_patches,
    generate,
    generate_one,
    load_dataset,
    make_masks,
    split_counts,
    write_dataset,
)


def brute_masks(nuclei, h, w, radius):
    """Per-pixel oracle: nearest centroid within radius, ties to lower category."""
    cls = np.zeros((h, w), dtype=np.uint8)
    for r in range(h):
        for c in range(w):
            best = None
            for n in nuclei:
                d2 = (r - n.row) ** 2 + (c - n.col) ** 2
                if d2 <= radius * radius:
                    key = (d2, n.category)
                    if best is None or key < best[0]:
                        best = (key, n.category)
            if best is not None:
                cls[r, c] = best[1]
    return cls


# ---------------------------------------------------------------- generate


def test_seed_determinism():
    a, b = generate(SynthConfig(seed=7), 5), generate(SynthConfig(seed=7), 5)
    for x, y in zip(a, b):
        assert x.pixels.tobytes() == y.pixels.tobytes()
        assert x.nuclei == y.nuclei and x.image_id == y.image_id
    c = generate(SynthConfig(seed=8), 1)[0]
    assert c.pixels.tobytes() != a[0].pixels.tobytes()


def test_image_depends_only_on_seed_and_index():
    cfg = SynthConfig(seed=3)
    assert generate_one(cfg, 4).pixels.tobytes() == generate(cfg, 5)[4].pixels.tobytes()


def test_mixture_frequencies_over_10000_nuclei():
    cfg = SynthConfig(seed=0)
    cats, i = [], 0
    while len(cats) < 10_000:
        cats.extend(n.category for n in generate_one(cfg, i).nuclei)
        i += 1
    freq = np.bincount(cats, minlength=5)[1:] / len(cats)
    np.testing.assert_allclose(freq, cfg.mixture, atol=0.01)


def test_zero_nuclei_gives_pure_background():
    cfg = SynthConfig(nuclei_min=0, nuclei_max=0, seed=1)
    im = generate_one(cfg, 0)
    assert im.nuclei == []
    bg = np.asarray(cfg.background_color)[:, None, None]
    assert np.abs(im.pixels - bg).max() < 10 * cfg.background_noise


def test_generated_invariants():
    cfg = SynthConfig(seed=11)
    for im in generate(cfg, 40):
        assert im.pixels.shape == (3, 32, 32)
        assert im.pixels.min() >= 0 and im.pixels.max() <= 1
        for n in im.nuclei:
            assert 0 <= n.row < 32 and 0 <= n.col < 32 and 1 <= n.category <= 4
        pts = np.array([(n.row, n.col) for n in im.nuclei], dtype=float)
        d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1)) + np.eye(len(pts)) * 1e9
        assert d.min() >= 4


def test_annotation_fidelity():
    cfg = SynthConfig(seed=5)
    bg = np.asarray(cfg.background_color)
    for im in generate(cfg, 200):
        for n in im.nuclei:
            assert np.abs(im.pixels[:, n.row, n.col] - bg).mean() >= CENTROID_MARGIN


def test_infeasible_packing_is_an_error():
    cfg = SynthConfig(nuclei_min=40, nuclei_max=40, seed=0)
    with pytest.raises(GenerationError):
        generate_one(cfg, 0)


@pytest.mark.parametrize("kw", [dict(mixture=(0.5, 0.5, 0.1, 0.1)), dict(nuclei_min=5, nuclei_max=2),
                                dict(mixture=(0.5, 0.5))])
def test_invalid_synth_config(kw):
    with pytest.raises(ValueError):
        SynthConfig(**kw)


# ------------------------------------------------------------------- masks


def test_interior_disk_has_29_pixels():
    m = make_masks([Nucleus(16, 16, 2)], 32, 32, radius=3)
    lattice = sum(1 for dr in range(-3, 4) for dc in range(-3, 4) if dr * dr + dc * dc <= 9)
    assert lattice == 29
    assert m.det_mask.sum() == 29
    assert set(np.unique(m.cls_mask)) == {0, 2}


def test_corner_disk_is_clipped():
    m = make_masks([Nucleus(0, 0, 1)], 8, 8, radius=3)
    assert m.det_mask.sum() == sum(1 for r in range(4) for c in range(4) if r * r + c * c <= 9)


def test_overlap_goes_to_nearer_centroid():
    nuclei = [Nucleus(10, 10, 3), Nucleus(10, 14, 1)]
    m = make_masks(nuclei, 24, 24, radius=3)
    np.testing.assert_array_equal(m.cls_mask, brute_masks(nuclei, 24, 24, 3))
    assert m.cls_mask[10, 11] == 3 and m.cls_mask[10, 13] == 1
    assert m.cls_mask[10, 12] == 1  # equidistant: lower category


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 15), st.integers(0, 15), st.integers(1, 4)), max_size=6),
       st.sampled_from([1, 1.5, 2, 3, 4]))
def test_masks_match_brute_force(pts, radius):
    nuclei = [Nucleus(*p) for p in pts]
    m = make_masks(nuclei, 16, 16, radius)
    np.testing.assert_array_equal(m.cls_mask, brute_masks(nuclei, 16, 16, radius))
    np.testing.assert_array_equal(m.det_mask, m.cls_mask > 0)


def test_radius_below_one_rejected():
    with pytest.raises(ValueError):
        make_masks([], 4, 4, radius=0.5)


# ------------------------------------------------------------ augmentation


def _sample(seed=2):
    im = generate_one(SynthConfig(seed=seed), 0)
    return im.pixels, make_masks(im.nuclei, 32, 32)


def test_identity_draw_returns_input(rng):
    img, masks = _sample()
    out, m = augment(img, masks, rng, choose=())
    assert np.array_equal(out, img)
    assert np.array_equal(m.det_mask, masks.det_mask) and np.array_equal(m.cls_mask, masks.cls_mask)
    out, _ = augment(img, masks, rng, AugmentRanges(probability=0.0))
    assert np.array_equal(out, img)


def test_flip_twice_is_identity():
    img, masks = _sample()
    for seed in range(6):
        r1, r2 = np.random.default_rng(seed), np.random.default_rng(seed)
        once, m1 = augment(img, masks, r1, choose=("flip",))
        twice, m2 = augment(once, m1, r2, choose=("flip",))
        np.testing.assert_allclose(twice, img, atol=1e-12)
        assert np.array_equal(m2.cls_mask, masks.cls_mask) and np.array_equal(m2.det_mask, masks.det_mask)


def test_channel_shift_leaves_masks_alone(rng):
    img, masks = _sample()
    out, m = augment(img, masks, rng, choose=("channel_shift",))
    assert not np.array_equal(out, img)
    assert np.array_equal(m.cls_mask, masks.cls_mask)


def test_mask_consistency_over_100_draws():
    img, masks = _sample(4)
    rng = np.random.default_rng(99)
    for _ in range(100):
        out, m = augment(img, masks, rng, AugmentRanges(probability=0.7))
        assert out.shape == img.shape and m.det_mask.shape == masks.det_mask.shape
        np.testing.assert_array_equal(m.cls_mask > 0, m.det_mask == 1)
        assert set(np.unique(m.cls_mask)) <= set(np.unique(masks.cls_mask))


def test_geometric_transforms_move_image_and_masks_together():
    img = np.zeros((3, 32, 32))
    img[:, 14:19, 6:11] = 1.0
    masks = make_masks([Nucleus(16, 8, 1)], 32, 32, radius=2)
    for seed in range(10):
        out, m = augment(img, masks, np.random.default_rng(seed), choose=("rotate", "zoom", "shear"))
        rows, cols = np.nonzero(m.det_mask)
        assert len(rows)
        assert out[0, int(rows.mean().round()), int(cols.mean().round())] > 0.5


def test_augment_rejects_unknown_transform(rng):
    img, masks = _sample()
    with pytest.raises(ValueError):
        augment(img, masks, rng, choose=("twirl",))


def test_augmentation_is_seeded():
    img, masks = _sample()
    a, ma = augment(img, masks, np.random.default_rng(5), AugmentRanges(probability=1.0))
    b, mb = augment(img, masks, np.random.default_rng(5), AugmentRanges(probability=1.0))
    assert a.tobytes() == b.tobytes() and ma.cls_mask.tobytes() == mb.cls_mask.tobytes()


# ----------------------------------------------------------------- patches


def test_single_patch_equals_input(rng):
    img = rng.random((3, 64, 64))
    masks = MaskPair(np.zeros((64, 64), np.uint8), np.zeros((64, 64), np.uint8))
    (p, m, origin), = crop_patches(img, masks, 64)
    assert origin == (0, 0) and np.array_equal(p, img)


def test_patches_tile_and_reassemble(rng):
    nuclei = [Nucleus(int(r), int(c), int(k)) for r, c, k in
              zip(rng.integers(0, 128, 30), rng.integers(0, 128, 30), rng.integers(1, 5, 30))]
    masks = make_masks(nuclei, 128, 128)
    img = rng.random((3, 128, 128))
    patches = crop_patches(img, masks, 64, 64)
    assert len(patches) == 4
    det, cls, full = np.zeros_like(masks.det_mask), np.zeros_like(masks.cls_mask), np.zeros_like(img)
    cover = np.zeros((128, 128), int)
    for p, m, (r, c) in patches:
        det[r:r + 64, c:c + 64] = m.det_mask
        cls[r:r + 64, c:c + 64] = m.cls_mask
        full[:, r:r + 64, c:c + 64] = p
        cover[r:r + 64, c:c + 64] += 1
    assert np.all(cover == 1)
    assert np.array_equal(det, masks.det_mask) and np.array_equal(cls, masks.cls_mask)
    assert np.array_equal(full, img)


def test_patch_larger_than_image_rejected(rng):
    masks = MaskPair(np.zeros((16, 16), np.uint8), np.zeros((16, 16), np.uint8))
    with pytest.raises(ValueError):
        crop_patches(rng.random((3, 16, 16)), masks, 32)


# --------------------------------------------------------------------- I/O


@pytest.mark.parametrize("n,expected", [(10, (7, 1, 2)), (100, (70, 10, 20)), (1, (1, 0, 0))])
def test_split_counts(n, expected):
    assert split_counts(n) == expected
    labels = assign_splits(n, 0)
    assert (labels.count("train"), labels.count("val"), labels.count("test")) == expected


def test_dataset_round_trip(tmp_path):
    cfg = SynthConfig(seed=2)
    images = generate(cfg, 10)
    splits = assign_splits(10, 2)
    write_dataset(tmp_path, images, splits, cfg)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["format"] == "sibling-fcn-dataset" and manifest["version"] == 1
    ds = load_dataset(tmp_path)
    assert ds.splits == splits and ds.num_categories == 4
    for a, b in zip(images, ds.images):
        assert a.nuclei == b.nuclei and a.image_id == b.image_id
        assert np.abs(a.pixels - b.pixels).max() <= 0.5 / 255 + 1e-12
    assert (tmp_path / "train.txt").read_text().count("\n") == 7


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)
