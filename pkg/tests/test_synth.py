"""Geometry and scene synthesis: homography sampling, warps, exact
correspondence fields, procedural scenes, and pair construction."""

import numpy as np
import pytest

from relfeat.fileio import write_ppm
from relfeat.synth import (
    CHECKER_CELL_DIVISORS,
    CorrespondenceField,
    HomographyRanges,
    INVALID_COORD,
    SceneSpec,
    UnusablePair,
    apply_homography,
    build_correspondences,
    color_jitter,
    list_image_directory,
    make_scene,
    make_training_pair,
    pick_scene_kind,
    sample_homography,
    warp_image,
)

ZERO_RANGES = HomographyRanges(rotation_deg=0.0, scale_min=1.0, scale_max=1.0,
                               translation_frac=0.0, perspective=0.0)


def smooth_image(size, seed=0):
    """Low-frequency test image so bilinear error stays tiny."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size] / size
    img = np.stack([0.3 + 0.4 * xs, 0.2 + 0.5 * ys, 0.5 + 0.2 * xs * ys], axis=-1)
    img += rng.normal(0, 0.003, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


# ---------------------------------------------------------------------
# homographies
# ---------------------------------------------------------------------

def test_sample_homography_normalized_and_deterministic():
    r = HomographyRanges()
    H1 = sample_homography(11, r, 128)
    H2 = sample_homography(11, r, 128)
    assert H1[2, 2] == 1.0
    np.testing.assert_array_equal(H1, H2)
    H3 = sample_homography(12, r, 128)
    assert np.abs(H1 - H3).max() > 1e-6


def test_sample_homography_zero_ranges_is_identity():
    H = sample_homography(5, ZERO_RANGES, (96, 128))
    np.testing.assert_allclose(H, np.eye(3), atol=1e-12)


def test_apply_homography_translation_and_perspective():
    T = np.array([[1, 0, 4.5], [0, 1, -2.0], [0, 0, 1]], dtype=np.float64)
    pts = np.array([[0.0, 0.0], [3.0, 7.0]])
    np.testing.assert_allclose(apply_homography(T, pts), pts + [4.5, -2.0])
    # pure perspective divides by the homogeneous coordinate
    P = np.array([[1, 0, 0], [0, 1, 0], [1e-3, 0, 1]], dtype=np.float64)
    out = apply_homography(P, np.array([[10.0, 20.0]]))
    np.testing.assert_allclose(out[0], [10.0 / 1.01, 20.0 / 1.01])


def test_sampled_ranges_respected():
    # decompose by probing: translation is H applied to the center
    r = HomographyRanges(rotation_deg=10.0, scale_min=0.9, scale_max=1.1,
                         translation_frac=0.1, perspective=0.0)
    size = 200
    c = (size - 1) / 2.0
    for seed in range(30):
        H = sample_homography(seed, r, size)
        moved = apply_homography(H, np.array([[c, c]]))[0]
        assert np.abs(moved - c).max() <= 0.1 * size + 1e-9


# ---------------------------------------------------------------------
# warping
# ---------------------------------------------------------------------

def test_warp_identity():
    img = smooth_image(48)
    out, mask = warp_image(img, np.eye(3))
    np.testing.assert_allclose(out, img, atol=1e-6)
    assert mask.all()


def test_warp_integer_shift():
    img = smooth_image(40, seed=3)
    H = np.array([[1, 0, 5], [0, 1, 3], [0, 0, 1]], dtype=np.float64)
    out, mask = warp_image(img, H)
    np.testing.assert_allclose(out[3:, 5:], img[:-3, :-5], atol=1e-6)
    assert not mask[:3, :].any() and not mask[:, :5].any()
    assert (out[:3, :] == 0).all()
    assert mask[3:, 5:].all()


def test_warp_roundtrip_close():
    img = smooth_image(64, seed=5)
    H = sample_homography(9, HomographyRanges(rotation_deg=10.0, scale_min=0.95,
                                              scale_max=1.05, translation_frac=0.05,
                                              perspective=2e-4), 64)
    once, m1 = warp_image(img, H)
    back, m2 = warp_image(once, np.linalg.inv(H))
    # only score pixels whose entire roundtrip stayed on covered content
    cov2 = warp_image(m1.astype(np.float64), np.linalg.inv(H))[0] > 0.999
    inner = np.zeros((64, 64), bool)
    inner[8:-8, 8:-8] = True
    sel = m2 & cov2 & inner
    assert sel.sum() > 500
    assert np.abs(back - img)[sel].mean() <= 0.02


# ---------------------------------------------------------------------
# correspondence fields
# ---------------------------------------------------------------------

def test_correspondences_identity():
    fld = build_correspondences(np.eye(3), (6, 9), (6, 9))
    assert fld.valid.all()
    ys, xs = np.mgrid[0:6, 0:9]
    np.testing.assert_allclose(fld.U[..., 0], xs)
    np.testing.assert_allclose(fld.U[..., 1], ys)


def test_correspondences_far_translation_all_invalid():
    H = np.array([[1, 0, 500], [0, 1, 0], [0, 0, 1]], dtype=np.float64)
    fld = build_correspondences(H, (8, 8), (8, 8))
    assert not fld.valid.any()
    assert (fld.U == INVALID_COORD).all()


def test_correspondences_reproject_exactly():
    H = sample_homography(21, HomographyRanges(), (64, 64))
    fld = build_correspondences(H, (64, 64), (64, 64))
    rng = np.random.default_rng(0)
    count = 0
    for _ in range(100):
        y, x = rng.integers(0, 64, 2)
        tgt = apply_homography(H, np.array([[x, y]], dtype=float))[0]
        inside = (0 <= tgt[0] <= 63) and (0 <= tgt[1] <= 63)
        assert fld.valid[y, x] == inside
        if inside:
            np.testing.assert_allclose(fld.U[y, x], tgt, atol=1e-6)
            count += 1
    assert count > 10


# ---------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------

def test_scene_deterministic_and_seed_sensitive():
    a = make_scene(SceneSpec(size=96, seed=4))
    b = make_scene(SceneSpec(size=96, seed=4))
    c = make_scene(SceneSpec(size=96, seed=5))
    np.testing.assert_array_equal(a.image, b.image)
    assert np.abs(a.image - c.image).max() > 0.05
    assert a.image.dtype == np.float32
    assert a.image.shape == (96, 96, 3)
    assert a.image.min() >= 0.0 and a.image.max() <= 1.0


def test_scene_checker_annotations():
    for seed in range(6):
        scene = make_scene(SceneSpec(size=144, seed=seed))
        ann = scene.annotations
        cx0, cy0, cx1, cy1 = ann["checker_bbox"]
        cell = ann["checker_cell"]
        assert cell in {max(4, 144 // d) for d in CHECKER_CELL_DIVISORS}
        assert (cx1 - cx0) % cell == 0 and (cy1 - cy0) % cell == 0
        assert 0 <= cx0 < cx1 <= 144 and 0 <= cy0 < cy1 <= 144
        # corners live on the interior lattice
        for x, y in ann["checker_corners"]:
            assert (x - cx0) % cell == 0 and (y - cy0) % cell == 0
            assert cx0 < x < cx1 and cy0 < y < cy1
        # region annotations are disjoint
        tx0, ty0, tx1, ty1 = ann["triangle_bbox"]
        assert tx0 >= cx1 or tx1 <= cx0 or ty0 >= cy1 or ty1 <= cy0


def test_scene_board_shades():
    """Dark cells are dark; the other cells share the background shade."""
    for seed in range(6):
        scene = make_scene(SceneSpec(size=144, seed=seed))
        img = scene.image
        ann = scene.annotations
        cx0, cy0, cx1, cy1 = ann["checker_bbox"]
        cell = ann["checker_cell"]
        bg = img[2, -3, 0]
        n = (cx1 - cx0) // cell
        for i in range(n):
            for j in range(n):
                y = cy0 + j * cell + cell // 2
                x = cx0 + i * cell + cell // 2
                if (i + j) % 2 == 0:
                    assert img[y, x, 0] == bg
                else:
                    assert img[y, x, 0] <= 0.18


def test_scene_other_kinds_shape_and_range():
    for kind in ("random_polygons", "texture_noise", "gradient_sky"):
        scene = make_scene(SceneSpec(kind=kind, size=80, seed=1))
        assert scene.image.shape == (80, 80, 3)
        assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0
        assert scene.image.std() > 0.005


def test_scene_unknown_kind_rejected():
    with pytest.raises(ValueError):
        SceneSpec(kind="mandelbrot")


# ---------------------------------------------------------------------
# photometric jitter
# ---------------------------------------------------------------------

def test_jitter_zero_ranges_identity():
    img = smooth_image(32, seed=7)
    spec = SceneSpec(brightness=0.0, contrast=0.0, gain=0.0)
    out = color_jitter(img, spec, np.random.default_rng(0))
    np.testing.assert_allclose(out, img, atol=1e-6)


def test_jitter_brightness_shift_and_clamp():
    img = np.full((16, 16, 3), 0.5, dtype=np.float32)
    spec = SceneSpec(brightness=0.2, contrast=0.0, gain=0.0)
    shifts = []
    for seed in range(40):
        out = color_jitter(img, spec, np.random.default_rng(seed))
        assert out.min() >= 0.0 and out.max() <= 1.0
        shifts.append(out.mean() - 0.5)
    shifts = np.array(shifts)
    assert np.abs(shifts).max() <= 0.2 + 1e-6
    assert shifts.std() > 0.02
    # deterministic given the generator state
    a = color_jitter(img, spec, np.random.default_rng(3))
    b = color_jitter(img, spec, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------
# training pairs
# ---------------------------------------------------------------------

def test_training_pair_identity_ranges():
    scene = make_scene(SceneSpec(size=144, seed=2)).image
    pair = make_training_pair(scene, ZERO_RANGES, 64, np.random.default_rng(0))
    np.testing.assert_allclose(pair.image1, pair.image2, atol=1e-6)
    assert pair.field.valid.all()
    np.testing.assert_allclose(pair.crop_homography, np.eye(3), atol=1e-12)
    ys, xs = np.mgrid[0:64, 0:64]
    np.testing.assert_allclose(pair.field.U[..., 0], xs, atol=1e-9)
    np.testing.assert_allclose(pair.field.U[..., 1], ys, atol=1e-9)


def test_training_pair_field_matches_crop_homography():
    scene = make_scene(SceneSpec(size=192, seed=8)).image
    pair = make_training_pair(scene, HomographyRanges(), 96,
                              np.random.default_rng(4))
    assert pair.image1.shape == pair.image2.shape == (96, 96, 3)
    assert pair.field.valid.mean() >= 0.5
    ys, xs = np.nonzero(pair.field.valid)
    pts = np.stack([xs, ys], axis=1).astype(float)
    tgt = apply_homography(pair.crop_homography, pts)
    np.testing.assert_allclose(pair.field.U[ys, xs], tgt, atol=1e-9)
    assert (tgt >= 0).all() and (tgt <= 95).all()


def test_training_pair_default_crop_size_supported():
    # the standard training crop must fit the default scene size
    scene = make_scene(SceneSpec(size=288, seed=1)).image
    pair = make_training_pair(scene, HomographyRanges(), 192,
                              np.random.default_rng(1))
    assert pair.image1.shape == (192, 192, 3)


def test_training_pair_rejects_oversized_crop():
    scene = make_scene(SceneSpec(size=96, seed=0)).image
    with pytest.raises(ValueError):
        make_training_pair(scene, ZERO_RANGES, 128, np.random.default_rng(0))


def test_training_pair_unusable_when_zoomed_out_of_frame():
    # fixed 3x zoom pushes most correspondences outside every crop
    ranges = HomographyRanges(rotation_deg=0.0, scale_min=3.0, scale_max=3.0,
                              translation_frac=0.0, perspective=0.0)
    scene = make_scene(SceneSpec(size=96, seed=0)).image
    with pytest.raises(UnusablePair):
        make_training_pair(scene, ranges, 80, np.random.default_rng(0))


def test_validity_shrinks_with_stronger_warps():
    mild = HomographyRanges(rotation_deg=3.0, scale_min=0.97, scale_max=1.03,
                            translation_frac=0.02, perspective=1e-4)
    wild = HomographyRanges(rotation_deg=30.0, scale_min=0.7, scale_max=1.4,
                            translation_frac=0.25, perspective=1e-3)
    scene = make_scene(SceneSpec(size=144, seed=3)).image
    fracs = {}
    for name, r in [("mild", mild), ("wild", wild)]:
        vals = []
        for seed in range(30):
            try:
                pair = make_training_pair(scene, r, 96, np.random.default_rng(seed),
                                          min_valid_frac=0.05)
                vals.append(pair.field.valid.mean())
            except UnusablePair:
                vals.append(0.0)
        fracs[name] = np.mean(vals)
    assert fracs["mild"] > fracs["wild"]


def test_pick_scene_kind():
    rng = np.random.default_rng(0)
    assert pick_scene_kind({"texture_noise": 1.0}, rng) == "texture_noise"
    mix = {"checkerboard_triangle": 1.0, "gradient_sky": 1.0}
    seen = {pick_scene_kind(mix, rng) for _ in range(64)}
    assert seen == set(mix)
    with pytest.raises(ValueError):
        pick_scene_kind({"gradient_sky": 0.0}, rng)


def test_list_image_directory(tmp_path):
    write_ppm(tmp_path / "b.ppm", np.full((4, 4, 3), 0.5, dtype=np.float32))
    write_ppm(tmp_path / "a.ppm", np.full((4, 4, 3), 0.5, dtype=np.float32))
    (tmp_path / "notes.txt").write_text("ignored")
    paths = list_image_directory(tmp_path)
    assert len(paths) == 2
    assert paths[0].endswith("a.ppm") and paths[1].endswith("b.ppm")
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(ValueError):
        list_image_directory(empty)
