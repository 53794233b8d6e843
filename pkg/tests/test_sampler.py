import numpy as np
import pytest

from wmnseg import sampler
from wmnseg.sampler import (AugmentationParams, SamplerError, Window2p5D, apply_transform,
                            augment, extract_segmentation_slabs, extract_synthesis_patches, stitch)


def _centers(windows):
    return sorted(w.z_center for w in windows)


def test_exact_size_volume_single_window():
    vol = np.ones((192, 192, 5))
    ws = extract_segmentation_slabs(vol, size=(192, 192, 5), stride=17)
    assert len(ws) == 5  # one per center slice
    assert [w.corner[:2] for w in ws] == [(0, 0)] * 5
    assert ws[2].corner == (0, 0, 0)


def test_seven_slices_enumeration():
    vol = np.ones((192, 192, 7))
    ws = extract_segmentation_slabs(vol, size=(192, 192, 5))
    assert _centers(ws) == list(range(7))
    # edge window for z=0 replicates slice 0 twice below
    w0 = next(w for w in ws if w.z_center == 0)
    vol2 = np.arange(7, dtype=float)[None, None, :] * np.ones((192, 192, 1)) + 1
    w0 = next(w for w in extract_segmentation_slabs(vol2, size=(192, 192, 5)) if w.z_center == 0)
    assert list(w0.image[0, 0, 0]) == [1, 1, 1, 2, 3]


def test_inplane_clamping():
    vol = np.ones((256, 192, 5))
    ws = extract_segmentation_slabs(vol, size=(192, 192, 5), stride=64)
    assert sorted({w.corner[0] for w in ws}) == [0, 64]
    assert sampler.window_starts(300, 192, 64) == [0, 64, 108]


def test_too_small_volume_rejected():
    with pytest.raises(SamplerError, match="smaller than window"):
        extract_segmentation_slabs(np.ones((64, 64, 8)), size=(96, 96, 5))


def test_synthesis_patches():
    with pytest.raises(SamplerError):
        extract_synthesis_patches(np.ones((64, 64, 5)), None, np.zeros((64, 64, 5)))
    assert len(extract_synthesis_patches(np.ones((64, 64, 5)), np.ones((64, 64, 5)),
                                         np.ones((64, 64, 5)))) == 1
    ps = extract_synthesis_patches(np.ones((128, 64, 5)), None, np.ones((128, 64, 5)), stride=32)
    assert sorted(p.corner[0] for p in ps) == [0, 32, 64]


def test_min_mask_fraction():
    mask = np.zeros((128, 64, 5), bool)
    mask[:40] = True
    ps = extract_synthesis_patches(np.ones(mask.shape), None, mask, stride=32)
    # crop box is grown around the mask, patches need >= half their footprint inside it
    assert all(np.count_nonzero(mask[p.corner[0]:p.corner[0] + 64, :, 2]) >= 64 * 64 / 2
               for p in ps)


def test_paired_payloads_share_corner(rng):
    a, b = (rng.random((70, 70, 9)).astype(np.float32) for _ in range(2))
    ps = extract_synthesis_patches(a, b, np.ones(a.shape, bool), stride=16)
    for p in ps:
        x, y, z0 = p.corner
        np.testing.assert_array_equal(p.image[1][..., 2], b[x:x + 64, y:y + 64, z0 + 2])
        np.testing.assert_array_equal(p.image[0][..., 2], a[x:x + 64, y:y + 64, z0 + 2])


def test_identity_augmentation(rng):
    img = rng.random((1, 16, 16, 5)).astype(np.float32)
    lab = rng.integers(0, 13, (16, 16, 5)).astype(np.int16)
    w = Window2p5D("s", (0, 0, 0), img, lab)
    out = augment(w, AugmentationParams.identity(), np.random.default_rng(0))
    np.testing.assert_array_equal(out.labels, lab)
    np.testing.assert_allclose(out.image, img, atol=1e-6)
    # identity matrix through the resampler is also exact
    out = apply_transform(w, np.eye(3))
    np.testing.assert_array_equal(out.labels, lab)
    np.testing.assert_allclose(out.image, img, atol=1e-6)


def test_rotation_by_90_matches_index_permutation(rng):
    lab = np.zeros((17, 17, 5), np.int16)
    lab[2:6, 3:12] = 4
    lab[10:15, 12:14] = 9
    img = (lab * 0.05 + 0.01).astype(np.float32)[None]
    w = Window2p5D("s", (0, 0, 0), img, lab)
    th = np.pi / 2
    rot = np.array([[np.cos(th), np.sin(th), 0], [-np.sin(th), np.cos(th), 0], [0, 0, 1]])
    out = apply_transform(w, rot)
    np.testing.assert_array_equal(out.labels, np.rot90(lab, k=1, axes=(0, 1)))
    np.testing.assert_allclose(out.image[0], np.rot90(img[0], k=1, axes=(0, 1)), atol=1e-5)


def test_augmentation_deterministic_and_consistent(rng):
    lab = rng.integers(0, 3, (32, 32, 5)).astype(np.int16)
    img = lab[None].astype(np.float32) / 2
    w = Window2p5D("s", (0, 0, 0), img, lab)
    p = AugmentationParams()
    a = augment(w, p, np.random.default_rng(7))
    b = augment(w, p, np.random.default_rng(7))
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_through_plane_margin_dropped(rng):
    img = rng.random((2, 16, 16, 9)).astype(np.float32)
    w = Window2p5D("s", (0, 0, 0), img, None, margin=2)
    out = augment(w, AugmentationParams(through_plane=True), np.random.default_rng(1))
    assert out.image.shape == (2, 16, 16, 5) and out.margin == 0


def test_params_must_contain_identity():
    with pytest.raises(ValueError):
        AugmentationParams(scale=(1.1, 1.2))
    with pytest.raises(ValueError):
        AugmentationParams(rotation_deg=(-np.inf, 5))


def test_stitch_single_and_average():
    w = Window2p5D("s", (0, 0, 0), np.zeros((1, 4, 4, 5)))
    pred = np.random.default_rng(0).random((3, 4, 4))
    out = stitch([w], [pred], (4, 4, 3), normalize=False, fill=[0, 0, 0])
    np.testing.assert_allclose(out[:, :, :, 2], pred)
    w1 = Window2p5D("s", (0, 0, 0), np.zeros((1, 4, 4, 5)))
    w2 = Window2p5D("s", (2, 0, 0), np.zeros((1, 4, 4, 5)))
    pa = np.stack([np.full((4, 4), 0.2), np.full((4, 4), 0.8)])
    pb = np.stack([np.full((4, 4), 0.6), np.full((4, 4), 0.4)])
    out = stitch([w1, w2], [pa, pb], (6, 4, 3), fill=[1.0, 0.0])
    np.testing.assert_allclose(out[:, 2:4, :, 2], np.broadcast_to([[[0.4]], [[0.6]]], (2, 2, 4)))
    np.testing.assert_allclose(out.sum(0), 1.0, atol=1e-6)


def test_stitch_hole_reports_bbox():
    w = Window2p5D("s", (0, 0, 0), np.zeros((1, 4, 4, 5)))
    with pytest.raises(SamplerError, match="uncovered bounding box"):
        stitch([w], [np.ones((1, 4, 4))], (4, 4, 4))
