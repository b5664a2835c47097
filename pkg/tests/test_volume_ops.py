from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ceph3d import volume_ops as vo
from ceph3d.landmarks import ReferenceFrame


# --- brute-force oracles --------------------------------------------------------------

def binarize_loop(data, rho):
    out = np.zeros(data.shape, np.uint8)
    for i in range(data.shape[0]):
        for j in range(data.shape[1]):
            for k in range(data.shape[2]):
                out[i, j, k] = 1 if data[i, j, k] >= rho else 0
    return out


def integrate_loop(data, a, b):
    n1, n2, n3 = data.shape
    out = np.zeros((n2, n3))
    for v1 in range(a, b + 1):
        for j in range(n2):
            for k in range(n3):
                out[j, k] += data[v1 - 1, j, k]
    return out


def patch_loop(data, center, eta):
    out = np.zeros((eta,) * data.ndim, data.dtype)
    lo = [c - eta // 2 for c in center]
    for idx in np.ndindex(*out.shape):
        src = tuple(l + i for l, i in zip(lo, idx))
        if all(0 <= s < n for s, n in zip(src, data.shape)):
            out[idx] = data[src]
    return out


def random_volume(rng):
    shape = tuple(int(s) for s in rng.integers(8, 17, 3))
    return rng.random(shape), shape


def test_binarize_matches_loop_50_volumes():
    rng = np.random.default_rng(0)
    for _ in range(50):
        data, _ = random_volume(rng)
        rho = float(rng.random())
        b = vo.binarize(vo.VoxelVolume(data), rho)
        np.testing.assert_array_equal(b.data, binarize_loop(data, rho))


def test_binarize_threshold_inclusive():
    v = vo.VoxelVolume(np.full((2, 2, 2), 0.5))
    assert vo.binarize(v, 0.5).data.all()


def test_integrate_matches_loop_50_volumes():
    rng = np.random.default_rng(1)
    for _ in range(50):
        data, shape = random_volume(rng)
        b = vo.binarize(vo.VoxelVolume(data), 0.5)
        a = int(rng.integers(1, shape[0] + 1))
        c = int(rng.integers(a, shape[0] + 1))
        np.testing.assert_array_equal(vo.integrate_midsagittal(b, a, c).data, integrate_loop(b.data, a, c))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_integration_additivity(seed):
    rng = np.random.default_rng(seed)
    data, shape = random_volume(rng)
    b = vo.binarize(vo.VoxelVolume(data), 0.5)
    a, m, c = sorted(int(x) for x in rng.integers(1, shape[0] + 1, 3))
    if m == c:
        m = c - 1 if c > a else m
    if not (a <= m < c):
        return
    whole = vo.integrate_midsagittal(b, a, c).data
    parts = vo.integrate_midsagittal(b, a, m).data + vo.integrate_midsagittal(b, m + 1, c).data
    np.testing.assert_array_equal(whole, parts)


def test_integrate_rejects_bad_bounds():
    b = vo.BinaryVolume(np.zeros((4, 4, 4), np.uint8))
    for a, c in ((0, 2), (3, 2), (1, 5)):
        with pytest.raises(ValueError):
            vo.integrate_midsagittal(b, a, c)


def test_integrate_full_slab_equals_sum():
    b = vo.BinaryVolume((np.random.default_rng(2).random((6, 5, 4)) > 0.5).astype(np.uint8))
    np.testing.assert_array_equal(vo.integrate_midsagittal(b, 1, 6).data, b.data.sum(axis=0))


def test_patch_matches_loop_50_volumes():
    rng = np.random.default_rng(3)
    for _ in range(50):
        data, shape = random_volume(rng)
        eta = int(rng.integers(1, 12))
        center = [int(rng.integers(-3, s + 3)) for s in shape]
        p = vo.extract_patch_3d(vo.VoxelVolume(data), center, eta)
        np.testing.assert_array_equal(p.data, patch_loop(data, center, eta))
        img = data[0]
        p2 = vo.extract_patch_2d(vo.Image2D(img), center[1:], eta)
        np.testing.assert_array_equal(p2.data, patch_loop(img, center[1:], eta))


def test_patch_fully_outside_is_zero():
    p = vo.extract_patch_3d(vo.VoxelVolume(np.ones((4, 4, 4))), (100, 100, 100), 3)
    assert not p.data.any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_insert_then_extract_roundtrip(seed):
    rng = np.random.default_rng(seed)
    data, shape = random_volume(rng)
    eta = int(rng.integers(1, 8))
    center = [int(rng.integers(0, s)) for s in shape]
    p = vo.extract_patch_3d(vo.VoxelVolume(data), center, eta)
    patched = vo.insert_patch(np.zeros(shape), p)
    again = vo.extract_patch_3d(vo.VoxelVolume(patched), center, eta)
    np.testing.assert_array_equal(again.data, p.data)


def test_patch_corner():
    p = vo.extract_patch_3d(vo.VoxelVolume(np.zeros((8, 8, 8))), (4, 4, 4), 4)
    np.testing.assert_array_equal(p.corner, [2, 2, 2])


def test_round_voxel_half_up():
    np.testing.assert_array_equal(vo.round_voxel(np.array([0.5, 1.5, -0.5, 2.49])), [1, 2, 0, 2])


def test_slab_bounds():
    assert vo.slab_bounds(10.0, 2.0, 1.0, 64) == (9, 13)
    assert vo.slab_bounds(0.0, 3.0, 1.0, 64) == (1, 4)
    with pytest.raises(ValueError):
        vo.slab_bounds(-100.0, 1.0, 1.0, 8)


def test_depth_map_first_hit():
    d = np.zeros((5, 4, 4), np.uint8)
    d[1, 2, 2] = 1
    d[3, 2, 2] = 1
    b = vo.BinaryVolume(d)
    first, hit = vo.depth_map(b, (0, +1))
    assert hit[2, 2] and first[2, 2] == 1
    first, hit = vo.depth_map(b, (0, -1))
    assert first[2, 2] == 3
    assert hit.sum() == 1


def test_render_flat_face_lambert():
    d = np.zeros((10, 12, 12), np.uint8)
    d[4:, :, :] = 1
    b = vo.BinaryVolume(d)
    light = np.array([-1.0, 0.0, 1.0])
    img = vo.render_illuminated(b, (0, +1), light).data
    # surface normal is -e0; shade = n . l / |l|
    np.testing.assert_allclose(img[3:-3, 3:-3], 1 / np.sqrt(2), atol=1e-12)
    with pytest.raises(ValueError):
        vo.render_illuminated(b, (0, +1), (0, 0, 0))


def test_render_background_is_zero():
    d = np.zeros((6, 6, 6), np.uint8)
    d[2:4, 2:4, 2:4] = 1
    img = vo.render_illuminated(vo.BinaryVolume(d), (2, -1), (0, 0, 1)).data
    assert img[0, 0] == 0 and img[2, 2] > 0


def test_split_mandible_two_blobs():
    d = np.zeros((20, 20, 20), np.uint8)
    d[5:15, 2:10, 10:18] = 1      # posterior-superior: cranium
    d[5:15, 12:18, 2:6] = 1       # anterior-inferior: mandible
    frame = ReferenceFrame(np.array([10.0, 10.0, 8.0]), np.eye(3))
    cran, mand = vo.split_mandible(vo.BinaryVolume(d), frame)
    assert mand.data[10, 15, 4] == 1 and mand.data[10, 5, 14] == 0
    assert cran.data.sum() + mand.data.sum() == d.sum()


def test_split_mandible_single_component():
    d = np.zeros((8, 8, 8), np.uint8)
    d[2:6, 2:6, 2:6] = 1
    with pytest.raises(vo.UnsplittableError):
        vo.split_mandible(vo.BinaryVolume(d), ReferenceFrame.identity())


def test_volume_file_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    b = vo.BinaryVolume((rng.random((5, 6, 7)) > 0.5).astype(np.uint8), (1.0, 2.0, 3.0))
    vo.save_volume(tmp_path / "b.cfvol", b)
    back = vo.load_volume(tmp_path / "b.cfvol")
    assert isinstance(back, vo.BinaryVolume)
    np.testing.assert_array_equal(back.data, b.data)
    assert back.spacing_mm == b.spacing_mm
    f = vo.VoxelVolume(rng.random((3, 4, 5)).astype(np.float32))
    vo.save_volume(tmp_path / "f.cfvol", f)
    np.testing.assert_array_equal(vo.load_volume(tmp_path / "f.cfvol").data, f.data)
    img = vo.Image2D(rng.random((4, 3)).astype(np.float32), (0.5, 0.25))
    vo.save_image(tmp_path / "i.cfimg", img)
    back_img = vo.load_image(tmp_path / "i.cfimg")
    np.testing.assert_array_equal(back_img.data, img.data)
    assert back_img.spacing_mm == img.spacing_mm


def test_volume_file_bad_magic(tmp_path):
    (tmp_path / "x.cfvol").write_bytes(b"NOPE00" + bytes(40))
    with pytest.raises(ValueError):
        vo.load_volume(tmp_path / "x.cfvol")


def test_binary_volume_rejects_other_values():
    with pytest.raises(ValueError):
        vo.BinaryVolume(np.full((2, 2, 2), 2, np.uint8))


def test_volume_is_read_only():
    v = vo.VoxelVolume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1
