from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from ceph3d import detectors as D
from ceph3d import landmarks as lm
from ceph3d.landmarks import ReferenceFrame
from ceph3d.volume_ops import BinaryVolume, VoxelVolume, view_image_axes, VIEWS


def _vols(n, shape=(20, 20, 20), seed=0):
    rng = np.random.default_rng(seed)
    return [rng.random(shape) for _ in range(n)]


# --- lattice and dataset -----------------------------------------------------------------

def test_jitter_lattice_sizes():
    assert D.JitterSpec(0).size(3) == 1
    assert D.JitterSpec(1).size(3) == 27
    assert D.JitterSpec(3, 2).size(2) == 16
    assert len(D.JitterSpec(2).offsets(2)) == 25
    with pytest.raises(ValueError):
        D.JitterSpec(3, 4)
    assert D.JitterSpec.covering(3, 4).gamma == 4


def test_gamma_for_error():
    assert D.gamma_for_error(3.0, 2.0) == 3
    assert D.gamma_for_error(4.0, 2.0) == 4
    assert D.gamma_for_error(4.0, 2.0, factor=1.0) == 2


def test_gamma_zero_centred_on_truth():
    vols = _vols(4)
    truths = [np.array([[5.0, 7.0, 9.0]]) + i for i in range(4)]
    ds = D.generate_patch_dataset_3d(vols, truths, 6, D.JitterSpec(0), (60,))
    assert len(ds) == 4
    np.testing.assert_array_equal(ds.targets, np.full((4, 3), 3.0))   # patch centre = eta // 2
    np.testing.assert_array_equal(ds.centers, np.stack([t[0] for t in truths]).astype(int))


def test_gamma_one_lattice_count_3d():
    ds = D.generate_patch_dataset_3d(_vols(5), [np.array([[10.0, 10, 10]])] * 5, 4, D.JitterSpec(1))
    assert len(ds) == 27 * 5


def test_lattice_count_2d():
    imgs = [np.random.default_rng(i).random((30, 30)) for i in range(3)]
    ds = D.generate_patch_dataset_2d(imgs, [np.array([[15.0, 14.0]])] * 3, 8, D.JitterSpec(3))
    assert len(ds) == 49 * 3
    assert ds.batch([0]).shape == (1, 8, 8, 1)


def test_local_targets_round_trip():
    rng = np.random.default_rng(1)
    vols = _vols(3)
    truths = [rng.uniform(6, 13, (2, 3)) for _ in range(3)]
    ds = D.generate_patch_dataset_3d(vols, truths, 8, D.JitterSpec(2), (61, 62))
    back = ds.targets.reshape(len(ds), 2, 3) + ds.corners[:, None, :]
    expected = np.stack([truths[s] for s in ds.subjects])
    np.testing.assert_array_equal(back, expected)


def test_regeneration_byte_identity(tmp_path):
    rng = np.random.default_rng(2)
    vols = _vols(2, (12, 12, 12))
    truths = [rng.uniform(4, 8, (1, 3)) for _ in range(2)]
    ds = D.generate_patch_dataset_3d(vols, truths, 5, D.JitterSpec(1))
    again = D.generate_patch_dataset_3d(vols, truths, 5, D.JitterSpec(1))
    assert ds.patches.tobytes() == again.patches.tobytes()
    assert ds.targets.tobytes() == again.targets.tobytes()
    # every patch re-cut at its recorded centre matches
    from ceph3d.volume_ops import extract_patch_3d
    for i in range(len(ds)):
        p = extract_patch_3d(VoxelVolume(vols[ds.subjects[i]]), ds.centers[i], 5).data
        assert p.tobytes() == ds.batch([i])[0, ..., 0].tobytes()
    ds.save(tmp_path / "a")
    ds.save(tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_dataset_errors():
    vol = _vols(1, (10, 10, 10))
    with pytest.raises(ValueError):
        D.generate_patch_dataset_3d(vol, [np.array([[12.0, 1, 1]])], 4, D.JitterSpec(0))
    with pytest.raises(ValueError):
        D.generate_patch_dataset_3d(vol, [np.array([[1.0, 1, 1]])], 4, D.JitterSpec(3))
    with pytest.raises(ValueError):
        D.generate_patch_dataset_3d(vol, [], 4, D.JitterSpec(0))


# --- groups --------------------------------------------------------------------------------

def test_default_partition_valid():
    D.validate_partition(D.DEFAULT_GROUPS)
    sizes = {g.name: len(g.members) for g in D.DEFAULT_GROUPS}
    assert sizes["condyle_L"] == 6 and sizes["condyle_R"] == 6
    assert set(D.DEFAULT_GROUPS[0].members) == set(lm.CONDYLE_L)
    for g in D.DEFAULT_GROUPS:
        assert list(g.members) == sorted(g.members)


def test_partition_errors():
    with pytest.raises(ValueError):
        D.validate_partition(D.DEFAULT_GROUPS[:-1])
    with pytest.raises(ValueError):
        D.validate_partition(D.DEFAULT_GROUPS + (D.DetectorGroup(99, "dup", (90,), "C"),))


def test_groups_json_roundtrip():
    items = [{"gid": g.gid, "name": g.name, "members": list(g.members), "side": g.side} for g in D.DEFAULT_GROUPS]
    assert D.groups_from_json(items) == D.DEFAULT_GROUPS


# --- stubs ---------------------------------------------------------------------------------

class StubLocator:
    def __init__(self, pos, eta=8):
        self.pos = np.atleast_2d(np.asarray(pos, dtype=float))
        self.eta = eta

    def locate(self, source, start):
        return self.pos


def test_reference_stub_exact_recovery():
    rng = np.random.default_rng(3)
    truth = rng.uniform(10, 50, (10, 3))
    models = {}
    for r, j in enumerate(lm.REFERENCE):
        for v in D.REFERENCE_VIEWS[j]:
            models[(j, v)] = D.ViewModel(StubLocator(D.project(truth[r], v)), np.zeros(2))
    renders = {v: np.zeros((4, 4, 2)) for v in VIEWS}
    det = D.detect_reference_landmarks(None, models, renders)
    np.testing.assert_array_equal(det.positions_vox, truth)
    assert not any(det.low_confidence.values())


def test_reference_disagreement_flag_and_missing_model():
    truth = np.full((10, 3), 20.0)
    models = {}
    for r, j in enumerate(lm.REFERENCE):
        for k, v in enumerate(D.REFERENCE_VIEWS[j]):
            models[(j, v)] = D.ViewModel(StubLocator(D.project(truth[r], v) + 11.0 * k), np.zeros(2))
    renders = {v: np.zeros((4, 4, 2)) for v in VIEWS}
    det = D.detect_reference_landmarks(None, models, renders)
    assert all(det.low_confidence.values())
    del models[(lm.NA, "frontal")]
    with pytest.raises(KeyError):
        D.detect_reference_landmarks(None, models, renders)


def test_every_view_pair_covers_three_axes():
    for j, (a, b) in D.REFERENCE_VIEWS.items():
        axes = set(view_image_axes(VIEWS[a])) | set(view_image_axes(VIEWS[b]))
        assert axes == {0, 1, 2}, j


def test_mandibular_stub_and_fallback():
    vol = VoxelVolume(np.zeros((30, 30, 30)))
    rng = np.random.default_rng(4)
    truth = {m: rng.uniform(5, 25, 3) for g in D.DEFAULT_GROUPS for m in g.members}
    models = {g.gid: StubLocator([truth[m] for m in g.members]) for g in D.DEFAULT_GROUPS}
    coarse = {m: p + 1.0 for m, p in truth.items()}
    det = D.detect_mandibular(vol, coarse, models)
    assert len(det.positions_vox) == 42
    for m, p in truth.items():
        np.testing.assert_array_equal(det.positions_vox[m], p)
    assert not any(det.fallback.values())
    # push one group's anchor outside the volume
    g = D.DEFAULT_GROUPS[0]
    for m in g.members:
        coarse[m] = np.array([-50.0, 5, 5])
    det = D.detect_mandibular(vol, coarse, models)
    assert det.fallback[g.gid]
    np.testing.assert_array_equal(det.positions_vox[g.members[0]], coarse[g.members[0]])
    assert all(np.all(np.isfinite(p)) for p in det.positions_vox.values())


def test_mandibular_output_clipped():
    vol = VoxelVolume(np.zeros((10, 10, 10)))
    g = D.DEFAULT_GROUPS[-1]
    models = {g.gid: StubLocator([[1e6, -1e6, 5.0]], eta=4)}
    det = D.detect_mandibular(vol, {90: np.array([5.0, 5, 5])}, models, (g,))
    np.testing.assert_array_equal(det.positions_vox[90], [11.0, -2.0, 5.0])


# --- midsagittal helpers ------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_trio_lies_on_midsagittal_plane(seed):
    rng = np.random.default_rng(seed)
    rot = Rotation.from_rotvec(rng.normal(0, 0.3, 3)).as_matrix()
    frame = ReferenceFrame(rng.uniform(50, 150, 3), rot)
    pts = D.on_midsagittal_plane(frame, rng.uniform(0, 200, (5, 2)))
    np.testing.assert_allclose(frame.to_frame(pts)[:, 0], 0.0, atol=1e-9)


def test_midsagittal_image_range():
    d = np.zeros((20, 8, 8), np.uint8)
    d[:, 2:5, 2:5] = 1
    img = D.midsagittal_image(BinaryVolume(d, (1.0, 1.0, 1.0)), ReferenceFrame(np.array([10.0, 4, 4]), np.eye(3)), 3.0)
    assert img.max() == 1.0 and img.min() == 0.0


def test_refine_cranial_shapes():
    class Dec:
        def decode(self, z):
            return np.arange(138.0) + z.sum()

    out = D.refine_cranial(Dec(), lambda x: np.zeros(15), np.zeros(24), np.zeros(9))
    assert out.shape == (138,)
    with pytest.raises(ValueError):
        D.refine_cranial(Dec(), lambda x: np.zeros(15), np.zeros(23), np.zeros(9))


# --- training --------------------------------------------------------------------------------

def _blob_images(n, rng, size=24):
    yy, xx = np.mgrid[:size, :size]
    imgs, pts = [], []
    for _ in range(n):
        p = rng.uniform(9, size - 10, 2)
        imgs.append(np.exp(-((yy - p[0]) ** 2 + (xx - p[1]) ** 2) / 8.0))
        pts.append(p)
    return imgs, np.array(pts)


def test_single_landmark_detector_beats_coarse_on_held_out():
    rng = np.random.default_rng(5)
    imgs, pts = _blob_images(40, rng)
    ds = D.generate_patch_dataset_2d(imgs[:30], [p[None] for p in pts[:30]], 16, D.JitterSpec(3), (24,))
    cfg = D.DetectorConfig(eta=16, epochs=400, lr=3e-3, seed=0, batch_size=64)
    model, trace = D.train_detector_2d(ds, cfg)
    assert trace.final < trace.initial
    coarse = pts[30:] + rng.uniform(-3, 3, (10, 2))
    found = np.array([model.locate(img, c)[0] for img, c in zip(imgs[30:], coarse)])
    err_det = np.linalg.norm(found - pts[30:], axis=1).mean()
    err_coarse = np.linalg.norm(coarse - pts[30:], axis=1).mean()
    assert err_det < err_coarse


def test_training_deterministic_and_serializable():
    rng = np.random.default_rng(6)
    imgs, pts = _blob_images(4, rng, 20)
    ds = D.generate_patch_dataset_2d(imgs, [p[None] for p in pts], 16, D.JitterSpec(1), (25,))
    cfg = D.DetectorConfig(eta=16, epochs=5, lr=1e-3, batch_size=8)
    a, ta = D.train_detector_2d(ds, cfg)
    b, tb = D.train_detector_2d(ds, cfg)
    assert ta.loss == tb.loss
    back = D.DetectorModel.from_dict(a.to_dict())
    np.testing.assert_array_equal(back.locate(imgs[0], pts[0]), a.locate(imgs[0], pts[0]))
    with pytest.raises(ValueError):
        D.train_detector_3d(ds, cfg)


def test_target_encoding_roundtrip():
    net = D.build_regressor(2, 16, 1, 2, seed=0)
    m = D.DetectorModel(net, 2, 16, (24,))
    t = np.array([[3.5, 11.25]])
    np.testing.assert_allclose(m.decode_outputs(m.encode_targets(t)), t)


@pytest.mark.parametrize("arch", [D.PATCHIFY, D.VGG])
def test_regressor_shapes(arch):
    net = D.build_regressor(3, 24, 1, 6, arch)
    assert net.output_shape == (6,)
