from __future__ import annotations

import json

import numpy as np
import pytest
from scipy import ndimage

from ceph3d import landmarks as lm
from ceph3d import synth
from ceph3d.volume_ops import BinaryVolume, binarize, split_mandible


@pytest.fixture(scope="module")
def model():
    return synth.default_model(0)


@pytest.fixture(scope="module")
def phantoms(model):
    sets, _ = synth.sample_landmarks(model, 2, np.random.default_rng(11))
    return [synth.build_phantom(s) for s in sets]


def test_template_symmetry():
    t = synth.template_coords()
    for a, b in lm.MIRROR_PAIRS:
        np.testing.assert_allclose(t[a - 1], t[b - 1] * [-1, 1, 1], atol=1e-9)
    for j in lm.MIDSAGITTAL_TRIO:
        assert abs(t[j - 1, 0]) < 1e-12


def test_zero_factors_zero_noise_is_template(model):
    np.testing.assert_array_equal(synth.coords_from_factors(model, np.zeros(model.n_factors)), model.template)


def test_sample_mean_monte_carlo(model):
    sets, f = synth.sample_landmarks(model, 10_000, np.random.default_rng(1))
    c = np.stack([s.coords for s in sets])
    se = c.std(axis=0, ddof=1) / np.sqrt(len(c))
    assert np.all(np.abs(c.mean(axis=0) - model.template) <= 3 * se + 1e-12)
    assert f.shape == (10_000, 6)


def test_cranial_spread_below_mandibular(model):
    sets, _ = synth.sample_landmarks(model, 1000, np.random.default_rng(2))
    c = np.stack([s.coords for s in sets])
    sd = np.sqrt(c.var(axis=0).sum(axis=1))
    cr, md = np.array(lm.CRANIAL) - 1, np.array(lm.MANDIBULAR) - 1
    assert sd[cr].mean() < sd[md].mean()
    assert model.noise_sd[cr].max() < model.noise_sd[md].min()


def test_cranial_volume_positive(model):
    sets, _ = synth.sample_landmarks(model, 500, np.random.default_rng(3))
    assert all(lm.compute_cranial_volume(s) > 0 for s in sets)


def test_population_mean_volume_matches_recompute(model):
    sets, _ = synth.sample_landmarks(model, 50, np.random.default_rng(4))
    by_hand = []
    for s in sets:
        w = s[lm.PO_L][0] - s[lm.PO_R][0]
        d = abs(s[lm.PO_L][1] - s[lm.NA][1])
        h = s[lm.BREGMA][2] - s[lm.CFM][2]
        by_hand.append(abs(w * d * h))
    assert np.mean([lm.compute_cranial_volume(s) for s in sets]) == pytest.approx(np.mean(by_hand), rel=1e-12)


def test_sampling_deterministic(model):
    a, fa = synth.sample_landmarks(model, 3, 7)
    b, fb = synth.sample_landmarks(model, 3, 7)
    assert all(np.array_equal(x.coords, y.coords) for x, y in zip(a, b))
    np.testing.assert_array_equal(fa, fb)
    with pytest.raises(ValueError):
        synth.sample_landmarks(model, 0)


def test_sample_po_symmetry_in_frame(model):
    # Po(L/R) have equal and opposite v1 coordinates within generator noise.
    sets, _ = synth.sample_landmarks(model, 200, np.random.default_rng(5), noise_scale=0.0)
    for s in sets[:20]:
        f = lm.frame_from_landmarks(s)
        x = f.to_frame(s.coords)
        # the asymmetry factor moves only the mandible
        assert x[lm.PO_L - 1, 0] == pytest.approx(-x[lm.PO_R - 1, 0], abs=1e-9)


def test_landmarks_on_surface(phantoms):
    # every landmark is within one voxel of the foreground, each voxel being a unit cube
    for ph in phantoms:
        fg = ph.labels > 0
        sp = ph.volume.spacing_mm[0]
        for j in lm.ALL:
            v = ph.landmarks[j] / sp
            lo = np.floor(v).astype(int) - 2
            box = fg[tuple(slice(a, a + 6) for a in lo)]
            pts = np.argwhere(box) + lo
            gap = np.maximum(np.abs(pts - v) - 0.5, 0.0)
            near = np.min(np.linalg.norm(gap, axis=1))
            assert near <= 1.0, (j, near)


def test_parts_and_labels(phantoms):
    for ph in phantoms:
        cran, mand = ph.labels == 1, ph.labels == 2
        assert cran.any() and mand.any()
        grown = ndimage.binary_dilation(mand, np.ones((5, 5, 5), bool))
        assert not (grown & cran).any()
        # binarizes to itself
        b = binarize(ph.volume, 0.5)
        np.testing.assert_array_equal(b.data, ph.volume.data.astype(np.uint8))


def test_split_recovers_labels(phantoms):
    for ph in phantoms:
        b = BinaryVolume(ph.volume.data.astype(np.uint8), ph.volume.spacing_mm)
        cran, mand = split_mandible(b, lm.frame_from_landmarks(ph.landmarks))
        np.testing.assert_array_equal(mand.data.astype(bool), ph.labels == 2)
        np.testing.assert_array_equal(cran.data.astype(bool), ph.labels == 1)


def test_phantom_too_coarse_rejected(model):
    cfg = synth.PhantomConfig(shape=(32, 32, 32), spacing_mm=8.0, origin_mm=(127.0, 108.0, 97.0))
    with pytest.raises(synth.PhantomGeometryError):
        synth.build_phantom(lm.LandmarkSet(model.template), cfg)


def test_dataset_roundtrip_and_rerun(tmp_path, model):
    ds = synth.make_paired_and_anonymized(model, 1, 3, 1, seed=9)
    m1 = synth.write_dataset(ds, tmp_path / "a", model, 9)
    synth.write_dataset(synth.make_paired_and_anonymized(model, 1, 3, 1, seed=9), tmp_path / "b", model, 9)
    synth.validate_manifest(m1)
    for f in m1["files"] + ["manifest.json"]:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    manifest, data = synth.load_dataset(tmp_path / "a")
    assert manifest["counts"] == {"paired": 1, "anonymized": 3, "test": 1}
    np.testing.assert_array_equal(data["anonymized"][2].coords, ds.anonymized[2].coords)
    np.testing.assert_array_equal(data["paired"][0].landmarks.coords, ds.paired[0].landmarks.coords)
    np.testing.assert_array_equal(data["test"][0].labels, ds.test[0].labels)


def test_splits_are_disjoint_draws(model):
    ds = synth.make_paired_and_anonymized(model, 2, 2, 0, seed=1)
    assert not np.array_equal(ds.paired_factors, ds.anonymized_factors)
    assert len(ds.test) == 0


def test_manifest_validation():
    with pytest.raises(ValueError):
        synth.validate_manifest({"format": "ceph3d-dataset-1"})
    good = {k: None for k in synth.MANIFEST_KEYS}
    good.update(format="other", counts={})
    with pytest.raises(ValueError):
        synth.validate_manifest(good)
    good.update(format="ceph3d-dataset-1", counts={"paired": 1, "anonymized": -1, "test": 0})
    with pytest.raises(ValueError):
        synth.validate_manifest(json.loads(json.dumps(good)))
