from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from ceph3d import cli
from ceph3d import landmarks as lm
from ceph3d import pipeline as P
from ceph3d import synth
from ceph3d.detectors import on_midsagittal_plane
from ceph3d.volume_ops import load_volume


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- report ----------------------------------------------------------------------------------

@pytest.mark.parametrize("err,label", [(0.0, "1-2"), (1.99, "1-2"), (2.0, "2-3"), (3.0, "3-4"), (5.5, "5-6"),
                                       (6.0, "6+"), (40.0, "6+")])
def test_error_bins(err, label):
    assert P.BIN_LABELS[P.error_bin(err)] == label


def _fixture_sets(n=3, seed=0):
    rng = np.random.default_rng(seed)
    truths = {f"s{i}": lm.LandmarkSet(rng.normal(0, 50, (90, 3))) for i in range(n)}
    preds = {name: t.with_coords(t.coords + rng.normal(0, 2, (90, 3))) for name, t in truths.items()}
    return preds, truths


def test_perfect_prediction_report():
    _, truths = _fixture_sets()
    rep = P.make_report({"final": truths}, truths)
    assert rep.region_mean("final", "total") == 0.0
    h = rep.histogram("final")
    assert h["cranium"][0] == 46 and h["mandible"][0] == 44 and h["total"][0] == 90


def test_single_offset_lands_in_bin():
    _, truths = _fixture_sets(1)
    t = truths["s0"]
    moved = lm.scatter(t, (60,), t[60] + np.array([0.0, 3.0, 0.0]))
    h = P.make_report({"final": {"s0": moved}}, truths).histogram("final")
    assert h["mandible"][P.BIN_LABELS.index("3-4")] == 1
    assert h["mandible"][0] == 43


def test_report_tables_by_hand(tmp_path):
    preds, truths = _fixture_sets()
    rep = P.make_report({"final": preds}, truths)
    paths = P.write_report(rep, tmp_path)
    rows = _read_csv(paths["per_subject"])
    for r in rows:
        p, t = preds[r["subject"]].coords, truths[r["subject"]].coords
        d = [np.sqrt(sum((p[j][k] - t[j][k]) ** 2 for k in range(3))) for j in range(90)]
        assert float(r["final_total_mm"]) == pytest.approx(sum(d) / 90, abs=1e-6)
        assert float(r["final_cranium_mm"]) == pytest.approx(sum(d[:46]) / 46, abs=1e-6)
        assert float(r["final_mandible_mm"]) == pytest.approx(sum(d[46:]) / 44, abs=1e-6)
    hist = _read_csv(paths["histogram"])
    assert sum(int(r["cranium"]) for r in hist) == 46
    assert sum(int(r["mandible"]) for r in hist) == 44
    assert sum(int(r["total"]) for r in hist) == 90
    assert len(_read_csv(paths["per_landmark"])) == 90
    assert "cranium" in P.format_report(rep)


def test_report_invariant_to_subject_order(tmp_path):
    preds, truths = _fixture_sets()
    a = P.write_report(P.make_report({"final": preds}, truths), tmp_path / "a")
    rev_t = dict(reversed(list(truths.items())))
    rev_p = dict(reversed(list(preds.items())))
    b = P.write_report(P.make_report({"final": rev_p}, rev_t), tmp_path / "b")
    for k in a:
        assert a[k].read_bytes() == b[k].read_bytes()


def test_report_subject_mismatch():
    preds, truths = _fixture_sets()
    preds.pop("s0")
    with pytest.raises(ValueError):
        P.make_report({"final": preds}, truths)


# --- config ----------------------------------------------------------------------------------

def test_config_roundtrip():
    for cfg in (P.PipelineConfig(), P.PipelineConfig.desk()):
        back = P.PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back == cfg


def test_desk_is_tenth_of_paper_epochs():
    paper, desk = P.PipelineConfig(), P.PipelineConfig.desk()
    assert desk.full.vae_epochs * 10 == paper.full.vae_epochs
    assert desk.full.phi_epochs * 10 == paper.full.phi_epochs
    assert desk.cranial.vae_epochs * 10 == paper.cranial.vae_epochs
    assert desk.cranial.phi_epochs * 10 == paper.cranial.phi_epochs
    for name in ("reference", "mandible", "midsagittal"):
        assert getattr(desk, name).epochs * 10 == getattr(paper, name).epochs


def test_paper_defaults():
    cfg = P.PipelineConfig()
    assert (cfg.full.latent_dim, cfg.full.vae_epochs, cfg.full.vae_lr) == (9, 45000, 1e-3)
    assert (cfg.full.phi_epochs, cfg.full.phi_lr) == (11000, 1e-4)
    assert (cfg.cranial.latent_dim, cfg.cranial.vae_epochs, cfg.cranial.phi_epochs) == (15, 80000, 17000)
    assert cfg.mandible.eta == 80 and cfg.mandible.epochs == 20000 and cfg.mandible.lr == 1e-4
    assert cfg.slab_half_width_mm == 7.5
    assert (cfg.n_paired, cfg.n_anonymized) == (15, 229)


def test_config_errors(tmp_path):
    with pytest.raises(ValueError):
        P.PipelineConfig().updated({"nope": 1})
    with pytest.raises(ValueError):
        P.PipelineConfig().updated({"full": {"nope": 1}})
    bad = P.PipelineConfig().updated({"full": {"vae_lr": 0.0}})
    with pytest.raises(ValueError):
        bad.validate()
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"base": "paper", "seed": 4}))
    cfg = P.load_config(f, base="desk")
    assert cfg.seed == 4 and cfg.full.vae_epochs == 45000


def test_stage_errors_are_tagged():
    def boom():
        raise ArithmeticError("bad")

    with pytest.raises(P.StageError, match=r"\[mandible\] ArithmeticError: bad"):
        P._stage("mandible", boom, lambda m: None)


# --- CLI errors --------------------------------------------------------------------------------

def test_cli_missing_inputs(tmp_path, capsys):
    assert cli.main(["eval", "--pred", str(tmp_path / "x"), "--truth", str(tmp_path / "y"),
                     "--out", str(tmp_path / "o")]) == 1
    assert "[eval]" in capsys.readouterr().err
    assert cli.main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "b")]) == 1
    assert "[train]" in capsys.readouterr().err


def test_cli_stage_failure_exit_code(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(synth, "load_dataset", lambda root: ({}, {"paired": [], "anonymized": []}))

    def fail(*a, **k):
        raise P.StageError("full-shape", "DivergenceError: non-finite loss")

    monkeypatch.setattr(P, "train", fail)
    assert cli.main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "b")]) == 2
    assert "[full-shape]" in capsys.readouterr().err


def test_cli_bad_config_key(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"wat": 1}))
    assert cli.main(["synth", "--config", str(f), "--out", str(tmp_path / "d")]) == 1


# --- tiny end-to-end --------------------------------------------------------------------------

def test_tiny_run_outputs(tiny_runs, capsys):
    run = tiny_runs[0]
    flags = json.loads((run["pred"] / "flags.json").read_text())
    assert sorted(flags) == ["test_000", "test_001"]
    bundle = P.Bundle.load(run["bundle"])
    for stem in flags:
        for kind in ("coarse", "final"):
            s = lm.read_landmark_csv(run["pred"] / f"{stem}_{kind}.csv")
            assert s.coords.shape == (90, 3) and np.all(np.isfinite(s.coords))
    # trio on the plane of the detected frame
    vol = load_volume(run["data"] / "test" / "test_000.cfvol")
    res = P.infer(bundle, vol)
    for j in lm.MIDSAGITTAL_TRIO:
        assert abs(res.frame.to_frame(res.final[j])[0]) < 1e-9
    assert np.allclose(on_midsagittal_plane(res.frame, res.final[24][1:])[0], res.final[24])
    # reload reproduces inference exactly
    again = P.infer(P.Bundle.load(run["bundle"]), vol)
    np.testing.assert_array_equal(again.final.coords, res.final.coords)
    written = lm.read_landmark_csv(run["pred"] / "test_000_final.csv")
    np.testing.assert_array_equal(written.coords, res.final.coords)


def test_tiny_run_traces_and_stages(tiny_runs):
    bundle = P.Bundle.load(tiny_runs[0]["bundle"])
    stages = {"reference", "vae_full", "mandible", "midsagittal", "vae_cranial"}
    assert stages <= set(bundle.traces)
    assert bundle.traces["vae_full"]["final"] < bundle.traces["vae_full"]["initial"]
    assert bundle.traces["vae_cranial"]["final"] < bundle.traces["vae_cranial"]["initial"]
    assert len(bundle.reference_models) == 20 and len(bundle.group_models) == 9 and len(bundle.trio_models) == 3
    assert bundle.manifests["vae_full"]["input_dim"] == 270
    assert bundle.manifests["vae_cranial"]["input_dim"] == 138


def test_tiny_run_eval_and_report(tiny_runs, tmp_path, capsys):
    run = tiny_runs[0]
    assert cli.main(["eval", "--pred", str(run["pred"]), "--data", str(run["data"]), "--out", str(tmp_path)]) == 0
    assert cli.main(["report", "--eval", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "== histogram" in out and "test_001" in out
