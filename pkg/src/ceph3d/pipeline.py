"""End-to-end orchestration: training stages, inference, evaluation reports.

Coordinates on disk are volume millimetres (voxel index times spacing) for
subjects with a volume, and frame millimetres for landmark-only subjects.
Shape models always see landmarks in the subject's own reference frame,
scaled by the cranial-volume normalization.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import detectors as det
from . import landmarks as lm
from . import vae as V
from .landmarks import LandmarkSet, ReferenceFrame
from .nn import Sequential
from .volume_ops import BinaryVolume, VoxelVolume, binarize, split_mandible

# --- configuration -------------------------------------------------------------------


@dataclass
class ShapeStageConfig:
    latent_dim: int
    vae_epochs: int
    vae_lr: float
    phi_epochs: int
    phi_lr: float
    kl: str = V.PAPER_KL


@dataclass
class PipelineConfig:
    seed: int = 0
    rho: float = 0.5
    # synthetic data
    n_paired: int = 15
    n_anonymized: int = 229
    n_test: int = 9
    # shape models
    full: ShapeStageConfig = field(default_factory=lambda: ShapeStageConfig(9, 45000, 1e-3, 11000, 1e-4))
    cranial: ShapeStageConfig = field(default_factory=lambda: ShapeStageConfig(15, 80000, 1e-3, 17000, 1e-4))
    # detectors
    reference: det.DetectorConfig = field(default_factory=lambda: det.DetectorConfig(
        eta=80, epochs=20000, lr=1e-4, batch_size=0))
    mandible: det.DetectorConfig = field(default_factory=lambda: det.DetectorConfig(
        eta=80, epochs=20000, lr=1e-4, batch_size=0))
    midsagittal: det.DetectorConfig = field(default_factory=lambda: det.DetectorConfig(
        eta=80, epochs=20000, lr=1e-4, batch_size=0))
    gamma_factor: float = 2.0          # jitter covers this multiple of the max coarse training error
    min_gamma: int = 1
    reference_margin_px: int = 2
    slab_half_width_mm: float = 7.5
    groups: tuple[det.DetectorGroup, ...] = det.DEFAULT_GROUPS

    def validate(self) -> None:
        for name, stage in (("full", self.full), ("cranial", self.cranial)):
            if stage.vae_lr <= 0 or stage.phi_lr <= 0:
                raise ValueError(f"{name}: learning rates must be positive")
        if self.full.latent_dim >= 270 or self.cranial.latent_dim >= 138:
            raise ValueError("latent dimension must be below the input dimension")
        for name, d in (("reference", self.reference), ("mandible", self.mandible), ("midsagittal", self.midsagittal)):
            if d.lr <= 0 or d.epochs < 0 or d.eta < 1:
                raise ValueError(f"{name}: bad detector settings")
        det.validate_partition(self.groups)
        if self.rho <= 0:
            raise ValueError("rho must be positive")

    @classmethod
    def desk(cls, **overrides) -> "PipelineConfig":
        """Reduced setting: epochs at 1/10 of the defaults, smaller patches,
        minibatch lattice sampling and a larger detector learning rate."""
        cfg = cls(
            full=ShapeStageConfig(9, 4500, 1e-3, 1100, 1e-3),
            cranial=ShapeStageConfig(15, 8000, 1e-3, 1700, 1e-3),
            reference=det.DetectorConfig(eta=32, epochs=2000, lr=1e-3, batch_size=128),
            mandible=det.DetectorConfig(eta=40, epochs=2000, lr=1e-3, batch_size=128),
            midsagittal=det.DetectorConfig(eta=32, epochs=2000, lr=1e-3, batch_size=128),
        )
        return cfg.updated(overrides) if overrides else cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = [asdict(g) for g in self.groups]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        return cls().updated(d)

    def updated(self, d: Mapping) -> "PipelineConfig":
        """Copy with (possibly nested) fields replaced from a JSON-like mapping."""
        known = {f.name for f in fields(self)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            cur = getattr(self, k)
            if k == "groups":
                kw[k] = det.groups_from_json(v)
            elif is_dataclass(cur) and isinstance(v, Mapping):
                sub = {f.name for f in fields(cur)}
                bad = set(v) - sub
                if bad:
                    raise ValueError(f"unknown keys under {k}: {sorted(bad)}")
                kw[k] = replace(cur, **v)
            else:
                kw[k] = v
        return replace(self, **kw)


def load_config(path: str | Path | None, base: str = "desk") -> PipelineConfig:
    cfg = PipelineConfig.desk() if base == "desk" else PipelineConfig()
    if path:
        d = json.loads(Path(path).read_text())
        base = d.pop("base", None)
        if base == "paper":
            cfg = PipelineConfig()
        elif base == "desk":
            cfg = PipelineConfig.desk()
        cfg = cfg.updated(d)
    cfg.validate()
    return cfg


# --- coordinate helpers -------------------------------------------------------------------

def refs_as_set(refs_mm: np.ndarray) -> LandmarkSet:
    """LandmarkSet holding only the reference landmarks (others zero and invalid)."""
    coords = np.zeros((lm.N_LANDMARKS, 3))
    coords[np.array(lm.REFERENCE) - 1] = np.asarray(refs_mm).reshape(-1, 3)
    valid = np.zeros(lm.N_LANDMARKS, bool)
    valid[np.array(lm.REFERENCE) - 1] = True
    return LandmarkSet(coords, valid)


def canonical(landmarks: LandmarkSet, reference_volume: float) -> tuple[LandmarkSet, ReferenceFrame, lm.NormalizationParams]:
    """Subject in its own frame, normalized; returns the frame and scale used."""
    frame = lm.frame_from_landmarks(landmarks)
    in_frame = frame.set_to_frame(landmarks)
    params = lm.normalization_for(in_frame, reference_volume)
    return lm.normalize(in_frame, params), frame, params


def training_vectors(sets: Sequence[LandmarkSet], reference_volume: float) -> np.ndarray:
    return np.stack([canonical(s, reference_volume)[0].coords for s in sets])


def reference_volume_of(sets: Sequence[LandmarkSet]) -> float:
    """Average cranial volume over subjects, each measured in its own frame."""
    return float(np.mean([lm.compute_cranial_volume(lm.frame_from_landmarks(s).set_to_frame(s)) for s in sets]))


# --- bundle -----------------------------------------------------------------------------

@dataclass
class Bundle:
    config: PipelineConfig
    reference_volume: float
    spacing_mm: tuple[float, float, float]
    reference_models: dict[tuple[int, str], det.ViewModel]
    vae_full: V.VaeModel
    phi_full: V.PhiModel
    group_models: dict[int, det.DetectorModel]
    trio_models: dict[int, det.DetectorModel]
    vae_cranial: V.VaeModel
    phi_cranial: V.PhiModel
    gammas: dict[str, int] = field(default_factory=dict)
    traces: dict[str, dict] = field(default_factory=dict)
    manifests: dict[str, dict] = field(default_factory=dict)

    def save(self, out: str | Path) -> None:
        out = Path(out)
        (out / "nets").mkdir(parents=True, exist_ok=True)

        def put_net(name: str, net: Sequential) -> str:
            rel = f"nets/{name}.cfnet"
            net.save(out / rel)
            return rel

        def det_meta(name: str, m: det.DetectorModel) -> dict:
            return {"file": put_net(name, m.net), "nd": m.nd, "eta": m.eta, "members": list(m.members),
                    "passes": m.passes}

        def vae_meta(name: str, m: V.VaeModel) -> dict:
            return {"input_dim": m.input_dim, "config": asdict(m.cfg), "standardizer": m.std.to_json(),
                    "files": [put_net(f"{name}_{part}", n) for part, n in
                              zip(("encoder", "mu", "logsigma", "decoder"), m.nets)]}

        def phi_meta(name: str, m: V.PhiModel) -> dict:
            return {"input_dim": m.input_dim, "latent_dim": m.latent_dim, "config": asdict(m.cfg),
                    "standardizer": m.std.to_json(), "file": put_net(name, m.net)}

        meta = {
            "format": "ceph3d-bundle-1",
            "config": self.config.to_dict(),
            "reference_volume": self.reference_volume,
            "spacing_mm": list(self.spacing_mm),
            "reference_models": [
                {"landmark": j, "view": v, "start": vm.start.tolist(),
                 **det_meta(f"ref_{j:02d}_{v}", vm.model)}
                for (j, v), vm in sorted(self.reference_models.items())],
            "vae_full": vae_meta("vae_full", self.vae_full),
            "phi_full": phi_meta("phi_full", self.phi_full),
            "group_models": {str(g): det_meta(f"group_{g}", m) for g, m in sorted(self.group_models.items())},
            "trio_models": {str(j): det_meta(f"trio_{j}", m) for j, m in sorted(self.trio_models.items())},
            "vae_cranial": vae_meta("vae_cranial", self.vae_cranial),
            "phi_cranial": phi_meta("phi_cranial", self.phi_cranial),
            "gammas": self.gammas,
            "manifests": self.manifests,
        }
        (out / "bundle.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
        (out / "traces.json").write_text(json.dumps(self.traces, sort_keys=True) + "\n")

    @classmethod
    def load(cls, root: str | Path) -> "Bundle":
        root = Path(root)
        meta = json.loads((root / "bundle.json").read_text())
        if meta.get("format") != "ceph3d-bundle-1":
            raise ValueError(f"{root}: not a model bundle")

        def get_det(d) -> det.DetectorModel:
            return det.DetectorModel(Sequential.load(root / d["file"]), d["nd"], d["eta"], d["members"], d["passes"])

        def get_vae(d) -> V.VaeModel:
            c = d["config"]
            m = V.VaeModel(d["input_dim"], V.VaeConfig(**{**c, "hidden": tuple(c["hidden"])}),
                           V.Standardizer.from_json(d["standardizer"]))
            for net, f in zip(m.nets, d["files"]):
                net.set_params(Sequential.load(root / f).params)
            return m

        def get_phi(d) -> V.PhiModel:
            c = d["config"]
            m = V.PhiModel(d["input_dim"], d["latent_dim"], V.PhiConfig(**{**c, "hidden": tuple(c["hidden"])}),
                           V.Standardizer.from_json(d["standardizer"]))
            m.net.set_params(Sequential.load(root / d["file"]).params)
            return m

        refs = {(r["landmark"], r["view"]): det.ViewModel(get_det(r), np.array(r["start"]))
                for r in meta["reference_models"]}
        traces_path = root / "traces.json"
        return cls(
            config=PipelineConfig.from_dict(meta["config"]),
            reference_volume=float(meta["reference_volume"]),
            spacing_mm=tuple(meta["spacing_mm"]),
            reference_models=refs,
            vae_full=get_vae(meta["vae_full"]),
            phi_full=get_phi(meta["phi_full"]),
            group_models={int(k): get_det(v) for k, v in meta["group_models"].items()},
            trio_models={int(k): get_det(v) for k, v in meta["trio_models"].items()},
            vae_cranial=get_vae(meta["vae_cranial"]),
            phi_cranial=get_phi(meta["phi_cranial"]),
            gammas=meta["gammas"],
            traces=json.loads(traces_path.read_text()) if traces_path.exists() else {},
            manifests=meta["manifests"],
        )


# --- inference ------------------------------------------------------------------------------

class StageError(RuntimeError):
    """Failure tagged with the pipeline stage that raised it."""

    def __init__(self, stage: str, msg: str):
        super().__init__(f"[{stage}] {msg}")
        self.stage = stage


@dataclass
class InferenceResult:
    coarse: LandmarkSet      # volume mm
    final: LandmarkSet       # volume mm
    flags: dict[str, list]
    frame: ReferenceFrame


def coarse_estimate(bundle: Bundle, refs_mm: np.ndarray) -> tuple[LandmarkSet, ReferenceFrame, lm.NormalizationParams]:
    """Full 90-landmark estimate (volume mm) from the 10 reference positions."""
    ref_set = refs_as_set(refs_mm)
    frame = lm.frame_from_landmarks(ref_set)
    in_frame = frame.set_to_frame(ref_set)
    params = lm.normalization_for(in_frame, bundle.reference_volume)
    ref_vec = lm.select(lm.normalize(in_frame, params), lm.REFERENCE)
    full = V.estimate_all(bundle.vae_full, bundle.phi_full, ref_vec)
    est = lm.denormalize(LandmarkSet.from_flat(full), params)
    return frame.set_from_frame(est), frame, params


def infer(bundle: Bundle, volume: VoxelVolume) -> InferenceResult:
    cfg = bundle.config
    sp = np.asarray(volume.spacing_mm)
    binvol = volume if isinstance(volume, BinaryVolume) else binarize(volume, cfg.rho)
    flags: dict[str, list] = {"low_confidence_reference": [], "fallback_groups": []}
    try:
        refdet = det.detect_reference_landmarks(binvol, bundle.reference_models)
    except Exception as exc:  # reference detection failures are fatal
        raise StageError("reference", str(exc)) from exc
    flags["low_confidence_reference"] = [j for j, f in sorted(refdet.low_confidence.items()) if f]
    refs_mm = refdet.positions_vox * sp
    try:
        coarse, frame, params = coarse_estimate(bundle, refs_mm)
    except (lm.DegenerateFrameError, lm.DegenerateVolumeError, ValueError) as exc:
        raise StageError("coarse", str(exc)) from exc

    coarse_vox = {j: coarse[j] / sp for j in lm.ALL}
    final = coarse.coords.copy()
    # mandible
    try:
        _, mand = split_mandible(binvol, frame)
        gd = det.detect_mandibular(mand, coarse_vox, bundle.group_models, cfg.groups)
        for j, p in gd.positions_vox.items():
            final[j - 1] = p * sp
        flags["fallback_groups"] = [g for g, f in sorted(gd.fallback.items()) if f]
    except Exception as exc:
        flags["fallback_groups"] = [g.gid for g in cfg.groups]
        flags["mandible_error"] = [str(exc)]
    # midsagittal trio and cranial completion
    trio = det.detect_trio(binvol, frame, coarse_vox, bundle.trio_models, cfg.slab_half_width_mm)
    trio_frame = {j: frame.to_frame(p) * params.scale for j, p in trio.items()}
    ref_frame = lm.normalize(frame.set_to_frame(refs_as_set(refs_mm)), params)
    ref_cr = lm.select(ref_frame, lm.REFERENCE_CRANIAL)
    trio_vec = np.concatenate([trio_frame[j] for j in lm.MIDSAGITTAL_TRIO])
    cran = det.refine_cranial(bundle.vae_cranial, bundle.phi_cranial, ref_cr, trio_vec)
    cran_mm = frame.from_frame(cran.reshape(-1, 3) / params.scale)
    final[:46] = cran_mm
    for j, p in trio.items():
        final[j - 1] = p
    for r, j in enumerate(lm.REFERENCE):
        final[j - 1] = refs_mm[r]
    return InferenceResult(coarse, LandmarkSet(final), flags, frame)


# --- training -------------------------------------------------------------------------------

Log = Callable[[str], None]


def _trace_summary(trace) -> dict:
    loss = list(trace.loss)
    return {"initial": loss[0], "final": loss[-1], "epochs": len(loss), "min": min(loss)}


def _stage(name: str, fn, log: Log):
    t0 = time.time()
    try:
        out = fn()
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    log(f"[{name}] done in {time.time() - t0:.1f}s")
    return out


def train(cfg: PipelineConfig, paired: Sequence, anonymized: Sequence[LandmarkSet], log: Log = print) -> Bundle:
    """Five stages: reference views, full shape model, mandible groups,
    midsagittal trio, cranial shape model.

    ``paired`` items need ``volume`` (VoxelVolume) and ``landmarks`` (volume mm);
    ``anonymized`` sets may be in any rigid frame.
    """
    cfg.validate()
    if len(paired) < 2:
        raise ValueError("need at least two paired subjects")
    sp = np.asarray(paired[0].volume.spacing_mm)
    binvols = [s.volume if isinstance(s.volume, BinaryVolume) else binarize(s.volume, cfg.rho) for s in paired]
    truths = [s.landmarks for s in paired]
    seed = cfg.seed

    def seeded(d: det.DetectorConfig, k: int) -> det.DetectorConfig:
        return replace(d, seed=int(np.random.SeedSequence([seed, 100 + k]).generate_state(1)[0]))

    traces: dict[str, dict] = {}

    # 1. reference landmarks
    ref_truth_vox = [lm.select(t, lm.REFERENCE).reshape(-1, 3) / sp for t in truths]
    ref_models, ref_traces = _stage("reference", lambda: det.train_reference_detectors(
        binvols, ref_truth_vox, seeded(cfg.reference, 1), margin_px=cfg.reference_margin_px, log=log), log)
    traces["reference"] = {f"{j}/{v}": _trace_summary(t) for (j, v), t in sorted(ref_traces.items())}

    # 2. full shape model on all paired + landmark-only subjects
    all_sets = list(truths) + list(anonymized)
    ref_volume = reference_volume_of(truths)
    X = training_vectors(all_sets, ref_volume)

    def shape_stage(sc: ShapeStageConfig, mask, phi_mask, k):
        data = lm.select_batch(X, mask)
        vcfg = V.VaeConfig(latent_dim=sc.latent_dim, epochs=sc.vae_epochs, lr=sc.vae_lr,
                           seed=seed * 1000 + k, kl=sc.kl)
        vm, vt = V.train_vae(data, vcfg)
        pm, pt = V.train_phi(lm.select_batch(X, phi_mask), data, vm,
                             V.PhiConfig(epochs=sc.phi_epochs, lr=sc.phi_lr, seed=seed * 1000 + k + 1))
        return vm, vt, pm, pt, data

    vae_full, vt, phi_full, pt, data_full = _stage(
        "full-shape", lambda: shape_stage(cfg.full, lm.ALL, lm.REFERENCE, 2), log)
    log(f"full VAE loss {vt.initial:.4g} -> {vt.final:.4g}; phi {pt.initial:.4g} -> {pt.final:.4g}")
    traces["vae_full"], traces["phi_full"] = _trace_summary(vt), _trace_summary(pt)
    manifests = {"vae_full": V.manifest_for(vae_full, data_full, vt)}

    partial = Bundle(cfg, ref_volume, tuple(sp), ref_models, vae_full, phi_full, {}, {}, None, None)  # type: ignore[arg-type]

    # coarse estimates on the training subjects set the jitter bounds
    coarse_sets, frames = [], []
    for bv in binvols:
        rd = det.detect_reference_landmarks(bv, ref_models)
        c, fr, _ = coarse_estimate(partial, rd.positions_vox * sp)
        coarse_sets.append(c)
        frames.append(fr)

    def gamma_from(err_mm: float) -> int:
        return max(cfg.min_gamma, det.gamma_for_error(err_mm, float(sp.min()), cfg.gamma_factor))

    # 3. mandibular groups
    def group_stage():
        gammas = {}
        for g in cfg.groups:
            err = max(float(np.max(np.linalg.norm(c.coords[np.array(g.members) - 1] - t.coords[np.array(g.members) - 1],
                                                   axis=1))) for c, t in zip(coarse_sets, truths))
            rows = np.array(g.members) - 1
            spread = max(float(np.max(np.abs(t.coords[rows] - t.coords[rows].mean(axis=0)))) for t in truths)
            cap = cfg.mandible.eta // 2 - 1 - int(np.ceil(spread / sp.min()))
            gammas[g.gid] = max(0, min(gamma_from(err), cap))
        mand = [split_mandible(bv, lm.frame_from_landmarks(t))[1] for bv, t in zip(binvols, truths)]
        tv = [{j: t[j] / sp for j in lm.MANDIBULAR} for t in truths]
        models, tr = det.train_group_detectors(mand, tv, gammas, seeded(cfg.mandible, 3), cfg.groups, log=log)
        return models, tr, gammas

    group_models, group_traces, group_gammas = _stage("mandible", group_stage, log)
    traces["mandible"] = {str(g): _trace_summary(t) for g, t in group_traces.items()}

    # 4. midsagittal trio
    def trio_stage():
        gammas = {}
        for j in lm.MIDSAGITTAL_TRIO:
            err = max(float(np.linalg.norm((c[j] - t[j])[1:])) for c, t in zip(coarse_sets, truths))
            gammas[j] = min(gamma_from(err), cfg.midsagittal.eta // 2 - 1)
        true_frames = [lm.frame_from_landmarks(t) for t in truths]
        tv = [{j: t[j] / sp for j in lm.MIDSAGITTAL_TRIO} for t in truths]
        models, tr = det.train_trio_detectors(binvols, true_frames, tv, gammas, seeded(cfg.midsagittal, 4),
                                              cfg.slab_half_width_mm, log=log)
        return models, tr, gammas

    trio_models, trio_traces, trio_gammas = _stage("midsagittal", trio_stage, log)
    traces["midsagittal"] = {str(j): _trace_summary(t) for j, t in trio_traces.items()}

    # 5. cranial shape model
    vae_cr, vt2, phi_cr, pt2, data_cr = _stage(
        "cranial-shape", lambda: shape_stage(cfg.cranial, lm.CRANIAL, lm.REFERENCE_MID, 5), log)
    log(f"cranial VAE loss {vt2.initial:.4g} -> {vt2.final:.4g}; phi {pt2.initial:.4g} -> {pt2.final:.4g}")
    traces["vae_cranial"], traces["phi_cranial"] = _trace_summary(vt2), _trace_summary(pt2)
    manifests["vae_cranial"] = V.manifest_for(vae_cr, data_cr, vt2)

    gammas = {f"group_{g}": int(v) for g, v in group_gammas.items()}
    gammas.update({f"trio_{j}": int(v) for j, v in trio_gammas.items()})
    return Bundle(cfg, ref_volume, tuple(float(s) for s in sp), ref_models, vae_full, phi_full, group_models,
                  trio_models, vae_cr, phi_cr, gammas, traces, manifests)


# --- evaluation -----------------------------------------------------------------------------

BIN_EDGES = (2.0, 3.0, 4.0, 5.0, 6.0)
BIN_LABELS = ("1-2", "2-3", "3-4", "4-5", "5-6", "6+")
REGIONS = {"cranium": lm.CRANIAL, "mandible": lm.MANDIBULAR, "total": lm.ALL}


def error_bin(err: float) -> int:
    """Bin index; the first bin also takes everything below 2 mm."""
    return int(np.searchsorted(BIN_EDGES, err, side="right"))


@dataclass
class DetectionReport:
    subjects: tuple[str, ...]
    errors: dict[str, np.ndarray]     # stage -> (n_subjects, 90) mm

    def per_landmark_mean(self, stage: str) -> np.ndarray:
        return self.errors[stage].mean(axis=0)

    def per_landmark_sd(self, stage: str) -> np.ndarray:
        return self.errors[stage].std(axis=0)

    def region_mean(self, stage: str, region: str) -> float:
        return float(self.errors[stage][:, np.array(REGIONS[region]) - 1].mean())

    def region_sd(self, stage: str, region: str) -> float:
        return float(self.errors[stage][:, np.array(REGIONS[region]) - 1].std())

    def subject_means(self, stage: str, region: str = "total") -> np.ndarray:
        return self.errors[stage][:, np.array(REGIONS[region]) - 1].mean(axis=1)

    def histogram(self, stage: str) -> dict[str, list[int]]:
        """Landmark counts per error bin for cranium, mandible and total."""
        means = self.per_landmark_mean(stage)
        out = {}
        for region, mask in REGIONS.items():
            counts = [0] * len(BIN_LABELS)
            for j in mask:
                counts[error_bin(float(means[j - 1]))] += 1
            out[region] = counts
        return out


def make_report(preds: Mapping[str, Mapping[str, LandmarkSet]], truths: Mapping[str, LandmarkSet]) -> DetectionReport:
    """``preds[stage][subject]`` against ``truths[subject]``; subjects are sorted by name."""
    names = tuple(sorted(truths))
    errors = {}
    for stage, sets in preds.items():
        if set(sets) != set(names):
            raise ValueError(f"stage {stage}: subjects do not match the truth set")
        errors[stage] = np.stack([np.linalg.norm(sets[n].coords - truths[n].coords, axis=1) for n in names])
    return DetectionReport(names, errors)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(r)


def _f(x: float) -> str:
    return f"{x:.6f}"


def write_report(report: DetectionReport, out: str | Path) -> dict[str, Path]:
    """CSV tables: summary, per-landmark errors, error-bin histogram, per-subject means."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stages = sorted(report.errors)
    paths = {k: out / f"{k}.csv" for k in ("summary", "per_landmark", "histogram", "per_subject")}
    _write_csv(paths["summary"], ("stage", "region", "mean_mm", "sd_mm"),
               [(s, r, _f(report.region_mean(s, r)), _f(report.region_sd(s, r))) for s in stages for r in REGIONS])
    rows = []
    for j in lm.ALL:
        region = "cranium" if j in lm.CRANIAL else "mandible"
        row = [j, lm.name_of(j), region]
        for s in stages:
            row += [_f(report.per_landmark_mean(s)[j - 1]), _f(report.per_landmark_sd(s)[j - 1])]
        rows.append(row)
    _write_csv(paths["per_landmark"], ["index", "name", "region"] + [f"{s}_{k}" for s in stages for k in ("mean_mm", "sd_mm")],
               rows)
    hist_rows = []
    for s in stages:
        h = report.histogram(s)
        for b, label in enumerate(BIN_LABELS):
            hist_rows.append((s, label, h["cranium"][b], h["mandible"][b], h["total"][b]))
    _write_csv(paths["histogram"], ("stage", "bin_mm", "cranium", "mandible", "total"), hist_rows)
    subj_rows = []
    for i, n in enumerate(report.subjects):
        row = [n]
        for s in stages:
            row += [_f(report.subject_means(s, r)[i]) for r in REGIONS]
        subj_rows.append(row)
    _write_csv(paths["per_subject"], ["subject"] + [f"{s}_{r}_mm" for s in stages for r in REGIONS], subj_rows)
    return paths


def format_report(report: DetectionReport) -> str:
    stages = sorted(report.errors)
    lines = ["region     " + "".join(f"{s:>18}" for s in stages)]
    for r in REGIONS:
        lines.append(f"{r:<11}" + "".join(
            f"{report.region_mean(s, r):>9.2f} ± {report.region_sd(s, r):<6.2f}" for s in stages))
    for s in stages:
        h = report.histogram(s)
        lines.append("")
        lines.append(f"error bins ({s}):  " + "  ".join(f"{b:>4}" for b in BIN_LABELS))
        for r in REGIONS:
            lines.append(f"  {r:<16}" + "  ".join(f"{c:>4}" for c in h[r]))
    lines.append("")
    lines.append("subject        " + "".join(f"{s:>10}" for s in stages))
    for i, n in enumerate(report.subjects):
        lines.append(f"{n:<15}" + "".join(f"{report.subject_means(s)[i]:>10.2f}" for s in stages))
    return "\n".join(lines)
