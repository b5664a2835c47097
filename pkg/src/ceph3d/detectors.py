"""Patch-based landmark regressors.

Three families share one small-CNN regressor:

* reference detectors: 2D nets on shaded renderings of the whole skull, two
  orthogonal views per reference landmark;
* mandibular group detectors: 3D nets on cubes cut from the mandible volume,
  one net per landmark group;
* midsagittal detectors: 2D nets on the slab-integrated midsagittal image.

All positions inside this module are in voxel (pixel) units of the source
array. Regression targets are patch-local: truth minus patch corner.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import landmarks as lm
from .landmarks import ReferenceFrame
from .nn import AdamState, Conv, Dense, DivergenceError, Flatten, MaxPool, ReLU, Sequential, adam_step
from .volume_ops import (
    VIEWS, BinaryVolume, Image2D, VoxelVolume, _extract, integrate_midsagittal, render_illuminated,
    round_voxel, save_image, save_volume, slab_bounds, view_image_axes,
)


# --- jitter lattice and groups ----------------------------------------------------

@dataclass(frozen=True)
class JitterSpec:
    """Offsets k in [-gamma, gamma]^D on a grid of step ``stride``."""

    gamma: int
    stride: int = 1

    def __post_init__(self):
        if self.gamma < 0 or self.stride < 1:
            raise ValueError("need gamma >= 0 and stride >= 1")
        if (2 * self.gamma) % self.stride:
            raise ValueError(f"stride {self.stride} does not divide 2*gamma = {2 * self.gamma}")

    @classmethod
    def covering(cls, gamma: int, stride: int = 1) -> "JitterSpec":
        """Smallest lattice of step ``stride`` whose bound is at least ``gamma``."""
        gamma = max(int(gamma), 0)
        stride = max(int(stride), 1)
        return cls(int(math.ceil(gamma / stride)) * stride, stride)

    def axis_offsets(self) -> np.ndarray:
        return np.arange(-self.gamma, self.gamma + 1, self.stride)

    def offsets(self, nd: int) -> np.ndarray:
        ax = self.axis_offsets()
        grids = np.meshgrid(*([ax] * nd), indexing="ij")
        return np.stack([g.reshape(-1) for g in grids], axis=1).astype(int)

    def size(self, nd: int) -> int:
        return (2 * self.gamma // self.stride + 1) ** nd


def gamma_for_error(max_error_mm: float, spacing_mm: float, factor: float = 2.0) -> int:
    """Jitter bound (voxels) covering ``factor`` times the largest coarse error."""
    return int(math.ceil(factor * max_error_mm / spacing_mm - 1e-9))


VOLUME_3D = "volume3d"
IMAGE_2D = "image2d"


@dataclass(frozen=True)
class DetectorGroup:
    gid: int
    name: str
    members: tuple[int, ...]
    side: str            # "L", "R" or "C"
    source: str = VOLUME_3D

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(sorted(int(m) for m in self.members)))
        if self.side not in ("L", "R", "C"):
            raise ValueError(f"bad side {self.side!r}")
        if self.source not in (VOLUME_3D, IMAGE_2D):
            raise ValueError(f"bad source {self.source!r}")

    @property
    def nd(self) -> int:
        return 3 if self.source == VOLUME_3D else 2

    @property
    def output_dim(self) -> int:
        return self.nd * len(self.members)


# Mandibular partition. Each group must fit one patch, so no group mixes the
# two sides apart from midline structures.
DEFAULT_GROUPS: tuple[DetectorGroup, ...] = (
    DetectorGroup(1, "condyle_L", lm.CONDYLE_L, "L"),
    DetectorGroup(2, "condyle_R", lm.CONDYLE_R, "R"),
    DetectorGroup(3, "ramus_L", (51, 55, 57, 60), "L"),
    DetectorGroup(4, "ramus_R", (70, 74, 76, 79), "R"),
    DetectorGroup(5, "gonial_body_L", (49, 58, 59, 65, 66), "L"),
    DetectorGroup(6, "gonial_body_R", (50, 77, 78, 84, 85), "R"),
    DetectorGroup(7, "symphysis_incisors", (61, 62, 67, 68, 69, 80, 81, 88, 89), "C"),
    DetectorGroup(8, "mid_condyle_foramen", (86, 87), "C"),
    DetectorGroup(9, "mid_foramen_mental", (90,), "C"),
)

TRIO_GROUPS: tuple[DetectorGroup, ...] = tuple(
    DetectorGroup(100 + j, f"mid_{lm.name_of(j)}", (j,), "C", IMAGE_2D) for j in lm.MIDSAGITTAL_TRIO
)


def validate_partition(groups: Sequence[DetectorGroup]) -> None:
    """Groups must partition the 42 non-reference mandibular landmarks."""
    target = set(lm.MANDIBULAR) - set(lm.REFERENCE)
    seen: list[int] = [m for g in groups for m in g.members]
    if len(seen) != len(set(seen)):
        raise ValueError("groups overlap")
    if set(seen) != target:
        missing, extra = sorted(target - set(seen)), sorted(set(seen) - target)
        raise ValueError(f"groups do not partition the mandibular set (missing {missing}, extra {extra})")


def groups_from_json(items: Sequence[Mapping]) -> tuple[DetectorGroup, ...]:
    return tuple(DetectorGroup(int(d["gid"]), d["name"], tuple(d["members"]), d["side"],
                               d.get("source", VOLUME_3D)) for d in items)


# --- patch datasets ---------------------------------------------------------------

@dataclass
class PatchDataset:
    """Lattice patch dataset with patch-local targets (N, nd * m).

    Patches are cut lazily from ``sources`` (each (spatial.., C)) so dense
    lattices do not need to be held in memory at once.
    """

    eta: int
    nd: int
    sources: list
    targets: np.ndarray
    centers: np.ndarray
    offsets: np.ndarray
    subjects: np.ndarray
    members: tuple[int, ...]

    def __len__(self) -> int:
        return int(self.centers.shape[0])

    @property
    def channels(self) -> int:
        return int(self.sources[0].shape[-1])

    @property
    def corners(self) -> np.ndarray:
        return self.centers - self.eta // 2

    def batch(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=int).reshape(-1)
        out = np.empty((idx.size,) + (self.eta,) * self.nd + (self.channels,), dtype=np.float64)
        for b, i in enumerate(idx):
            out[b] = extract_multichannel(self.sources[self.subjects[i]], self.centers[i], self.eta)
        return out

    @property
    def patches(self) -> np.ndarray:
        return self.batch(np.arange(len(self)))

    def index(self) -> list[dict]:
        return [{"subject": int(s), "members": list(self.members), "center": c.tolist(), "offset": k.tolist(),
                 "target": t.tolist()}
                for s, c, k, t in zip(self.subjects, self.centers, self.offsets, self.targets)]

    def save(self, out: str | Path, spacing: Sequence[float] | None = None) -> None:
        """One volume (3D) or image-per-channel (2D) file per patch plus ``index.json``."""
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        spacing = tuple(spacing) if spacing else (1.0,) * self.nd
        for i in range(len(self)):
            p = self.batch([i])[0]
            for c in range(p.shape[-1]):
                data = p[..., c].astype(np.float32)
                if self.nd == 3:
                    save_volume(out / f"patch_{i:05d}_c{c}.cfvol", VoxelVolume(data, spacing))
                else:
                    save_image(out / f"patch_{i:05d}_c{c}.cfimg", Image2D(data, spacing))
        meta = {"eta": self.eta, "nd": self.nd, "channels": self.channels, "items": self.index()}
        (out / "index.json").write_text(json.dumps(meta, sort_keys=True))


def _as_channels(arr, nd: int) -> np.ndarray:
    """Source array as (spatial.., C)."""
    if isinstance(arr, (VoxelVolume, Image2D)):
        arr = arr.data
    arr = np.asarray(arr)
    if arr.ndim == nd:
        arr = arr[..., None]
    if arr.ndim != nd + 1:
        raise ValueError(f"expected a {nd}D source with optional channel axis, got shape {arr.shape}")
    return arr


def extract_multichannel(src: np.ndarray, center: Sequence[int], eta: int) -> np.ndarray:
    """Zero-padded window of a (spatial.., C) array."""
    return np.stack([_extract(src[..., c], center, eta) for c in range(src.shape[-1])], axis=-1)


def _generate(sources, truths, eta: int, jitter: JitterSpec, nd: int, members) -> PatchDataset:
    if len(sources) != len(truths):
        raise ValueError("need one truth array per source")
    if eta < 1:
        raise ValueError("eta must be >= 1")
    offsets = jitter.offsets(nd)
    srcs, targets, centers, offs, subj = [], [], [], [], []
    for i, (src, truth) in enumerate(zip(sources, truths)):
        src = _as_channels(src, nd)
        srcs.append(src)
        truth = np.asarray(truth, dtype=np.float64).reshape(-1, nd)
        shape = np.array(src.shape[:nd])
        if np.any(truth < 0) or np.any(truth > shape - 1):
            raise ValueError(f"subject {i}: truth position outside the source grid")
        anchor = round_voxel(truth.mean(axis=0))
        c = anchor + offsets
        if np.any(c < 0) or np.any(c > shape - 1):
            raise ValueError(f"subject {i}: patch centre outside the source grid")
        corner = c - eta // 2
        targets.append((truth[None] - corner[:, None]).reshape(len(c), -1))
        centers.append(c)
        offs.append(offsets)
        subj.append(np.full(len(c), i))
    return PatchDataset(int(eta), nd, srcs, np.concatenate(targets), np.concatenate(centers),
                        np.concatenate(offs), np.concatenate(subj), tuple(members))


def generate_patch_dataset_3d(volumes: Sequence, truths_vox: Sequence[np.ndarray], eta: int,
                              jitter: JitterSpec, members: Sequence[int] = ()) -> PatchDataset:
    """Patches centred at the rounded member centroid plus every lattice offset.

    ``truths_vox[i]`` holds the member positions of subject ``i`` in voxel
    units, shape (m, 3).
    """
    return _generate(volumes, truths_vox, eta, jitter, 3, members)


def generate_patch_dataset_2d(images: Sequence, truths_px: Sequence[np.ndarray], eta: int,
                              jitter: JitterSpec, members: Sequence[int] = ()) -> PatchDataset:
    """2D analogue of :func:`generate_patch_dataset_3d`; images may carry a channel axis."""
    return _generate(images, truths_px, eta, jitter, 2, members)


# --- regressor --------------------------------------------------------------------

PATCHIFY = "patchify"
VGG = "vgg"


@dataclass
class DetectorConfig:
    eta: int = 40
    arch: str = PATCHIFY
    epochs: int = 20000
    lr: float = 1e-4
    seed: int = 0
    passes: int = 2          # recentering passes at inference
    stride: int = 1          # lattice step
    batch_size: int = 128    # lattice samples drawn per epoch; 0 = full lattice every epoch


def build_regressor(nd: int, eta: int, channels: int, out_dim: int, arch: str = PATCHIFY, seed: int = 0) -> Sequential:
    """Small CNN. ``patchify`` uses non-overlapping strided convolutions (fast);
    ``vgg`` stacks 3x3 convolutions with max-pooling."""
    if arch == PATCHIFY:
        if eta % 8:
            raise ValueError("patchify architecture needs eta divisible by 8")
        layers = [Conv(nd, 8, 4, 4), ReLU(), Conv(nd, 16, 2, 2), ReLU()]
    elif arch == VGG:
        layers = []
        for ch in (8, 16, 32):
            layers += [Conv(nd, ch, 3, 1), ReLU(), MaxPool(2)]
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    layers += [Flatten(), Dense(64), ReLU(), Dense(out_dim)]
    return Sequential((eta,) * nd + (channels,), layers, seed=seed)


@dataclass
class TrainTrace:
    loss: list[float] = field(default_factory=list)

    @property
    def initial(self) -> float:
        return self.loss[0]

    @property
    def final(self) -> float:
        return self.loss[-1]


class DetectorModel:
    """CNN regressor returning patch-local positions in voxel units."""

    def __init__(self, net: Sequential, nd: int, eta: int, members: Sequence[int], passes: int = 2):
        self.net = net
        self.nd = int(nd)
        self.eta = int(eta)
        self.members = tuple(int(m) for m in members)
        self.passes = int(passes)

    @property
    def target_scale(self) -> float:
        return self.eta / 4.0

    def encode_targets(self, t):
        return (np.asarray(t, dtype=np.float64) - self.eta / 2.0) / self.target_scale

    def decode_outputs(self, y):
        return np.asarray(y) * self.target_scale + self.eta / 2.0

    def predict_local(self, patches: np.ndarray) -> np.ndarray:
        return self.decode_outputs(self.net.predict(np.asarray(patches, dtype=np.float64)))

    def locate(self, source, start: np.ndarray) -> np.ndarray:
        """Iteratively re-centred detection; returns (m, nd) positions."""
        src = _as_channels(source, self.nd)
        anchor = np.asarray(start, dtype=np.float64).reshape(self.nd)
        pos = None
        for _ in range(max(1, self.passes)):
            c = round_voxel(anchor)
            patch = extract_multichannel(src, c, self.eta)
            local = self.predict_local(patch[None])[0].reshape(-1, self.nd)
            pos = local + (c - self.eta // 2)
            anchor = pos.mean(axis=0)
        return pos

    def to_dict(self) -> dict:
        return {"nd": self.nd, "eta": self.eta, "members": list(self.members), "passes": self.passes,
                "net": self.net.to_bytes().hex()}

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorModel":
        return cls(Sequential.from_bytes(bytes.fromhex(d["net"])), d["nd"], d["eta"], d["members"], d["passes"])


def train_detector(dataset: PatchDataset, cfg: DetectorConfig, log_every: int = 0,
                   stage: str = "detector") -> tuple[DetectorModel, TrainTrace]:
    """Adam on the per-sample summed squared error (voxel^2).

    With ``batch_size`` below the lattice size each epoch draws a fresh
    uniform sample of lattice entries (seeded); otherwise every epoch uses the
    whole lattice.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    net = build_regressor(dataset.nd, dataset.eta, dataset.channels, dataset.targets.shape[1], cfg.arch, cfg.seed)
    model = DetectorModel(net, dataset.nd, dataset.eta, dataset.members, cfg.passes)
    y_all = model.encode_targets(dataset.targets)
    s2 = model.target_scale ** 2
    full = cfg.batch_size <= 0 or cfg.batch_size >= n
    if full:
        x_full = dataset.patches
        x_full.flags.writeable = False
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 31]))
    state = AdamState(lr=cfg.lr)
    trace = TrainTrace()
    for epoch in range(cfg.epochs):
        if full:
            x, y = x_full, y_all
        else:
            idx = rng.integers(0, n, cfg.batch_size)
            x, y = dataset.batch(idx), y_all[idx]
        out, cache = net.forward(x)
        r = out - y
        loss = float(np.sum(r ** 2)) * s2 / len(y)
        if not np.isfinite(loss):
            raise DivergenceError(f"{stage}: non-finite loss at epoch {epoch}")
        trace.loss.append(loss)
        grads, _ = net.backward(cache, 2.0 * r / len(y), need_input_grad=False)
        adam_step(state, net.params, grads)
        net.bump()
        if log_every and epoch % log_every == 0:
            print(f"{stage} epoch {epoch} loss {loss:.4f}")
    return model, trace


def train_detector_3d(dataset: PatchDataset, cfg: DetectorConfig, **kw) -> tuple[DetectorModel, TrainTrace]:
    if dataset.nd != 3:
        raise ValueError("expected a 3D patch dataset")
    return train_detector(dataset, cfg, **kw)


def train_detector_2d(dataset: PatchDataset, cfg: DetectorConfig, **kw) -> tuple[DetectorModel, TrainTrace]:
    if dataset.nd != 2:
        raise ValueError("expected a 2D patch dataset")
    return train_detector(dataset, cfg, **kw)


# --- reference landmarks from shaded views --------------------------------------------

# Each reference landmark is seen in two orthogonal views.
REFERENCE_VIEWS: dict[int, tuple[str, str]] = {
    lm.ANS: ("lateral_L", "frontal"),
    lm.BREGMA: ("lateral_L", "superior"),
    lm.CFM: ("inferior", "lateral_L"),
    lm.OR_L: ("frontal", "lateral_L"),
    lm.PO_L: ("frontal", "lateral_L"),
    lm.NA: ("lateral_L", "frontal"),
    lm.OR_R: ("frontal", "lateral_R"),
    lm.PO_R: ("frontal", "lateral_R"),
    lm.MF_L: ("lateral_L", "frontal"),
    lm.MF_R: ("lateral_R", "frontal"),
}
LIGHT_TILT = 0.7
DISAGREEMENT_VOXELS = 10.0


def view_lights(view: str) -> tuple[np.ndarray, np.ndarray]:
    """Two light directions tilted from the camera direction along each image axis."""
    axis, sign = VIEWS[view]
    to_cam = np.zeros(3)
    to_cam[axis] = -sign
    u, w = view_image_axes(VIEWS[view])
    out = []
    for a in (u, w):
        v = to_cam.copy()
        v[a] += LIGHT_TILT
        out.append(v / np.linalg.norm(v))
    return out[0], out[1]


def render_views(binvol: BinaryVolume, views: Sequence[str] = tuple(VIEWS), smoothing: float = 1.0) -> dict[str, np.ndarray]:
    """Per view a (n_u, n_w, 2) stack of the two shaded images."""
    out = {}
    for v in views:
        imgs = [render_illuminated(binvol, VIEWS[v], light, smoothing).data for light in view_lights(v)]
        out[v] = np.stack(imgs, axis=-1)
    return out


def project(points_vox: np.ndarray, view: str) -> np.ndarray:
    u, w = view_image_axes(VIEWS[view])
    p = np.asarray(points_vox, dtype=np.float64)
    return p[..., [u, w]]


class Locator:
    """Anything with ``locate(image, start) -> (1, 2)`` can serve as a view model."""

    def locate(self, source, start):  # pragma: no cover - interface
        raise NotImplementedError


@dataclass
class ViewModel:
    model: object           # DetectorModel or any Locator
    start: np.ndarray       # starting pixel position (training mean)


@dataclass
class ReferenceDetection:
    positions_vox: np.ndarray          # (10, 3) in lm.REFERENCE order
    low_confidence: dict[int, bool]
    disagreement: dict[int, float]


def combine_views(per_view: Mapping[str, np.ndarray], views: tuple[str, str]) -> tuple[np.ndarray, float]:
    """3D point from two 2D estimates; shared axes are averaged."""
    acc = np.zeros(3)
    cnt = np.zeros(3)
    shared = []
    vals: dict[int, list[float]] = {}
    for v in views:
        u, w = view_image_axes(VIEWS[v])
        for ax, val in zip((u, w), per_view[v]):
            vals.setdefault(ax, []).append(float(val))
    for ax, vs in vals.items():
        acc[ax] = sum(vs)
        cnt[ax] = len(vs)
        if len(vs) > 1:
            shared.append(max(vs) - min(vs))
    if np.any(cnt == 0):
        raise ValueError(f"views {views} do not cover all three axes")
    return acc / cnt, max(shared, default=0.0)


def detect_reference_landmarks(binvol: BinaryVolume, models: Mapping[tuple[int, str], ViewModel],
                               renders: Mapping[str, np.ndarray] | None = None,
                               view_table: Mapping[int, tuple[str, str]] = REFERENCE_VIEWS) -> ReferenceDetection:
    """Detect the 10 reference landmarks by intersecting two orthogonal views each."""
    needed = {v for pair in view_table.values() for v in pair}
    renders = dict(renders) if renders is not None else render_views(binvol, sorted(needed))
    pos = np.zeros((len(lm.REFERENCE), 3))
    flags, dis = {}, {}
    for r, j in enumerate(lm.REFERENCE):
        per_view = {}
        for v in view_table[j]:
            vm = models.get((j, v))
            if vm is None:
                raise KeyError(f"missing view model for landmark {j} in view {v}")
            per_view[v] = np.asarray(vm.model.locate(renders[v], vm.start)).reshape(-1)[:2]
        pos[r], d = combine_views(per_view, view_table[j])
        dis[j] = d
        flags[j] = bool(d > DISAGREEMENT_VOXELS)
    return ReferenceDetection(pos, flags, dis)


def train_reference_detectors(volumes: Sequence[BinaryVolume], truths_vox: Sequence[np.ndarray], cfg: DetectorConfig,
                              view_table: Mapping[int, tuple[str, str]] = REFERENCE_VIEWS,
                              margin_px: int = 2, log: Callable[[str], None] | None = None,
                              ) -> tuple[dict[tuple[int, str], ViewModel], dict[tuple[int, str], TrainTrace]]:
    """One 2D regressor per (landmark, view). ``truths_vox[i]`` is (10, 3) in reference order."""
    renders = [render_views(v, sorted({x for p in view_table.values() for x in p})) for v in volumes]
    models, traces = {}, {}
    for r, j in enumerate(lm.REFERENCE):
        for v in view_table[j]:
            pts = np.array([project(t[r], v) for t in truths_vox])
            start = pts.mean(axis=0)
            spread = float(np.max(np.abs(pts - start))) if len(pts) > 1 else 0.0
            jitter = JitterSpec.covering(int(math.ceil(spread)) + margin_px, cfg.stride)
            ds = generate_patch_dataset_2d([rd[v] for rd in renders], [p[None] for p in pts], cfg.eta, jitter, (j,))
            model, trace = train_detector_2d(ds, cfg, stage=f"reference {lm.name_of(j)}/{v}")
            models[(j, v)] = ViewModel(model, start)
            traces[(j, v)] = trace
            if log:
                log(f"reference {lm.name_of(j)}/{v}: n={len(ds)} loss {trace.initial:.3g} -> {trace.final:.3g}")
    return models, traces


# --- mandibular groups ---------------------------------------------------------------

@dataclass
class GroupDetection:
    positions_vox: dict[int, np.ndarray]
    fallback: dict[int, bool]


def detect_mandibular(binvol_md: VoxelVolume, coarse_vox: Mapping[int, np.ndarray],
                      models: Mapping[int, DetectorModel], groups: Sequence[DetectorGroup] = DEFAULT_GROUPS,
                      ) -> GroupDetection:
    """Refine each group from a patch at the centroid of its coarse member positions.

    Anchors outside the volume keep the coarse positions and are flagged.
    Outputs are clipped to the volume box grown by eta/2 on every side.
    """
    shape = np.array(binvol_md.dims)
    out: dict[int, np.ndarray] = {}
    fb: dict[int, bool] = {}
    for g in groups:
        model = models.get(g.gid)
        if model is None:
            raise KeyError(f"missing model for group {g.name}")
        coarse = np.array([coarse_vox[m] for m in g.members], dtype=np.float64)
        anchor = coarse.mean(axis=0)
        if not np.all(np.isfinite(anchor)) or np.any(anchor < 0) or np.any(anchor > shape - 1):
            for m, c in zip(g.members, coarse):
                out[m] = c
            fb[g.gid] = True
            continue
        pos = model.locate(binvol_md.data, anchor)
        half = model.eta / 2.0
        pos = np.clip(pos, -half, shape - 1 + half)
        for m, p in zip(g.members, pos):
            out[m] = p
        fb[g.gid] = False
    return GroupDetection(out, fb)


def train_group_detectors(volumes_md: Sequence[VoxelVolume], truths_vox: Sequence[Mapping[int, np.ndarray]],
                          gammas: Mapping[int, int], cfg: DetectorConfig,
                          groups: Sequence[DetectorGroup] = DEFAULT_GROUPS,
                          log: Callable[[str], None] | None = None):
    models, traces = {}, {}
    for g in groups:
        jitter = JitterSpec.covering(int(gammas[g.gid]), cfg.stride)
        truths = [np.array([t[m] for m in g.members]) for t in truths_vox]
        ds = generate_patch_dataset_3d([v.data for v in volumes_md], truths, cfg.eta, jitter, g.members)
        model, trace = train_detector_3d(ds, cfg, stage=f"group {g.name}")
        models[g.gid] = model
        traces[g.gid] = trace
        if log:
            log(f"group {g.name}: gamma={jitter.gamma} stride={jitter.stride} n={len(ds)} "
                f"loss {trace.initial:.3g} -> {trace.final:.3g}")
    return models, traces


# --- midsagittal trio ------------------------------------------------------------------

def midsagittal_image(binvol: BinaryVolume, frame: ReferenceFrame, half_width_mm: float = 7.5) -> np.ndarray:
    """Slab-integrated image over volume axes (v2, v3), scaled to [0, 1] by slab depth."""
    a, b = slab_bounds(float(frame.origin[0]), half_width_mm, binvol.spacing_mm[0], binvol.dims[0])
    img = integrate_midsagittal(binvol, a, b).data
    return img / float(b - a + 1)


def on_midsagittal_plane(frame: ReferenceFrame, yz_mm: np.ndarray) -> np.ndarray:
    """Complete (y, z) volume-mm points with the x that puts them on the plane v1 = 0."""
    yz = np.atleast_2d(np.asarray(yz_mm, dtype=np.float64))
    n = frame.axes[0]
    if abs(n[0]) < 1e-6:
        raise ValueError("midsagittal plane is parallel to the first volume axis")
    o = frame.origin
    x = o[0] - (n[1] * (yz[:, 0] - o[1]) + n[2] * (yz[:, 1] - o[2])) / n[0]
    return np.column_stack([x, yz])


def detect_trio(binvol: BinaryVolume, frame: ReferenceFrame, coarse_vox: Mapping[int, np.ndarray],
                models: Mapping[int, DetectorModel], half_width_mm: float = 7.5) -> dict[int, np.ndarray]:
    """Trio positions (volume mm) from the midsagittal image, placed on the plane."""
    img = midsagittal_image(binvol, frame, half_width_mm)
    sp = np.asarray(binvol.spacing_mm)
    out = {}
    for j in lm.MIDSAGITTAL_TRIO:
        start = np.asarray(coarse_vox[j], dtype=np.float64)[1:]
        px = models[j].locate(img, start)[0]
        out[j] = on_midsagittal_plane(frame, px * sp[1:])[0]
    return out


def train_trio_detectors(volumes: Sequence[BinaryVolume], frames: Sequence[ReferenceFrame],
                         truths_vox: Sequence[Mapping[int, np.ndarray]], gammas: Mapping[int, int],
                         cfg: DetectorConfig, half_width_mm: float = 7.5,
                         log: Callable[[str], None] | None = None):
    images = [midsagittal_image(v, f, half_width_mm) for v, f in zip(volumes, frames)]
    models, traces = {}, {}
    for j in lm.MIDSAGITTAL_TRIO:
        jitter = JitterSpec.covering(int(gammas[j]), cfg.stride)
        truths = [np.asarray(t[j])[1:][None] for t in truths_vox]
        ds = generate_patch_dataset_2d(images, truths, cfg.eta, jitter, (j,))
        model, trace = train_detector_2d(ds, cfg, stage=f"midsagittal {lm.name_of(j)}")
        models[j] = model
        traces[j] = trace
        if log:
            log(f"midsagittal {lm.name_of(j)}: gamma={jitter.gamma} n={len(ds)} "
                f"loss {trace.initial:.3g} -> {trace.final:.3g}")
    return models, traces


# --- cranial refinement ----------------------------------------------------------------

def refine_cranial(vae_cr, phi_cr, ref_cr: np.ndarray, trio: np.ndarray) -> np.ndarray:
    """All 46 cranial positions (138 values) from the cranial references plus the trio."""
    ref_cr = np.asarray(ref_cr, dtype=np.float64).reshape(-1)
    trio = np.asarray(trio, dtype=np.float64).reshape(-1)
    if ref_cr.size != 3 * len(lm.REFERENCE_CRANIAL) or trio.size != 3 * len(lm.MIDSAGITTAL_TRIO):
        raise ValueError(f"expected 24 + 9 values, got {ref_cr.size} + {trio.size}")
    return vae_cr.decode(phi_cr(np.concatenate([ref_cr, trio])))


def config_dict(cfg: DetectorConfig) -> dict:
    return asdict(cfg)
