"""Synthetic skull population: a linear factor model over the 90 landmarks and
ball-and-stick voxel phantoms built around each sampled configuration.

Frame convention (canonical pose): v1 points to the subject's left, v2 is
anterior, v3 is superior, origin at CFM. Phantom volumes are axis-aligned
with the frame and shifted by a fixed offset so the whole skull fits.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import landmarks as lm
from .landmarks import LandmarkSet
from .volume_ops import VoxelVolume

# Left-side and midline template coordinates (mm, frame axes). Right-side
# points are mirrored in v1; midpoint landmarks are derived, not listed.
_BASE = {
    1: (0, 92, -6),       # ANS
    2: (0, 38, 128),      # Bregma
    3: (0, 0, 0),         # CFM
    4: (33, 86, 22),      # Or (L)
    5: (60, 14, 22),      # Po (L)
    6: (0, 100, 40),      # Na
    10: (25, 62, -31),    # #26 tip (left upper molar)
    11: (0, 84, -15),     # ANS'
    12: (0, 78, -36),     # AO
    13: (0, 40, 90),      # FC
    14: (9, 18, 18),      # Clp (L)
    15: (32, 70, 24),     # EC (L)
    16: (14, 96, 30),     # FM (L)
    17: (40, 76, 0),      # Hyp (L)
    18: (9, 102, 50),     # M (L)
    19: (7, 80, -22),     # NP (L)
    20: (14, 44, -16),    # Pti (L)
    21: (14, 46, -4),     # Pts (L)
    22: (7, 90, -18),     # U1 apex (L)
    23: (7, 94, -36),     # U1 tip (L)
    24: (0, 95, -26),     # MxDML
    25: (0, -2, -20),     # Od
    26: (0, 48, -12),     # PNS
    37: (0, 14, 132),     # SC
    47: (24, 74, -60),    # MF (L)
    49: (23, 58, -42),    # #36 tip (left lower molar)
    51: (50, 20, -5),     # CON (L)
    52: (45, 36, -16),    # COR (L)
    53: (50, 11, -16),    # Cp (L)
    54: (41, 20, -14),    # Ct-in (L)
    56: (59, 20, -14),    # Ct-out (L)
    57: (43, 30, -29),    # F (L)
    58: (45, 24, -40),    # Go-in (L)
    60: (47, 12, -30),    # Go-post (L)
    61: (7, 82, -58),     # L1 apex (L)
    62: (7, 90, -46),     # L1 tip (L)
    63: (57, 26, -21),    # LCP (L)
    64: (43, 26, -21),    # MCP (L)
    65: (41, 36, -42),    # a-Go notch (L)
    67: (0, 80, -72),     # Me (anat)
    68: (0, 91, -54),     # MnDML
    69: (0, 88, -64),     # Pog
}

# Derived landmarks: index -> (a, b), position is the midpoint of a and b.
# Order matters: 90 depends on 66 and 85.
MIDPOINTS = {
    38: (14, 27), 39: (15, 28), 40: (16, 29), 41: (18, 31), 42: (19, 32), 43: (4, 7),
    44: (5, 8), 45: (20, 33), 46: (23, 36), 55: (54, 56), 59: (60, 58), 66: (57, 47),
    74: (73, 75), 78: (79, 77), 85: (76, 48), 86: (53, 72), 87: (57, 76), 88: (62, 81),
    89: (47, 48), 90: (66, 85),
}

_MIRROR = {}
for _l, _r in lm.MIRROR_PAIRS:
    _MIRROR[_l] = _r
    _MIRROR[_r] = _l

FACTOR_NAMES = ("global_scale", "mandible_width", "ramus_height", "facial_depth", "cranial_height", "asymmetry")


def apply_midpoints(coords: np.ndarray) -> np.ndarray:
    """Overwrite derived landmarks with midpoints of their constituents (in place)."""
    for k, (a, b) in MIDPOINTS.items():
        coords[..., k - 1, :] = 0.5 * (coords[..., a - 1, :] + coords[..., b - 1, :])
    return coords


def template_coords() -> np.ndarray:
    out = np.full((lm.N_LANDMARKS, 3), np.nan)
    for idx, p in _BASE.items():
        out[idx - 1] = p
        if idx in _MIRROR:
            out[_MIRROR[idx] - 1] = (-p[0], p[1], p[2])
    apply_midpoints(out)
    if np.isnan(out).any():
        missing = [i + 1 for i in np.flatnonzero(np.isnan(out).any(axis=1))]
        raise AssertionError(f"template incomplete: {missing}")
    return out


def _side_sign(idx: int) -> float:
    name = lm.name_of(idx)
    if "(L)" in name or idx == 10 or idx == 49:
        return 1.0
    if "(R)" in name or idx == 9 or idx == 50:
        return -1.0
    return 0.0


def default_loadings(template: np.ndarray) -> np.ndarray:
    """(90, 3, K) loadings in mm per unit factor."""
    K = len(FACTOR_NAMES)
    load = np.zeros((lm.N_LANDMARKS, 3, K))
    mand = np.array(lm.MANDIBULAR) - 1
    load[:, :, 0] = 0.05 * template
    load[mand, 0, 1] = 0.06 * template[mand, 0]

    def put(indices, axis, k, value):
        for i in indices:
            for j in (i, _MIRROR.get(i)):
                if j is not None:
                    load[j - 1, axis, k] = value

    # Ramus height: condyle rises, gonion region drops; no reference moves.
    put((51, 52, 53, 54, 56, 63, 64), 2, 2, 1.5)
    put((57,), 2, 2, 0.5)
    put((58, 60, 65), 2, 2, -2.5)
    # Facial depth: posterior maxilla and pterygoid region move forward.
    put((26, 20, 21), 1, 3, 4.0)
    put((14, 10, 17), 1, 3, 2.5)
    put((12,), 1, 3, 2.0)
    # Cranial height: vault summit, falx and clivus; Bregma stays put.
    put((25,), 2, 4, -4.0)
    put((37,), 2, 4, 4.0)
    put((13,), 2, 4, 3.0)
    put((14,), 2, 4, 2.0)
    # Asymmetry: the whole mandible shifts sideways.
    load[mand, 0, 5] = 2.0
    for k, (a, b) in MIDPOINTS.items():
        load[k - 1] = 0.5 * (load[a - 1] + load[b - 1])
    return load


def default_noise_sd() -> np.ndarray:
    sd = np.full(lm.N_LANDMARKS, 1.0)
    sd[np.array(lm.CRANIAL) - 1] = 0.5
    return sd


@dataclass(frozen=True)
class SkullFactorModel:
    template: np.ndarray
    loadings: np.ndarray
    noise_sd: np.ndarray
    seed: int = 0

    @property
    def n_factors(self) -> int:
        return self.loadings.shape[2]

    def digest(self) -> str:
        h = hashlib.sha256()
        for a in (self.template, self.loadings, self.noise_sd):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def default_model(seed: int = 0) -> SkullFactorModel:
    t = template_coords()
    return SkullFactorModel(t, default_loadings(t), default_noise_sd(), seed)


def sample_landmarks(model: SkullFactorModel, n: int, rng: np.random.Generator | int | None = None,
                     noise_scale: float = 1.0) -> tuple[list[LandmarkSet], np.ndarray]:
    """Draw ``n`` configurations (frame coords). Returns the sets and the (n, K) factors."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(model.seed if rng is None else rng)
    factors = rng.standard_normal((n, model.n_factors))
    noise = rng.standard_normal((n, lm.N_LANDMARKS, 3)) * model.noise_sd[None, :, None] * noise_scale
    coords = model.template[None] + np.einsum("ijk,nk->nij", model.loadings, factors) + noise
    apply_midpoints(coords)
    return [LandmarkSet(c) for c in coords], factors


def coords_from_factors(model: SkullFactorModel, factors: np.ndarray, noise: np.ndarray | None = None) -> np.ndarray:
    coords = model.template + np.einsum("ijk,k->ij", model.loadings, np.asarray(factors, float))
    if noise is not None:
        coords = coords + noise
    return apply_midpoints(coords)


# --- phantom geometry ---------------------------------------------------------

@dataclass(frozen=True)
class PhantomConfig:
    shape: tuple[int, int, int] = (128, 128, 128)
    spacing_mm: float = 2.0
    # Frame origin position inside the volume (mm).
    origin_mm: tuple[float, float, float] = (127.0, 108.0, 97.0)
    knob_radius: float = 3.2
    strut_radius: float = 2.0
    shell_thickness: float = 4.0
    plate_thickness: float = 4.0
    min_gap_voxels: int = 2


class PhantomGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Phantom:
    volume: VoxelVolume
    labels: np.ndarray          # 0 air, 1 cranium, 2 mandible
    landmarks: LandmarkSet      # volume mm
    frame_landmarks: LandmarkSet
    origin_mm: tuple[float, float, float]


class _Canvas:
    def __init__(self, shape, spacing):
        self.mask = np.zeros(shape, dtype=bool)
        self.sp = float(spacing)

    def _box(self, lo, hi):
        lo = np.maximum(np.floor(np.asarray(lo) / self.sp).astype(int), 0)
        hi = np.minimum(np.ceil(np.asarray(hi) / self.sp).astype(int) + 1, self.mask.shape)
        if np.any(hi <= lo):
            return None, None
        sl = tuple(slice(a, b) for a, b in zip(lo, hi))
        grids = np.meshgrid(*[np.arange(a, b) * self.sp for a, b in zip(lo, hi)], indexing="ij")
        return sl, np.stack(grids, axis=-1)

    def sphere(self, c, r):
        c = np.asarray(c, float)
        sl, pts = self._box(c - r, c + r)
        if sl is None:
            return
        self.mask[sl] |= ((pts - c) ** 2).sum(-1) <= r * r

    def capsule(self, a, b, r):
        a, b = np.asarray(a, float), np.asarray(b, float)
        sl, pts = self._box(np.minimum(a, b) - r, np.maximum(a, b) + r)
        if sl is None:
            return
        ab = b - a
        denom = float(ab @ ab)
        t = np.zeros(pts.shape[:-1]) if denom == 0 else np.clip(((pts - a) @ ab) / denom, 0, 1)
        d2 = ((pts - a - t[..., None] * ab) ** 2).sum(-1)
        self.mask[sl] |= d2 <= r * r


def _unit(v):
    v = np.asarray(v, float)
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.array([0.0, 0.0, -1.0])


# Outward knob normals (left side and midline; right side mirrored). A
# landmark sits on its knob's surface at ``centre + radius * normal``.
# Cranial landmarks absent here are shell-mounted and use the radial direction.
_NORMALS = {
    3: (0, 0, -1), 25: (0, 0, -1), 21: (0, 0, -1), 20: (0, 0, -1), 26: (0, -1, 0),
    17: (1, 0, 0), 15: (0, 1, 0), 1: (0, 1, 0), 11: (0, 0.5, -1), 19: (0, 0, -1), 22: (0, 1, 0),
    23: (0, 0, -1), 24: (0, 1, 0), 10: (0, 0, -1), 12: (0, 0, -1), 14: (0, 0, 1),
    38: (0, 0, 1), 39: (0, 1, 0), 40: (0, 1, 0), 41: (0, 1, 0), 42: (0, 0, -1),
    43: (0, 1, 0), 44: (0, 0, 1), 45: (0, 0, -1), 46: (0, 0, -1),
    51: (0, 0, 1), 54: (-1, 0, 0), 56: (1, 0, 0), 55: (0, 0, 1), 53: (0, -1, 0),
    63: (1, 0, -1), 64: (-1, 0, -1), 52: (0, 0.3, 1), 57: (-1, 0, 0), 60: (0, -1, 0),
    59: (0, -1, -1), 58: (0, 0, -1), 65: (0, 0, -1), 66: (1, 0, 0), 49: (0, 0, 1),
    47: (1, 0.3, 0), 61: (0, 1, 0), 62: (0, 0, 1), 67: (0, 0, -1), 69: (0, 1, 0),
    68: (0, 1, 0), 86: (0, -1, 0), 87: (0, 0, -1), 88: (0, 0, 1), 89: (0, 1, 0),
    90: (0, 0, -1),
}
# Cranial knobs strutted straight to the base plate (from below or above).
_PLATE_HUNG = (3, 21, 26, 17, 1, 10, 14, 15)
# Struts between knob centres (left side and midline; mirrored automatically).
_CRANIAL_EDGES = ((3, 25), (21, 20), (1, 11), (11, 19), (1, 22), (22, 23), (22, 24), (11, 12))
_MAND_EDGES = (
    (55, 51), (55, 54), (55, 56), (55, 53), (55, 63), (55, 64), (55, 57), (57, 52), (55, 60),
    (60, 59), (59, 58), (58, 65), (65, 66), (66, 47), (66, 49), (47, 61), (61, 62), (47, 67),
    (67, 69), (69, 68), (61, 68),
)
_CROSSBARS = {  # midpoint landmark -> its left and right constituents
    k: v for k, v in MIDPOINTS.items() if _side_sign(v[0]) * _side_sign(v[1]) < 0
}


def _mirror_vec(v):
    return (-v[0], v[1], v[2])


def _complete_normals():
    out = {k: _unit(v) for k, v in _NORMALS.items()}
    for k, v in list(_NORMALS.items()):
        if k in _MIRROR and _MIRROR[k] not in _NORMALS:
            out[_MIRROR[k]] = _unit(_mirror_vec(v))
    return out


def _complete_edges(edges):
    out = set()
    for a, b in edges:
        out.add((a, b))
        out.add((_MIRROR.get(a, a), _MIRROR.get(b, b)))
    return sorted(out)


_NORMALS_ALL = _complete_normals()
_PLATE_HUNG_ALL = tuple(sorted(set(_PLATE_HUNG) | {_MIRROR[i] for i in _PLATE_HUNG if i in _MIRROR}))
_CRANIAL_EDGES_ALL = _complete_edges(_CRANIAL_EDGES)
_MAND_EDGES_ALL = _complete_edges(_MAND_EDGES)


@dataclass
class _Shell:
    center: np.ndarray
    radii: np.ndarray
    plate_top: float


def _fit_shell(p: np.ndarray, cfg: PhantomConfig) -> _Shell:
    po_l, po_r = p[lm.PO_L - 1], p[lm.PO_R - 1]
    center = 0.5 * (po_l + po_r)
    a1 = 0.5 * abs(po_l[0] - po_r[0]) - 6.0
    a2 = p[lm.NA - 1][1] - center[1] - 8.0
    a3 = p[36][2] - center[2] - 6.0  # SC
    if min(a1, a2, a3) <= 2 * cfg.shell_thickness:
        raise PhantomGeometryError("cranial landmarks too close to fit a shell")
    return _Shell(center, np.array([a1, a2, a3]), float(center[2] - 12.0))


def build_phantom(frame_set: LandmarkSet, cfg: PhantomConfig = PhantomConfig()) -> Phantom:
    """Voxelize a landmark configuration given in canonical frame coordinates."""
    origin = np.asarray(cfg.origin_mm, float)
    p = frame_set.coords + origin
    sp = cfg.spacing_mm
    r_k, r_s = cfg.knob_radius, cfg.strut_radius
    shell = _fit_shell(frame_set.coords, cfg)
    shell = _Shell(shell.center + origin, shell.radii, shell.plate_top + origin[2])

    # Cranium: truncated ellipsoid shell with a base plate and carved orbits/nasal aperture.
    cran = _Canvas(cfg.shape, sp)
    grids = np.meshgrid(*[np.arange(n) * sp for n in cfg.shape], indexing="ij", sparse=True)
    q = [(g - c) / a for g, c, a in zip(grids, shell.center, shell.radii)]
    rho2 = q[0] ** 2 + q[1] ** 2 + q[2] ** 2
    inner = shell.radii - cfg.shell_thickness
    qi = [(g - c) / a for g, c, a in zip(grids, shell.center, inner)]
    rho2_in = qi[0] ** 2 + qi[1] ** 2 + qi[2] ** 2
    z = grids[2]
    plate_bot = shell.plate_top - cfg.plate_thickness
    cran.mask |= (rho2 <= 1.0) & (rho2_in > 1.0) & (z >= plate_bot)
    cran.mask |= (rho2 <= 1.0) & (z >= plate_bot) & (z <= shell.plate_top)
    carve = _Canvas(cfg.shape, sp)
    for ec in (15, 28):
        carve.sphere(p[ec - 1] + np.array([0, 6.0, 0]), 12.0)
    carve.sphere(0.5 * (p[lm.NA - 1] + p[lm.ANS - 1]) + np.array([0, 4.0, 0]), 7.0)
    cran.mask &= ~carve.mask

    def plate_point(x):
        # Straight above ``x`` on the plate, pulled inside the ellipse cross-section.
        target = np.array([x[0], x[1], shell.plate_top - 0.5 * cfg.plate_thickness])
        d = target - shell.center
        d[2] = 0
        scale = np.sqrt(((d / shell.radii) ** 2).sum()) / 0.85
        if scale > 1:
            target[:2] = shell.center[:2] + d[:2] / scale
        return target

    mand = _Canvas(cfg.shape, sp)
    centres: dict[int, np.ndarray] = {}
    mid_shell = 1.0 - 0.5 * cfg.shell_thickness / shell.radii.min()
    for idx in lm.ALL:
        x = p[idx - 1]
        n = _NORMALS_ALL.get(idx)
        if n is None:
            n = _unit(x - shell.center)
        centres[idx] = x - r_k * n
    for idx in lm.ALL:
        canvas = cran if idx <= 46 else mand
        c = centres[idx]
        canvas.sphere(c, r_k)
        if idx <= 46 and idx not in _NORMALS_ALL:
            # Shell-mounted: radial strut to the middle of the shell wall.
            d = c - shell.center
            rho = np.sqrt(((d / shell.radii) ** 2).sum())
            canvas.capsule(c, shell.center + d * (mid_shell / max(rho, 1e-9)), r_s)
        if idx in _PLATE_HUNG_ALL:
            canvas.capsule(c, plate_point(c), r_s)
    for a, b in _CRANIAL_EDGES_ALL:
        cran.capsule(centres[a], centres[b], r_s)
    for a, b in _MAND_EDGES_ALL:
        mand.capsule(centres[a], centres[b], r_s)
    for mid, (a, b) in sorted(_CROSSBARS.items()):
        canvas = cran if mid <= 46 else mand
        canvas.capsule(centres[a], centres[mid], r_s)
        canvas.capsule(centres[mid], centres[b], r_s)

    # Parts must stay separated.
    k = 2 * cfg.min_gap_voxels + 1
    near = ndimage.binary_dilation(mand.mask, structure=np.ones((k, k, k), bool))
    if (near & cran.mask).any():
        raise PhantomGeometryError(
            f"cranium and mandible closer than {cfg.min_gap_voxels} voxels at {sp} mm spacing")
    labels = np.zeros(cfg.shape, np.uint8)
    labels[cran.mask] = 1
    labels[mand.mask] = 2
    data = (labels > 0).astype(np.float32)
    vol = VoxelVolume(data, (sp, sp, sp))
    labels.flags.writeable = False
    return Phantom(vol, labels, LandmarkSet(p), frame_set, tuple(float(v) for v in origin))


# --- datasets ---------------------------------------------------------------------

SPLITS = {"paired": 1, "anonymized": 2, "test": 3}


def split_rng(seed: int, split: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), SPLITS[split]]))


@dataclass
class SynthDataset:
    paired: list[Phantom]
    paired_factors: np.ndarray
    anonymized: list[LandmarkSet]
    anonymized_factors: np.ndarray
    test: list[Phantom]
    test_factors: np.ndarray


def _phantoms(model, n, split, seed, cfg):
    sets, factors = sample_landmarks(model, n, split_rng(seed, split))
    return [build_phantom(s, cfg) for s in sets], factors


def make_paired_and_anonymized(model: SkullFactorModel, n_paired: int = 15, n_anon: int = 229,
                               n_test: int = 9, seed: int = 0,
                               cfg: PhantomConfig = PhantomConfig()) -> SynthDataset:
    """Disjoint seeded draws: paired (phantom + landmarks), landmark-only, and held-out test."""
    if n_paired < 1 or n_anon < 1:
        raise ValueError("need at least one paired and one anonymized subject")
    paired, pf = _phantoms(model, n_paired, "paired", seed, cfg)
    anon, af = sample_landmarks(model, n_anon, split_rng(seed, "anonymized"))
    test, tf = _phantoms(model, n_test, "test", seed, cfg) if n_test > 0 else ([], np.zeros((0, model.n_factors)))
    return SynthDataset(paired, pf, anon, af, test, tf)


def write_dataset(ds: SynthDataset, out: str | Path, model: SkullFactorModel, seed: int,
                  cfg: PhantomConfig = PhantomConfig()) -> dict:
    """Write volumes, part labels, landmark CSVs and a manifest. Returns the manifest."""
    from .volume_ops import BinaryVolume, save_volume

    out = Path(out)
    files: list[str] = []
    for split in ("paired", "anonymized", "test"):
        (out / split).mkdir(parents=True, exist_ok=True)
    for split, items in (("paired", ds.paired), ("test", ds.test)):
        for i, ph in enumerate(items):
            stem = f"{split}/{split}_{i:03d}"
            save_volume(out / f"{stem}.cfvol", BinaryVolume(ph.volume.data.astype(np.uint8), ph.volume.spacing_mm))
            save_volume(out / f"{stem}_labels.cfvol", VoxelVolume(ph.labels, ph.volume.spacing_mm))
            lm.write_landmark_csv(out / f"{stem}.csv", ph.landmarks)
            files += [f"{stem}.cfvol", f"{stem}_labels.cfvol", f"{stem}.csv"]
    for i, s in enumerate(ds.anonymized):
        stem = f"anonymized/anonymized_{i:03d}"
        lm.write_landmark_csv(out / f"{stem}.csv", s)
        files.append(f"{stem}.csv")
    manifest = {
        "format": "ceph3d-dataset-1",
        "seed": int(seed),
        "model_digest": model.digest(),
        "counts": {"paired": len(ds.paired), "anonymized": len(ds.anonymized), "test": len(ds.test)},
        "phantom": {"shape": list(cfg.shape), "spacing_mm": cfg.spacing_mm, "origin_mm": list(cfg.origin_mm)},
        "coordinates": {"paired": "volume_mm", "test": "volume_mm", "anonymized": "frame_mm"},
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


MANIFEST_KEYS = {"format", "seed", "model_digest", "counts", "phantom", "coordinates", "files"}


def validate_manifest(manifest: dict) -> None:
    missing = MANIFEST_KEYS - set(manifest)
    if missing:
        raise ValueError(f"manifest missing keys: {sorted(missing)}")
    if manifest["format"] != "ceph3d-dataset-1":
        raise ValueError(f"unknown dataset format {manifest['format']!r}")
    for k in ("paired", "anonymized", "test"):
        if not isinstance(manifest["counts"].get(k), int) or manifest["counts"][k] < 0:
            raise ValueError(f"bad count for split {k!r}")


@dataclass
class LoadedSubject:
    volume: VoxelVolume
    labels: np.ndarray | None
    landmarks: LandmarkSet


def load_dataset(root: str | Path) -> tuple[dict, dict[str, list]]:
    """Read a dataset written by :func:`write_dataset`."""
    from .volume_ops import load_volume

    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    validate_manifest(manifest)
    out: dict[str, list] = {}
    for split in ("paired", "test"):
        items = []
        for i in range(manifest["counts"][split]):
            stem = root / split / f"{split}_{i:03d}"
            vol = load_volume(f"{stem}.cfvol")
            lab = load_volume(f"{stem}_labels.cfvol").data
            items.append(LoadedSubject(vol, lab, lm.read_landmark_csv(f"{stem}.csv")))
        out[split] = items
    out["anonymized"] = [lm.read_landmark_csv(root / "anonymized" / f"anonymized_{i:03d}.csv")
                         for i in range(manifest["counts"]["anonymized"])]
    return manifest, out
