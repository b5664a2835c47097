"""Landmark registry, reference frame, cranial-volume normalization and error metrics.

Coordinates are millimetres. Frame coordinates use the axis order
(v1, v2, v3) = (midsagittal normal pointing to the subject's left,
anterior depth, superior height).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_LANDMARKS = 90


@dataclass(frozen=True)
class LandmarkInfo:
    index: int
    name: str
    location: str  # "cranium" | "mandible"
    is_reference: bool
    description: str


_TABLE = [
    (1, "ANS", "Anterior nasal spine"),
    (2, "Bregma", "Bregma"),
    (3, "CFM", "Center of foramen magnum"),
    (4, "Or (L)", "Left orbitale"),
    (5, "Po (L)", "Left porion"),
    (6, "Na", "Nasion"),
    (7, "Or (R)", "Right orbitale"),
    (8, "Po (R)", "Right porion"),
    (9, "#16 tip", "Mesiobuccal cusp tip of maxillary right first molar"),
    (10, "#26 tip", "Mesiobuccal cusp tip of maxillary left first molar"),
    (11, "ANS'", "Constructed ANS point"),
    (12, "AO", "Anterior occlusal point"),
    (13, "FC", "Falx cerebri"),
    (14, "Clp (L)", "Left posterior clinoid process"),
    (15, "EC (L)", "Left eyeball center"),
    (16, "FM (L)", "Left frontomaxillary suture"),
    (17, "Hyp (L)", "Left hypomochlion"),
    (18, "M (L)", "Left junction of nasofrontal, maxillofrontal and maxillonasal sutures"),
    (19, "NP (L)", "Left nasopalatine foramen"),
    (20, "Pti (L)", "Left inferior pterygoid point"),
    (21, "Pts (L)", "Left superior pterygoid point"),
    (22, "U1 apex (L)", "Left upper incisal apex"),
    (23, "U1 tip (L)", "Left upper incisal tip"),
    (24, "MxDML", "Maxillary dental midline"),
    (25, "Od", "Odontoid process"),
    (26, "PNS", "Posterior nasal spine"),
    (27, "Clp (R)", "Right posterior clinoid process"),
    (28, "EC (R)", "Right eyeball center"),
    (29, "FM (R)", "Right frontomaxillary suture"),
    (30, "Hyp (R)", "Right hypomochlion"),
    (31, "M (R)", "Right junction of nasofrontal, maxillofrontal and maxillonasal sutures"),
    (32, "Np (R)", "Right nasopalatine foramen"),
    (33, "Pti (R)", "Right inferior pterygoid point"),
    (34, "Pts (R)", "Right superior pterygoid point"),
    (35, "U1 apex (R)", "Right upper incisal apex"),
    (36, "U1 tip (R)", "Right upper incisal tip"),
    (37, "SC", "Summit of cranium"),
    (38, "mid-Clp", "Midpoint between right and left posterior clinoid point"),
    (39, "mid-EC", "Midpoint between EC (L) and EC (R)"),
    (40, "mid-FM", "Midpoint between FM (L) and FM (R)"),
    (41, "mid-M", "Midpoint between M (L) and M (R)"),
    (42, "mid-Np", "Midpoint between Np (L) and Np (R)"),
    (43, "mid-Or", "Midpoint between Or (L) and Or (R)"),
    (44, "mid-Po", "Midpoint between Po (L) and Po (R)"),
    (45, "mid-Pti", "Midpoint between Pti (L) and Pti (R)"),
    (46, "mid-U1 tip", "Midpoint between U1 tip (L) and U1 tip (R)"),
    (47, "MF (L)", "Left mental foramen"),
    (48, "MF (R)", "Right mental foramen"),
    (49, "#36 tip", "Mesiobuccal cusp tip of mandibular left first molar"),
    (50, "#46 tip", "Mesiobuccal cusp tip of mandibular right first molar"),
    (51, "CON (L)", "Left condylar point"),
    (52, "COR (L)", "Left coronoid point"),
    (53, "Cp (L)", "Left posterior condylar point"),
    (54, "Ct-in (L)", "Left medial temporal condylar point"),
    (55, "Ct-mid (L)", "Midpoint between left Ct-in and Ct-out"),
    (56, "Ct-out (L)", "Left lateral temporal condylar point"),
    (57, "F (L)", "Left mandibular foramen"),
    (58, "Go-in (L)", "Left inferior gonion point"),
    (59, "Go-mid (L)", "Midpoint between left posterior and inferior gonion point"),
    (60, "Go-post (L)", "Left posterior gonion point"),
    (61, "L1 apex (L)", "Root apex of left mandibular central incisor"),
    (62, "L1 tip (L)", "Incisal tip midpoint of left mandibular central incisor"),
    (63, "LCP (L)", "Left lateral condylar point"),
    (64, "MCP (L)", "Left medial condylar point"),
    (65, "a-Go notch (L)", "Left antegonial notch"),
    (66, "mid-F MF (L)", "Midpoint between left mandibular foramen and mental foramen"),
    (67, "Me (anat)", "Anatomical menton"),
    (68, "MnDML", "Mandibular dental midline"),
    (69, "Pog", "Pogonion"),
    (70, "CON (R)", "Right condylar point"),
    (71, "COR (R)", "Right coronoid point"),
    (72, "Cp (R)", "Right posterior condylar point"),
    (73, "Ct-in (R)", "Right medial temporal condylar point"),
    (74, "Ct-mid (R)", "Midpoint between right Ct-in and Ct-out"),
    (75, "Ct-out (R)", "Right lateral temporal condylar point"),
    (76, "F (R)", "Right mandibular foramen"),
    (77, "Go-in (R)", "Right inferior gonion point"),
    (78, "Go-mid (R)", "Midpoint between right posterior and inferior gonion point"),
    (79, "Go-post (R)", "Right posterior gonion point"),
    (80, "L1 apex (R)", "Root apex of right mandibular central incisor"),
    (81, "L1 tip (R)", "Incisal tip midpoint of right mandibular central incisor"),
    (82, "LCP (R)", "Right lateral condylar point"),
    (83, "MCP (R)", "Right medial condylar point"),
    (84, "a-Go notch (R)", "Right antegonial notch"),
    (85, "mid-F MF (R)", "Midpoint between right mandibular foramen and mental foramen"),
    (86, "mid-Cp", "Midpoint between right and left posterior condylar point"),
    (87, "mid-F", "Midpoint between F (L) and F (R)"),
    (88, "mid-L1 tip", "Midpoint between L1 tip (L) and L1 tip (R)"),
    (89, "mid-MF", "Midpoint between MF (L) and MF (R)"),
    (90, "midpoint of mid-F MF (R/L)", "Midpoint between mid-F MF (R) and mid-F MF (L)"),
]

REFERENCE = (1, 2, 3, 4, 5, 6, 7, 8, 47, 48)
CRANIAL = tuple(range(1, 47))
MANDIBULAR = tuple(range(47, 91))
ALL = tuple(range(1, 91))
REFERENCE_CRANIAL = tuple(i for i in REFERENCE if i <= 46)
MIDSAGITTAL_TRIO = (24, 25, 26)
# Input of the cranial refinement map: cranial references, then the midsagittal trio.
REFERENCE_MID = REFERENCE_CRANIAL + MIDSAGITTAL_TRIO
CONDYLE_L = (52, 53, 54, 56, 63, 64)
CONDYLE_R = (71, 72, 73, 75, 82, 83)

# Named indices used by frame construction and cranial volume.
ANS, BREGMA, CFM, OR_L, PO_L, NA, OR_R, PO_R = 1, 2, 3, 4, 5, 6, 7, 8
MF_L, MF_R = 47, 48

# Left/right pairs (left index, right index).
MIRROR_PAIRS = (
    (4, 7), (5, 8), (10, 9), (14, 27), (15, 28), (16, 29), (17, 30), (18, 31),
    (19, 32), (20, 33), (21, 34), (22, 35), (23, 36), (47, 48), (49, 50),
) + tuple((i, i + 19) for i in range(51, 67))

MIDLINE = (1, 2, 3, 6, 11, 12, 13, 24, 25, 26) + tuple(range(37, 47)) + (67, 68, 69) + tuple(range(86, 91))


def _build_registry() -> tuple[LandmarkInfo, ...]:
    ref = set(REFERENCE)
    return tuple(
        LandmarkInfo(i, name, "cranium" if i <= 46 else "mandible", i in ref, desc)
        for i, name, desc in _TABLE
    )


REGISTRY: tuple[LandmarkInfo, ...] = _build_registry()
NAMES = tuple(info.name for info in REGISTRY)


def name_of(index: int) -> str:
    return REGISTRY[index - 1].name


def index_of(name: str) -> int:
    try:
        return NAMES.index(name) + 1
    except ValueError:
        raise KeyError(f"unknown landmark name {name!r}") from None


def check_mask(mask: Iterable[int]) -> tuple[int, ...]:
    """Validate a mask of 1-based indices and return it sorted and de-duplicated."""
    out = sorted(set(int(i) for i in mask))
    for i in out:
        if not 1 <= i <= N_LANDMARKS:
            raise ValueError(f"unknown landmark index {i}")
    return tuple(out)


def _rows(mask: Sequence[int]) -> np.ndarray:
    return np.asarray(check_mask(mask), dtype=int) - 1


@dataclass(frozen=True)
class LandmarkSet:
    """90 x 3 landmark coordinates (mm) with a per-landmark validity flag."""

    coords: np.ndarray
    valid: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        if coords.shape != (N_LANDMARKS, 3):
            raise ValueError(f"expected coords of shape (90, 3), got {coords.shape}")
        valid = np.ones(N_LANDMARKS, bool) if self.valid is None else np.array(self.valid, dtype=bool)
        if valid.shape != (N_LANDMARKS,):
            raise ValueError("valid mask must have 90 entries")
        coords.flags.writeable = False
        valid.flags.writeable = False
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_flat(cls, vec: np.ndarray) -> "LandmarkSet":
        return cls(np.asarray(vec, dtype=np.float64).reshape(N_LANDMARKS, 3))

    def flatten(self) -> np.ndarray:
        return self.coords.reshape(-1).copy()

    def __getitem__(self, index: int) -> np.ndarray:
        return self.coords[index - 1]

    def with_coords(self, coords: np.ndarray) -> "LandmarkSet":
        return LandmarkSet(coords, self.valid)

    def scaled(self, factor: float) -> "LandmarkSet":
        return self.with_coords(self.coords * factor)

    def translated(self, offset) -> "LandmarkSet":
        return self.with_coords(self.coords + np.asarray(offset, dtype=np.float64))


def select(landmarks: LandmarkSet, mask: Sequence[int]) -> np.ndarray:
    """Concatenate the coordinates of ``mask`` in ascending index order."""
    return landmarks.coords[_rows(mask)].reshape(-1).copy()


def select_batch(coords: np.ndarray, mask: Sequence[int]) -> np.ndarray:
    """Vectorised :func:`select` over an (n, 90, 3) array, returns (n, 3|mask|)."""
    coords = np.asarray(coords)
    return coords[:, _rows(mask)].reshape(coords.shape[0], -1)


def scatter(landmarks: LandmarkSet, mask: Sequence[int], vec: np.ndarray) -> LandmarkSet:
    """Inverse of :func:`select`: write ``vec`` back into the masked rows."""
    rows = _rows(mask)
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size != 3 * len(rows):
        raise ValueError(f"vector of length {vec.size} does not match mask of {len(rows)} landmarks")
    coords = landmarks.coords.copy()
    coords[rows] = vec.reshape(-1, 3)
    return landmarks.with_coords(coords)


class DegenerateFrameError(ValueError):
    pass


@dataclass(frozen=True)
class ReferenceFrame:
    """Rigid frame; rows of ``axes`` are (v1, v2, v3) expressed in world coordinates."""

    origin: np.ndarray
    axes: np.ndarray

    def __post_init__(self):
        origin = np.array(self.origin, dtype=np.float64).reshape(3)
        axes = np.array(self.axes, dtype=np.float64).reshape(3, 3)
        if not np.allclose(axes @ axes.T, np.eye(3), atol=1e-9):
            raise ValueError("frame axes are not orthonormal")
        if np.linalg.det(axes) < 0:
            raise ValueError("frame axes are left-handed")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "axes", axes)

    @classmethod
    def identity(cls) -> "ReferenceFrame":
        return cls(np.zeros(3), np.eye(3))

    def to_frame(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.origin) @ self.axes.T

    def from_frame(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.axes + self.origin

    def set_to_frame(self, landmarks: LandmarkSet) -> LandmarkSet:
        return landmarks.with_coords(self.to_frame(landmarks.coords))

    def set_from_frame(self, landmarks: LandmarkSet) -> LandmarkSet:
        return landmarks.with_coords(self.from_frame(landmarks.coords))


def build_reference_frame(cfm, bregma, na, po_l, po_r, angle_tol: float = 1e-6) -> ReferenceFrame:
    """Frame with origin at CFM and v1 normal to the fitted midsagittal plane.

    The plane passes through CFM and through the midpoint of the porion pair,
    so Po(L) and Po(R) sit at equal and opposite distances from it. Among such
    planes we take the one minimising the squared distances of Bregma and Na.
    v1 points from Po(R) toward Po(L); v3 is the part of Bregma - CFM orthogonal
    to v1; v2 = v3 x v1.
    """
    cfm, bregma, na, po_l, po_r = (np.asarray(p, dtype=np.float64).reshape(3) for p in (cfm, bregma, na, po_l, po_r))
    b = bregma - cfm
    n_ = na - cfm
    nb, nn = np.linalg.norm(b), np.linalg.norm(n_)
    if nb == 0 or nn == 0:
        raise DegenerateFrameError("CFM coincides with Bregma or Na")
    sin_angle = np.linalg.norm(np.cross(b / nb, n_ / nn))
    if sin_angle < angle_tol:
        raise DegenerateFrameError("CFM, Bregma and Na are collinear")

    m = 0.5 * (po_l + po_r) - cfm
    scatter_mat = np.outer(b, b) + np.outer(n_, n_)
    if np.linalg.norm(m) > 1e-12:
        # Orthonormal basis of the complement of m.
        m_hat = m / np.linalg.norm(m)
        _, _, vt = np.linalg.svd(m_hat[None, :])
        basis = vt[1:].T  # 3 x 2
        w_vals, w_vecs = np.linalg.eigh(basis.T @ scatter_mat @ basis)
        normal = basis @ w_vecs[:, 0]
    else:
        w_vals, w_vecs = np.linalg.eigh(scatter_mat)
        normal = w_vecs[:, 0]
    normal /= np.linalg.norm(normal)
    side = po_l - po_r
    if np.dot(normal, side) < 0:
        normal = -normal
    elif np.dot(normal, side) == 0:
        raise DegenerateFrameError("porion pair does not fix the left/right orientation")

    v3 = b - np.dot(b, normal) * normal
    v3_norm = np.linalg.norm(v3)
    if v3_norm < angle_tol * nb:
        raise DegenerateFrameError("Bregma lies on the midsagittal normal")
    v3 /= v3_norm
    v2 = np.cross(v3, normal)
    return ReferenceFrame(cfm, np.stack([normal, v2, v3]))


def frame_from_landmarks(landmarks: LandmarkSet) -> ReferenceFrame:
    return build_reference_frame(landmarks[CFM], landmarks[BREGMA], landmarks[NA], landmarks[PO_L], landmarks[PO_R])


class DegenerateVolumeError(ValueError):
    pass


def compute_cranial_volume(landmarks: LandmarkSet) -> float:
    """Product of the porion width, porion-to-nasion depth and CFM-to-Bregma height (mm^3)."""
    length = abs(landmarks[PO_L][0] - landmarks[PO_R][0])
    depth = abs(landmarks[PO_L][1] - landmarks[NA][1])
    height = abs(landmarks[BREGMA][2] - landmarks[CFM][2])
    for label, extent in (("length", length), ("depth", depth), ("height", height)):
        if not extent > 0:
            raise DegenerateVolumeError(f"cranial {label} is zero")
    return float(length * depth * height)


@dataclass(frozen=True)
class NormalizationParams:
    cranial_volume: float
    reference_volume: float

    def __post_init__(self):
        if not (self.cranial_volume > 0 and self.reference_volume > 0):
            raise ValueError("volumes must be positive")

    @property
    def scale(self) -> float:
        return float((self.reference_volume / self.cranial_volume) ** (1.0 / 3.0))


def normalization_for(landmarks: LandmarkSet, reference_volume: float) -> NormalizationParams:
    return NormalizationParams(compute_cranial_volume(landmarks), reference_volume)


def normalize(landmarks: LandmarkSet, params: NormalizationParams) -> LandmarkSet:
    scale = params.scale
    if not np.isfinite(scale):
        raise ValueError("normalization scale is not finite")
    return landmarks.scaled(scale)


def denormalize(landmarks: LandmarkSet, params: NormalizationParams) -> LandmarkSet:
    return landmarks.scaled(1.0 / params.scale)


@dataclass(frozen=True)
class ErrorSummary:
    mask: tuple[int, ...]
    per_landmark: np.ndarray
    mean: float
    sd: float

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.mask, self.per_landmark.tolist()))


def point_to_point_error(pred: LandmarkSet, truth: LandmarkSet, mask: Sequence[int] = ALL) -> ErrorSummary:
    """Euclidean distance per masked landmark with mean and population SD."""
    rows = _rows(mask)
    if len(rows) == 0:
        raise ValueError("empty mask")
    if not (pred.valid[rows].all() and truth.valid[rows].all()):
        raise ValueError("mask selects landmarks that are not valid in both sets")
    d = np.linalg.norm(pred.coords[rows] - truth.coords[rows], axis=1)
    return ErrorSummary(tuple(int(r) + 1 for r in rows), d, float(d.mean()), float(d.std()))


def format_error_row(name: str, mean: float, sd: float) -> str:
    return f"{name} {mean:.3g} ± {sd:.3g}"


CSV_HEADER = ("index", "name", "x_mm", "y_mm", "z_mm", "valid")


def write_landmark_csv(path: str | Path, landmarks: LandmarkSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for i in range(N_LANDMARKS):
            x, y, z = landmarks.coords[i]
            w.writerow([i + 1, NAMES[i], repr(float(x)), repr(float(y)), repr(float(z)), int(landmarks.valid[i])])


def read_landmark_csv(path: str | Path) -> LandmarkSet:
    coords = np.full((N_LANDMARKS, 3), np.nan)
    valid = np.zeros(N_LANDMARKS, bool)
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            i = int(row["index"])
            if not 1 <= i <= N_LANDMARKS or i in seen:
                raise ValueError(f"{path}: bad or duplicate landmark index {i}")
            seen.add(i)
            coords[i - 1] = [float(row["x_mm"]), float(row["y_mm"]), float(row["z_mm"])]
            valid[i - 1] = bool(int(row["valid"]))
    if len(seen) != N_LANDMARKS:
        raise ValueError(f"{path}: expected 90 landmarks, found {len(seen)}")
    return LandmarkSet(coords, valid)
