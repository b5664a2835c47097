"""Voxel-domain primitives: thresholding, slab integration, shaded rendering,
patch extraction, mandible/cranium splitting and the CFVOL1/CFIMG1 file format.

Volumes are indexed ``data[v1, v2, v3]`` with v1 the midsagittal-normal axis.
Voxel ``i`` along an axis has its centre at ``i * spacing`` mm.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .landmarks import ReferenceFrame


@dataclass(frozen=True)
class VoxelVolume:
    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume must be 3D with positive dims, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing_mm}")
        if data.flags.writeable:
            data = data.copy()
            data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    def mm_to_voxel(self, points_mm: np.ndarray) -> np.ndarray:
        return np.asarray(points_mm, dtype=np.float64) / np.asarray(self.spacing_mm)

    def voxel_to_mm(self, points_vox: np.ndarray) -> np.ndarray:
        return np.asarray(points_vox, dtype=np.float64) * np.asarray(self.spacing_mm)


@dataclass(frozen=True)
class BinaryVolume(VoxelVolume):
    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.uint8:
            if not np.isin(data, (0, 1)).all():
                raise ValueError("binary volume values must be 0 or 1")
            data = data.astype(np.uint8)
        elif data.max(initial=0) > 1:
            raise ValueError("binary volume values must be 0 or 1")
        object.__setattr__(self, "data", data)
        super().__post_init__()


@dataclass(frozen=True)
class Image2D:
    data: np.ndarray
    spacing_mm: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or min(data.shape) < 1:
            raise ValueError(f"image must be 2D with positive dims, got shape {data.shape}")
        if data.flags.writeable:
            data = data.copy()
            data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]


@dataclass(frozen=True)
class Patch:
    """Cube (3D) or square (2D) window of edge ``eta`` centred at ``center``."""

    eta: int
    center: tuple[int, ...]
    data: np.ndarray

    @property
    def corner(self) -> np.ndarray:
        return np.asarray(self.center) - self.eta // 2


Patch3D = Patch
Patch2D = Patch


def binarize(vol: VoxelVolume, rho: float) -> BinaryVolume:
    return BinaryVolume((vol.data >= rho).astype(np.uint8), vol.spacing_mm)


def integrate_midsagittal(binvol: BinaryVolume, a: int, b: int) -> Image2D:
    """Sum slabs ``v1 = a .. b`` (1-based, inclusive) into a (n2, n3) image."""
    n1 = binvol.dims[0]
    if not (1 <= a <= b <= n1):
        raise ValueError(f"need 1 <= a <= b <= {n1}, got a={a}, b={b}")
    img = binvol.data[a - 1:b].sum(axis=0, dtype=np.int64).astype(np.float64)
    return Image2D(img, binvol.spacing_mm[1:])


def slab_bounds(center_v1_mm: float, half_width_mm: float, spacing_v1: float, n1: int) -> tuple[int, int]:
    """1-based inclusive slab indices covering ``center +/- half_width`` along v1, clipped to the grid."""
    lo = int(np.ceil((center_v1_mm - half_width_mm) / spacing_v1 - 1e-9))
    hi = int(np.floor((center_v1_mm + half_width_mm) / spacing_v1 + 1e-9))
    lo, hi = max(lo, 0), min(hi, n1 - 1)
    if lo > hi:
        raise ValueError("midsagittal slab lies outside the volume")
    return lo + 1, hi + 1


# --- illuminated rendering -------------------------------------------------

VIEWS: dict[str, tuple[int, int]] = {
    # name: (ray axis, ray direction); the camera sits on the opposite side.
    "lateral_L": (0, -1),
    "lateral_R": (0, +1),
    "frontal": (1, -1),
    "superior": (2, -1),
    "inferior": (2, +1),
}


def view_image_axes(view_axis: tuple[int, int]) -> tuple[int, int]:
    axis = view_axis[0]
    return tuple(a for a in range(3) if a != axis)  # type: ignore[return-value]


def depth_map(binvol: BinaryVolume, view_axis: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """First-hit coordinate along the ray axis (voxel units) and the hit mask."""
    axis, sign = view_axis
    data = np.moveaxis(binvol.data, axis, -1)
    n = data.shape[-1]
    hit = data.any(axis=-1)
    if sign > 0:
        first = np.argmax(data, axis=-1)
    else:
        first = n - 1 - np.argmax(data[..., ::-1], axis=-1)
    return first.astype(np.float64), hit


def render_illuminated(
    binvol: BinaryVolume,
    view_axis: tuple[int, int],
    light_dir: Sequence[float],
    smoothing: float = 1.0,
) -> Image2D:
    """Lambertian shading of the first surface seen along ``view_axis``.

    ``view_axis = (axis, sign)`` gives the ray direction ``sign * e_axis``.
    ``light_dir`` points from the surface toward the light, in volume axes.
    The depth map is smoothed (masked Gaussian, ``smoothing`` pixels) before
    the central-difference normal estimate to suppress voxel stair-steps.
    """
    light = np.asarray(light_dir, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(light)
    if norm == 0:
        raise ValueError("light direction must be non-zero")
    light = light / norm
    axis, sign = view_axis
    if axis not in (0, 1, 2) or sign not in (-1, 1):
        raise ValueError(f"bad view axis {view_axis}")
    first, hit = depth_map(binvol, view_axis)
    # Height of the surface toward the camera, in mm.
    height = -sign * first * binvol.spacing_mm[axis]
    mask = hit.astype(np.float64)
    if smoothing > 0 and hit.any():
        num = ndimage.gaussian_filter(height * mask, smoothing, mode="nearest")
        den = ndimage.gaussian_filter(mask, smoothing, mode="nearest")
        height = np.where(hit, num / np.maximum(den, 1e-12), 0.0)
    u_axis, w_axis = view_image_axes(view_axis)
    du = binvol.spacing_mm[u_axis]
    dw = binvol.spacing_mm[w_axis]
    gu = np.zeros_like(height)
    gw = np.zeros_like(height)
    gu[1:-1, :] = (height[2:, :] - height[:-2, :]) / (2 * du)
    gw[:, 1:-1] = (height[:, 2:] - height[:, :-2]) / (2 * dw)
    # Only difference across foreground pixels; fall back to one-sided or flat.
    hu_ok = np.zeros_like(hit)
    hu_ok[1:-1, :] = hit[2:, :] & hit[:-2, :]
    hw_ok = np.zeros_like(hit)
    hw_ok[:, 1:-1] = hit[:, 2:] & hit[:, :-2]
    gu = np.where(hu_ok, gu, 0.0)
    gw = np.where(hw_ok, gw, 0.0)
    normal = np.zeros(height.shape + (3,))
    normal[..., u_axis] = -gu
    normal[..., w_axis] = -gw
    normal[..., axis] = -sign
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    shade = np.clip(normal @ light, 0.0, 1.0)
    shade[~hit] = 0.0
    return Image2D(shade, (binvol.spacing_mm[u_axis], binvol.spacing_mm[w_axis]))


# --- patches ---------------------------------------------------------------

def _extract(arr: np.ndarray, center: Sequence[int], eta: int) -> np.ndarray:
    if eta < 1:
        raise ValueError("eta must be >= 1")
    center = [int(c) for c in center]
    if len(center) != arr.ndim:
        raise ValueError(f"center has {len(center)} coords for a {arr.ndim}D array")
    out = np.zeros((eta,) * arr.ndim, dtype=arr.dtype)
    src, dst = [], []
    for c, n in zip(center, arr.shape):
        lo = c - eta // 2
        s0, s1 = max(lo, 0), min(lo + eta, n)
        if s0 >= s1:
            return out
        src.append(slice(s0, s1))
        dst.append(slice(s0 - lo, s1 - lo))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def extract_patch_3d(binvol: VoxelVolume, center: Sequence[int], eta: int) -> Patch:
    return Patch(int(eta), tuple(int(c) for c in center), _extract(binvol.data, center, eta))


def extract_patch_2d(img: Image2D, center: Sequence[int], eta: int) -> Patch:
    return Patch(int(eta), tuple(int(c) for c in center), _extract(img.data, center, eta))


def insert_patch(arr: np.ndarray, patch: Patch) -> np.ndarray:
    """Write the in-bounds part of ``patch`` into a copy of ``arr``."""
    out = np.array(arr, copy=True)
    src, dst = [], []
    for c, n in zip(patch.center, out.shape):
        lo = c - patch.eta // 2
        s0, s1 = max(lo, 0), min(lo + patch.eta, n)
        if s0 >= s1:
            return out
        dst.append(slice(s0, s1))
        src.append(slice(s0 - lo, s1 - lo))
    out[tuple(dst)] = patch.data[tuple(src)]
    return out


def round_voxel(points_vox: np.ndarray) -> np.ndarray:
    """Nearest voxel with halves rounded up (not banker's rounding)."""
    return np.floor(np.asarray(points_vox, dtype=np.float64) + 0.5).astype(int)


# --- mandible / cranium split ------------------------------------------------

class UnsplittableError(ValueError):
    pass


def split_mandible(binvol: BinaryVolume, frame: ReferenceFrame) -> tuple[BinaryVolume, BinaryVolume]:
    """Return (cranium, mandible) by connected-component labelling.

    The mandible is the component anterior of the frame origin whose centroid
    is lowest along the frame height axis; everything else is cranium.
    """
    labels, n = ndimage.label(binvol.data, structure=np.ones((3, 3, 3), bool))
    if n < 2:
        raise UnsplittableError(f"foreground has {n} connected component(s); cannot separate mandible")
    idx = np.arange(1, n + 1)
    centroids_vox = np.array(ndimage.center_of_mass(binvol.data, labels, idx))
    centroids = frame.to_frame(centroids_vox * np.asarray(binvol.spacing_mm))
    anterior = centroids[:, 1] > 0
    if not anterior.any():
        raise UnsplittableError("no foreground component lies anterior of the frame origin")
    cand = np.flatnonzero(anterior)
    mand_label = idx[cand[np.argmin(centroids[cand, 2])]]
    mand = (labels == mand_label).astype(np.uint8)
    cran = (binvol.data.astype(bool) & (labels != mand_label)).astype(np.uint8)
    return BinaryVolume(cran, binvol.spacing_mm), BinaryVolume(mand, binvol.spacing_mm)


# --- file format -------------------------------------------------------------

_DTYPE_TAGS = {np.dtype(np.uint8): b"u8\x00\x00", np.dtype("<f4"): b"f32\x00"}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def _encode(magic: bytes, data: np.ndarray, spacing: Sequence[float]) -> bytes:
    if data.dtype == np.uint8:
        dt = np.dtype(np.uint8)
    else:
        dt = np.dtype("<f4")
    head = magic + struct.pack(f"<{data.ndim}I", *data.shape) + struct.pack(f"<{data.ndim}d", *spacing) + _DTYPE_TAGS[dt]
    return head + np.ascontiguousarray(data, dtype=dt).tobytes(order="C")


def _decode(blob: bytes, magic: bytes, ndim: int) -> tuple[np.ndarray, tuple[float, ...]]:
    if blob[:6] != magic:
        raise ValueError(f"bad magic {blob[:6]!r}, expected {magic!r}")
    off = 6
    dims = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    spacing = struct.unpack_from(f"<{ndim}d", blob, off)
    off += 8 * ndim
    tag = blob[off:off + 4]
    off += 4
    if tag not in _TAG_DTYPES:
        raise ValueError(f"unknown dtype tag {tag!r}")
    dt = _TAG_DTYPES[tag]
    count = int(np.prod(dims))
    if len(blob) - off != count * dt.itemsize:
        raise ValueError("payload size does not match header")
    data = np.frombuffer(blob, dtype=dt, count=count, offset=off).reshape(dims)
    return data, spacing


def save_volume(path: str | Path, vol: VoxelVolume) -> None:
    Path(path).write_bytes(_encode(b"CFVOL1", vol.data, vol.spacing_mm))


def load_volume(path: str | Path) -> VoxelVolume:
    data, spacing = _decode(Path(path).read_bytes(), b"CFVOL1", 3)
    if data.dtype == np.uint8 and data.max(initial=0) <= 1:
        return BinaryVolume(data, spacing)
    return VoxelVolume(data, spacing)


def save_image(path: str | Path, img: Image2D) -> None:
    Path(path).write_bytes(_encode(b"CFIMG1", img.data, img.spacing_mm))


def load_image(path: str | Path) -> Image2D:
    data, spacing = _decode(Path(path).read_bytes(), b"CFIMG1", 2)
    return Image2D(data, spacing)
