"""Dual-channel PET-CT volumes, label maps, intensity windows and NIfTI I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union

import nibabel as nib
import numpy as np

PathLike = Union[str, Path]

CT_WINDOW = (-1024.0, 1024.0)
PET_WINDOW = (0.0, 20.0)
MAX_LABEL = 255

CT_SUFFIX = "_ct"
PET_SUFFIX = "_pet"
LESION_SUFFIX = "_lesion"
ORGAN_SUFFIX = "_organs"


class VolumeError(ValueError):
    """Base class for invalid volume data."""


class InvariantViolation(VolumeError):
    pass


class ShapeMismatchError(VolumeError):
    pass


class MalformedHeaderError(VolumeError):
    pass


class VolumeFileNotFound(FileNotFoundError):
    pass


@dataclass(frozen=True)
class Grid:
    shape: Tuple[int, int, int]
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        spacing = tuple(float(s) for s in self.spacing)
        if len(shape) != 3 or len(spacing) != 3:
            raise InvariantViolation(f"grid must be 3D, got shape={shape} spacing={spacing}")
        if min(shape) < 4:
            raise InvariantViolation(f"all grid dims must be >= 4, got {shape}")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise InvariantViolation(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)

    @property
    def extent_mm(self) -> Tuple[float, float, float]:
        return tuple(n * s for n, s in zip(self.shape, self.spacing))

    def affine(self) -> np.ndarray:
        return np.diag([*self.spacing, 1.0])


@dataclass
class Volume:
    """CT (HU) and PET (SUV) channels on a shared grid."""

    grid: Grid
    ct: np.ndarray
    pet: np.ndarray

    def __post_init__(self):
        self.ct = np.asarray(self.ct, dtype=np.float32)
        self.pet = np.asarray(self.pet, dtype=np.float32)
        for name, arr in (("ct", self.ct), ("pet", self.pet)):
            if arr.shape != self.grid.shape:
                raise ShapeMismatchError(
                    f"{name} channel shape {arr.shape} does not match grid {self.grid.shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise InvariantViolation(f"{name} channel contains non-finite values")
        if np.any(self.pet < 0):
            raise InvariantViolation("pet channel contains negative SUV values")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.grid.shape

    def normalized(self, ct_window=CT_WINDOW, pet_window=PET_WINDOW) -> np.ndarray:
        """Stack both channels into a (2, D, H, W) float32 array in [-1, 1]."""
        return np.stack(
            [normalize_ct(self.ct, ct_window), normalize_pet(self.pet, pet_window)]
        ).astype(np.float32)

    @classmethod
    def from_normalized(cls, arr: np.ndarray, grid: Grid, ct_window=CT_WINDOW, pet_window=PET_WINDOW) -> "Volume":
        arr = np.asarray(arr)
        if arr.shape != (2, *grid.shape):
            raise ShapeMismatchError(f"expected (2, {grid.shape}), got {arr.shape}")
        return cls(grid, denormalize_ct(arr[0], ct_window), denormalize_pet(arr[1], pet_window))

    def equals(self, other: "Volume") -> bool:
        return (
            self.grid == other.grid
            and np.array_equal(self.ct, other.ct)
            and np.array_equal(self.pet, other.pet)
        )


@dataclass
class LabelMap:
    """Integer labels on a grid: binary lesion masks or small-integer organ maps."""

    grid: Grid
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape != self.grid.shape:
            raise ShapeMismatchError(f"label shape {labels.shape} does not match grid {self.grid.shape}")
        if labels.dtype.kind == "f":
            if not np.all(np.isfinite(labels)) or np.any(labels != np.round(labels)):
                raise InvariantViolation("label map must hold integer values")
        elif labels.dtype.kind not in "iub":
            raise InvariantViolation(f"unsupported label dtype {labels.dtype}")
        if labels.size and (labels.min() < 0 or labels.max() > MAX_LABEL):
            raise InvariantViolation(f"labels must lie in [0, {MAX_LABEL}]")
        self.labels = labels.astype(np.uint8)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.grid.shape

    @property
    def is_binary(self) -> bool:
        return bool(np.all(self.labels <= 1))

    def binary(self) -> np.ndarray:
        return self.labels > 0

    def label_set(self) -> set:
        return set(np.unique(self.labels).tolist())


# --- intensity windows ------------------------------------------------------


def _window_map(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return (np.clip(x, lo, hi) - lo) / (hi - lo) * 2.0 - 1.0


def normalize_ct(hu, window: Tuple[float, float] = CT_WINDOW) -> np.ndarray:
    """Clip HU to the window and map it affinely onto [-1, 1]."""
    hu = np.asarray(hu, dtype=np.float64)
    if not np.all(np.isfinite(hu)):
        raise InvariantViolation("CT input contains non-finite values")
    return _window_map(hu, *window)


def normalize_pet(suv, window: Tuple[float, float] = PET_WINDOW) -> np.ndarray:
    suv = np.asarray(suv, dtype=np.float64)
    if not np.all(np.isfinite(suv)):
        raise InvariantViolation("PET input contains non-finite values")
    if np.any(suv < 0):
        raise InvariantViolation("PET input contains negative SUV values")
    return _window_map(suv, *window)


def denormalize_ct(x, window: Tuple[float, float] = CT_WINDOW) -> np.ndarray:
    lo, hi = window
    return (np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0) + 1.0) / 2.0 * (hi - lo) + lo


def denormalize_pet(x, window: Tuple[float, float] = PET_WINDOW) -> np.ndarray:
    lo, hi = window
    out = (np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0) + 1.0) / 2.0 * (hi - lo) + lo
    return np.maximum(out, 0.0)


# --- patches and resampling -------------------------------------------------


def crop_array(arr: np.ndarray, start: Sequence[int], size: Sequence[int], fill: float = 0.0) -> np.ndarray:
    """Crop the trailing three axes of ``arr`` at ``start``; out-of-bounds voxels take ``fill``."""
    spatial = arr.shape[-3:]
    out = np.full(arr.shape[:-3] + tuple(size), fill, dtype=arr.dtype)
    src, dst = [], []
    for s, n, dim in zip(start, size, spatial):
        lo, hi = max(s, 0), min(s + n, dim)
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - s, hi - s))
    out[(..., *dst)] = arr[(..., *src)]
    return out


def patch_start(center: Sequence[int], size: Sequence[int]) -> Tuple[int, int, int]:
    return tuple(int(c) - int(n) // 2 for c, n in zip(center, size))


def extract_patch(v: Volume, m: LabelMap, center, size) -> Tuple[Volume, LabelMap]:
    """Crop a patch of exactly ``size`` around ``center`` from a volume and its mask.

    Regions outside the source are filled with the lower window bound of each
    channel (air for CT, zero uptake for PET) and label 0.
    """
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) <= 0:
        raise ValueError(f"patch size must be three positive ints, got {size}")
    if m.grid.shape != v.grid.shape:
        raise ShapeMismatchError("volume and mask grids differ")
    start = patch_start(center, size)
    grid = Grid(size, v.grid.spacing)
    ct = crop_array(v.ct, start, size, fill=CT_WINDOW[0])
    pet = crop_array(v.pet, start, size, fill=PET_WINDOW[0])
    labels = crop_array(m.labels, start, size, fill=0)
    return Volume(grid, ct, pet), LabelMap(grid, labels)


def downsample_mask(m: LabelMap, factor, mode: str = "nearest") -> LabelMap:
    """Downsample a label map by integer factors.

    ``nearest`` takes every ``factor``-th voxel (origin-aligned); ``any`` marks
    a coarse voxel when any fine voxel in its block is non-zero, so small
    structures survive (binary output).
    """
    factor = tuple(int(f) for f in factor)
    if any(f < 1 for f in factor):
        raise ValueError(f"factors must be >= 1, got {factor}")
    if mode not in ("nearest", "any"):
        raise ValueError(f"unknown mode {mode!r}")
    for dim, f in zip(m.grid.shape, factor):
        if dim % f:
            raise ShapeMismatchError(f"grid shape {m.grid.shape} not divisible by factor {factor}")
    if mode == "nearest":
        labels = m.labels[:: factor[0], :: factor[1], :: factor[2]]
    else:
        d, h, w = (n // f for n, f in zip(m.grid.shape, factor))
        blocks = (m.labels > 0).reshape(d, factor[0], h, factor[1], w, factor[2])
        labels = blocks.any(axis=(1, 3, 5)).astype(np.uint8)
    spacing = tuple(s * f for s, f in zip(m.grid.spacing, factor))
    return LabelMap(Grid(labels.shape, spacing), labels)


# --- NIfTI I/O ---------------------------------------------------------------


def _split_nifti_name(path: Path) -> Tuple[Path, str]:
    name = path.name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return path.with_name(name[: -len(ext)]), ext
    return path, ".nii.gz"


def companion_paths(path: PathLike) -> Tuple[Path, Path]:
    """Return the ``_ct``/``_pet`` file pair for a case path (base or either member)."""
    base, ext = _split_nifti_name(Path(path))
    stem = base.name
    for suffix in (CT_SUFFIX, PET_SUFFIX):
        if stem.endswith(suffix):
            stem = stem[: -len(suffix)]
            break
    return (
        base.with_name(f"{stem}{CT_SUFFIX}{ext}"),
        base.with_name(f"{stem}{PET_SUFFIX}{ext}"),
    )


def _write_nifti(arr: np.ndarray, grid: Grid, path: Path, dtype) -> None:
    img = nib.Nifti1Image(np.asarray(arr, dtype=dtype), grid.affine())
    img.header.set_zooms(grid.spacing[: arr.ndim] + (1.0,) * (arr.ndim - 3))
    img.header.set_xyzt_units("mm")
    nib.save(img, str(path))


def _read_nifti(path: Path) -> Tuple[np.ndarray, Tuple[float, float, float]]:
    if not path.exists():
        raise VolumeFileNotFound(f"no such file: {path}")
    try:
        img = nib.load(str(path))
        data = np.asanyarray(img.dataobj)
        zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
    except Exception as exc:  # nibabel raises a zoo of types for corrupt headers
        raise MalformedHeaderError(f"cannot parse NIfTI header of {path}: {exc}") from exc
    if data.ndim not in (3, 4) or len(zooms) != 3:
        raise MalformedHeaderError(f"{path} has unsupported dimensionality {data.shape}")
    return data, zooms


def save_volume(v: Volume, path: PathLike) -> Tuple[Path, Path]:
    """Write ``v`` as a ``_ct`` / ``_pet`` NIfTI pair next to ``path``."""
    ct_path, pet_path = companion_paths(path)
    if not ct_path.parent.is_dir():
        raise FileNotFoundError(f"parent directory does not exist: {ct_path.parent}")
    _write_nifti(v.ct, v.grid, ct_path, np.float32)
    _write_nifti(v.pet, v.grid, pet_path, np.float32)
    return ct_path, pet_path


def load_volume(path: PathLike) -> Volume:
    """Load a volume from a single two-channel NIfTI file or a ``_ct``/``_pet`` pair."""
    path = Path(path)
    if path.exists():
        data, zooms = _read_nifti(path)
        if data.ndim == 4:
            if data.shape[-1] != 2:
                raise MalformedHeaderError(f"{path}: expected 2 channels, got {data.shape[-1]}")
            grid = Grid(data.shape[:3], zooms)
            return Volume(grid, data[..., 0], data[..., 1])
    ct_path, pet_path = companion_paths(path)
    for p in (ct_path, pet_path):
        if not p.exists():
            raise VolumeFileNotFound(f"missing modality file: {p}")
    ct, ct_zooms = _read_nifti(ct_path)
    pet, _ = _read_nifti(pet_path)
    if ct.ndim != 3 or pet.ndim != 3:
        raise MalformedHeaderError(f"{path}: modality files must be 3D")
    if ct.shape != pet.shape:
        raise ShapeMismatchError(f"CT shape {ct.shape} differs from PET shape {pet.shape}")
    return Volume(Grid(ct.shape, ct_zooms), ct, pet)


def save_labelmap(m: LabelMap, path: PathLike) -> Path:
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"parent directory does not exist: {path.parent}")
    _write_nifti(m.labels, m.grid, path, np.uint8)
    return path


def load_labelmap(path: PathLike) -> LabelMap:
    data, zooms = _read_nifti(Path(path))
    if data.ndim != 3:
        raise MalformedHeaderError(f"{path}: label maps must be 3D")
    return LabelMap(Grid(data.shape, zooms), np.asarray(data))
