"""In-memory volumes, label maps and NIfTI-1 I/O."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import nibabel as nib
import numpy as np

from . import taxonomy

PROVENANCES = ("raw", "preprocessed", "synthesized")


class VolumeError(ValueError):
    """Invalid volume content or file."""


def _spacing_tuple(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise VolumeError(f"spacing must have 3 components, got {len(sp)}")
    if not all(np.isfinite(s) and s > 0 for s in sp):
        raise VolumeError(f"spacing components must be positive, got {sp}")
    return sp


def _default_affine(spacing) -> np.ndarray:
    return np.diag([*spacing, 1.0])


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar 3D image on a voxel grid.

    ``data`` is indexed (x, y, z) with z the through-plane (slice) axis.
    The array is copied and made read-only on construction.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None
    provenance: str = "raw"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise VolumeError(f"expected 3D volume, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise VolumeError("volume contains non-finite values")
        if self.provenance not in PROVENANCES:
            raise VolumeError(f"unknown provenance {self.provenance!r}")
        if self.provenance != "raw" and data.size and (data.min() < 0 or data.max() > 1):
            raise VolumeError(f"{self.provenance} volume must lie in [0, 1]")
        spacing = _spacing_tuple(self.spacing)
        affine = _default_affine(spacing) if self.affine is None else np.asarray(self.affine, float)
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", _frozen(affine))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def with_data(self, data, provenance: str | None = None) -> "Volume":
        """Same grid, new intensities."""
        return Volume(data, self.spacing, self.affine, provenance or self.provenance)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer structure codes on a voxel grid (0 = background)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None
    taxonomy: tuple = field(default=taxonomy.STRUCTURES, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise VolumeError(f"expected 3D label map, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.integer):
            if not np.array_equal(data, np.round(data)):
                raise VolumeError("label map contains non-integer codes")
        data = data.astype(np.int16)
        valid = {0, *(s.code for s in self.taxonomy)}
        bad = set(np.unique(data).tolist()) - valid
        if bad:
            raise VolumeError(f"label map contains unknown codes {sorted(bad)}")
        spacing = _spacing_tuple(self.spacing)
        affine = _default_affine(spacing) if self.affine is None else np.asarray(self.affine, float)
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", _frozen(affine))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def thalamus_mask(self) -> np.ndarray:
        """Whole thalamus as the union of all structure codes."""
        return self.data > 0

    def mask(self, code: int) -> np.ndarray:
        return self.data == code


def structure_volume_mm3(labelmap: LabelMap, code: int) -> float:
    code = int(code)
    if code != 0:
        taxonomy.structure(code)
    sx, sy, sz = labelmap.spacing
    return float(np.count_nonzero(labelmap.data == code)) * sx * sy * sz


def check_same_grid(a, b, what: str = "inputs") -> None:
    sa = a.shape if hasattr(a, "shape") else np.shape(a)
    sb = b.shape if hasattr(b, "shape") else np.shape(b)
    if tuple(sa) != tuple(sb):
        raise VolumeError(f"grid mismatch between {what}: {tuple(sa)} vs {tuple(sb)}")


# -- NIfTI I/O ---------------------------------------------------------------

def _read_nifti(path) -> nib.Nifti1Image:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such volume file: {path}")
    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises several unrelated types
        raise VolumeError(f"malformed NIfTI file {path}: {exc}") from exc
    if not isinstance(img, nib.Nifti1Image):
        raise VolumeError(f"{path} is not a NIfTI-1 image")
    shape = img.shape
    # trailing singleton dims are legal in NIfTI; anything else is not 3D
    if len(shape) < 3 or any(d != 1 for d in shape[3:]):
        raise VolumeError(f"expected 3D volume, {path} has shape {shape}")
    return nib.as_closest_canonical(img)


def _header_spacing(img) -> tuple[float, float, float]:
    # pixdim is float32 on disk; its shortest decimal repr recovers the written value
    return tuple(float(str(np.float32(z))) for z in img.header.get_zooms()[:3])


def _payload(img) -> np.ndarray:
    data = np.asanyarray(img.dataobj)
    return data.reshape(data.shape[:3])


def load_volume(path, provenance: str = "raw") -> Volume:
    img = _read_nifti(path)
    data = _payload(img).astype(np.float32)
    return Volume(data, _header_spacing(img), img.affine, provenance)


def load_labelmap(path) -> LabelMap:
    img = _read_nifti(path)
    data = _payload(img)
    return LabelMap(data, _header_spacing(img), img.affine)


def _write(img: nib.Nifti1Image, spacing, path) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise OSError(f"output directory does not exist: {path.parent}")
    img.header.set_zooms(spacing)
    img.header.set_xyzt_units("mm")
    nib.save(img, str(path))


def save_volume(volume: Volume, path) -> None:
    img = nib.Nifti1Image(np.asarray(volume.data, np.float32), volume.affine)
    _write(img, volume.spacing, path)


def save_labelmap(labelmap: LabelMap, path) -> None:
    img = nib.Nifti1Image(np.asarray(labelmap.data, np.int16), labelmap.affine)
    _write(img, labelmap.spacing, path)


def save_mask(mask: np.ndarray, like: Volume | LabelMap, path) -> None:
    img = nib.Nifti1Image(np.asarray(mask, np.uint8), like.affine)
    _write(img, like.spacing, path)


def load_mask(path) -> np.ndarray:
    img = _read_nifti(path)
    return _payload(img) > 0
