"""2.5D slab and patch extraction, geometric augmentation, and stitching.

A window is a stack of ``DEPTH`` adjacent slices; networks predict the center
slice only. Arrays are indexed (x, y, z) with z through-plane. Slices beyond
the top/bottom of the grid are filled by edge replication; in-plane windows
are clamped inside the grid, never zero padded.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

DEPTH = 5
HALF = DEPTH // 2


class SamplerError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Window2p5D:
    """One slab or patch.

    ``image`` has shape (channels, h, w, DEPTH + 2 * margin); ``labels`` has
    shape (h, w, DEPTH + 2 * margin) or is None. ``corner`` is
    (x, y, z_center - 2). ``margin`` extra slices on each side exist only to
    feed through-plane rotation and are dropped by :func:`augment`.
    """

    subject_id: str
    corner: tuple[int, int, int]
    image: np.ndarray
    labels: np.ndarray | None = None
    margin: int = 0

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1:3]

    @property
    def z_center(self) -> int:
        return self.corner[2] + HALF

    @property
    def depth(self) -> int:
        return self.image.shape[3] - 2 * self.margin

    def core(self) -> "Window2p5D":
        """Drop context margin slices."""
        if self.margin == 0:
            return self
        m = self.margin
        labels = None if self.labels is None else self.labels[..., m:-m]
        return replace(self, image=self.image[..., m:-m], labels=labels, margin=0)

    def center_image(self) -> np.ndarray:
        return self.image[..., self.margin + HALF]

    def center_labels(self) -> np.ndarray | None:
        return None if self.labels is None else self.labels[..., self.margin + HALF]


@dataclass(frozen=True)
class AugmentationParams:
    """Sampling ranges for the runtime geometric augmentation."""

    scale: tuple[float, float] = (0.9, 1.1)
    shear_deg: tuple[float, float] = (-5.0, 5.0)
    rotation_deg: tuple[float, float] = (-10.0, 10.0)
    through_plane_deg: tuple[float, float] = (-10.0, 10.0)
    through_plane: bool = False
    seed: int = 0

    def __post_init__(self):
        for name, ident in (("scale", 1.0), ("shear_deg", 0.0), ("rotation_deg", 0.0),
                            ("through_plane_deg", 0.0)):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= ident <= hi):
                raise ValueError(f"{name} range {(lo, hi)} must be finite and contain {ident}")
        if self.scale[0] <= 0:
            raise ValueError("scale range must be positive")

    @classmethod
    def identity(cls, through_plane: bool = False) -> "AugmentationParams":
        return cls((1.0, 1.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0), through_plane)

    @property
    def is_identity(self) -> bool:
        tp = self.through_plane_deg if self.through_plane else (0.0, 0.0)
        return (self.scale == (1.0, 1.0) and self.shear_deg == (0.0, 0.0)
                and self.rotation_deg == (0.0, 0.0) and tuple(tp) == (0.0, 0.0))


# -- geometry --------------------------------------------------------------------

def window_starts(n: int, w: int, stride: int) -> list[int]:
    """Sliding-window start indices over ``n`` with the last window clamped to the end."""
    if w > n:
        raise SamplerError(f"window {w} larger than extent {n}")
    if stride < 1:
        raise SamplerError("stride must be >= 1")
    starts = list(range(0, n - w + 1, stride))
    if starts[-1] != n - w:
        starts.append(n - w)
    return starts


def _crop_box(mask: np.ndarray | None, shape, size) -> tuple[int, int, int, int]:
    """In-plane bounding box of ``mask``, grown to at least the window size."""
    nx, ny = shape[:2]
    h, w = size
    if h > nx or w > ny:
        raise SamplerError(
            f"volume in-plane size {(nx, ny)} smaller than window {(h, w)}; "
            "configure a smaller window")
    if mask is None or not mask.any():
        return 0, nx, 0, ny
    xs = np.flatnonzero(mask.any(axis=(1, 2)))
    ys = np.flatnonzero(mask.any(axis=(0, 2)))
    box = []
    for lo, hi, win, n in ((xs[0], xs[-1] + 1, h, nx), (ys[0], ys[-1] + 1, w, ny)):
        if hi - lo < win:
            lo = max(0, min(lo - (win - (hi - lo)) // 2, n - win))
            hi = lo + win
        box += [int(lo), int(hi)]
    return tuple(box)


def slab_indices(z_center: int, depth_total: int, nz: int) -> np.ndarray:
    half = depth_total // 2
    return np.clip(np.arange(z_center - half, z_center + half + 1), 0, nz - 1)


def _data(x):
    return None if x is None else np.asarray(getattr(x, "data", x))


def materialize(arrays, labels, corner, size, margin, subject_id) -> Window2p5D:
    x, y, z0 = corner
    h, w = size
    nz = arrays[0].shape[2]
    zi = slab_indices(z0 + HALF, DEPTH + 2 * margin, nz)
    image = np.stack([a[x:x + h, y:y + w][:, :, zi] for a in arrays]).astype(np.float32)
    lab = None if labels is None else labels[x:x + h, y:y + w][:, :, zi].astype(np.int16)
    return Window2p5D(subject_id, (x, y, z0), image, lab, margin)


def segmentation_corners(shape, size=(192, 192), stride=None, mask=None) -> list[tuple]:
    h, w = size[:2]
    s_xy = stride if stride is not None else max(1, min(h, w) // 2)
    if isinstance(s_xy, (tuple, list)):
        s_xy = s_xy[0]
    x0, x1, y0, y1 = _crop_box(mask, shape, (h, w))
    xs = [x0 + s for s in window_starts(x1 - x0, h, s_xy)]
    ys = [y0 + s for s in window_starts(y1 - y0, w, s_xy)]
    return [(x, y, zc - HALF) for zc in range(shape[2]) for x in xs for y in ys]


def extract_segmentation_slabs(volume, labelmap=None, size=(192, 192, 5), stride=None,
                               mask=None, subject_id: str = "") -> list[Window2p5D]:
    """Slabs around the brain bounding box, one per (in-plane position, slice).

    Through-plane step is 1 so every slice is the center slice of exactly
    one window per in-plane position. ``mask`` defaults to nonzero voxels.
    """
    if len(size) == 3 and size[2] != DEPTH:
        raise SamplerError(f"window depth must be {DEPTH}")
    vol = _data(volume)
    lab = _data(labelmap)
    if lab is not None and lab.shape != vol.shape:
        raise SamplerError(f"label grid {lab.shape} != volume grid {vol.shape}")
    m = _data(mask) if mask is not None else vol != 0
    corners = segmentation_corners(vol.shape, size[:2], stride, m)
    return [materialize([vol], lab, c, size[:2], 0, subject_id) for c in corners]


def synthesis_corners(shape, mask, size=(64, 64), stride=None, min_mask_fraction=0.5,
                      replicate_edges=False) -> list[tuple]:
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise SamplerError("brain mask is empty")
    h, w = size[:2]
    if stride is None:
        s_xy, s_z = max(1, min(h, w) // 2), 1
    elif isinstance(stride, (tuple, list)):
        s_xy, s_z = stride
    else:
        s_xy, s_z = stride, 1
    nz = shape[2]
    x0, x1, y0, y1 = _crop_box(mask, shape, (h, w))
    xs = [x0 + s for s in window_starts(x1 - x0, h, s_xy)]
    ys = [y0 + s for s in window_starts(y1 - y0, w, s_xy)]
    if replicate_edges:
        centers = range(0, nz, s_z)
    else:
        if nz < DEPTH:
            raise SamplerError(f"volume has {nz} slices, fewer than window depth {DEPTH}")
        centers = [HALF + s for s in window_starts(nz, DEPTH, s_z)]
    area = h * w
    out = []
    for zc in centers:
        sl = mask[:, :, zc]
        for x in xs:
            for y in ys:
                frac = np.count_nonzero(sl[x:x + h, y:y + w]) / area
                if frac >= min_mask_fraction:
                    out.append((x, y, zc - HALF))
    return out


def extract_synthesis_patches(mprage, wmn, brain_mask, size=(64, 64, 5), stride=None,
                              min_mask_fraction: float = 0.5, replicate_edges: bool = False,
                              margin: int = 0, subject_id: str = "") -> list[Window2p5D]:
    """Overlapping patches whose center-slice footprint lies mostly inside the brain.

    A patch is kept when at least ``min_mask_fraction`` of its center slice is
    in the mask. Channel 0 is MPRAGE, channel 1 (when ``wmn`` is given) the
    paired white-matter-nulled image.
    """
    if len(size) == 3 and size[2] != DEPTH:
        raise SamplerError(f"window depth must be {DEPTH}")
    a = _data(mprage)
    arrays = [a] if wmn is None else [a, _data(wmn)]
    if any(x.shape != a.shape for x in arrays):
        raise SamplerError("paired volumes must share a grid")
    m = _data(brain_mask).astype(bool)
    if m.shape != a.shape:
        raise SamplerError("brain mask grid differs from volume grid")
    corners = synthesis_corners(a.shape, m, size[:2], stride, min_mask_fraction,
                                replicate_edges)
    return [materialize(arrays, None, c, size[:2], margin, subject_id) for c in corners]


# -- augmentation ----------------------------------------------------------------

def sample_transform(params: AugmentationParams, rng: np.random.Generator) -> np.ndarray:
    """Draw a 3x3 matrix mapping output (x, y, z) offsets to input offsets."""
    s = rng.uniform(*params.scale)
    sh = np.deg2rad(rng.uniform(*params.shear_deg))
    th = np.deg2rad(rng.uniform(*params.rotation_deg))
    tp = np.deg2rad(rng.uniform(*params.through_plane_deg)) if params.through_plane else 0.0
    rot = np.array([[np.cos(th), np.sin(th), 0], [-np.sin(th), np.cos(th), 0], [0, 0, 1]])
    shear = np.array([[1, np.tan(sh), 0], [0, 1, 0], [0, 0, 1]])
    scale = np.diag([1 / s, 1 / s, 1.0])
    tilt = np.array([[np.cos(tp), 0, np.sin(tp)], [0, 1, 0], [-np.sin(tp), 0, np.cos(tp)]])
    return tilt @ rot @ shear @ scale


def apply_transform(window: Window2p5D, matrix: np.ndarray) -> Window2p5D:
    """Resample a window through ``matrix`` about its center; returns the core slab.

    Images use linear interpolation, labels nearest neighbour; samples that
    fall outside the window read 0 in-plane and the edge slice through-plane.
    """
    matrix = np.asarray(matrix, float)
    shape = window.image.shape[1:]
    center = (np.array(shape, float) - 1) / 2
    offset = center - matrix @ center

    # pad z by edge replication far enough that tilted rows stay inside the stack
    corners = np.array(np.meshgrid(*[[0, n - 1] for n in shape], indexing="ij")).reshape(3, -1)
    z_in = (matrix @ (corners - center[:, None]))[2] + center[2]
    pad = int(np.ceil(max(0.0, -z_in.min(), z_in.max() - (shape[2] - 1)))) + 1
    off = offset + np.array([0.0, 0.0, pad])

    def warp(a, order):
        ap = np.pad(a, ((0, 0), (0, 0), (pad, pad)), mode="edge")
        return ndimage.affine_transform(ap, matrix, offset=off, output_shape=a.shape,
                                        order=order, mode="constant", cval=0.0,
                                        prefilter=False)

    image = np.stack([warp(c.astype(np.float64), 1) for c in window.image]).astype(np.float32)
    labels = None if window.labels is None else warp(window.labels, 0).astype(np.int16)
    return replace(window, image=image, labels=labels).core()


def augment(window: Window2p5D, params: AugmentationParams,
            rng: np.random.Generator) -> Window2p5D:
    if params.is_identity:
        return window.core()
    return apply_transform(window, sample_transform(params, rng))


# -- stitching -------------------------------------------------------------------

def stitch(windows, predictions, grid_shape, normalize: bool = True, fill=None) -> np.ndarray:
    """Average center-slice predictions back onto the grid.

    ``predictions[i]`` has shape (K, h, w) for ``windows[i]``. Returns an
    array (K, X, Y, Z). Voxels no window covers raise unless ``fill`` (a
    length-K vector) is given. With ``normalize`` the K channels are
    rescaled to sum to 1 at every voxel.
    """
    windows = list(windows)
    predictions = list(predictions)
    if len(windows) != len(predictions) or not windows:
        raise SamplerError("need one prediction per window and at least one window")
    k = np.asarray(predictions[0]).shape[0]
    acc = np.zeros((k, *grid_shape), dtype=np.float64)
    count = np.zeros(grid_shape, dtype=np.int32)
    for win, pred in zip(windows, predictions):
        pred = np.asarray(pred, dtype=np.float64)
        x, y, _ = win.corner
        h, w = pred.shape[1:3]
        zc = win.z_center
        acc[:, x:x + h, y:y + w, zc] += pred
        count[x:x + h, y:y + w, zc] += 1
    hole = count == 0
    if hole.any():
        if fill is None:
            idx = np.argwhere(hole)
            lo, hi = idx.min(0), idx.max(0)
            raise SamplerError(
                f"{int(hole.sum())} voxels not covered by any window; "
                f"uncovered bounding box {tuple(map(int, lo))}..{tuple(map(int, hi))}")
        acc[:, hole] = np.asarray(fill, dtype=np.float64)[:, None]
        count[hole] = 1
    acc /= count
    if normalize:
        total = acc.sum(axis=0, keepdims=True)
        acc = acc / np.where(total > 0, total, 1.0)
    return acc
