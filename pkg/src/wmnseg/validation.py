"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np

from .volume import LabelMap, Volume, check_same_grid


def check_volume(x, name: str = "X") -> Volume:
    if isinstance(x, Volume):
        return x
    arr = np.asarray(x)
    if arr.ndim != 3:
        raise ValueError(f"{name}: expected a 3D Volume or array, got shape {arr.shape}")
    return Volume(arr, (1.0, 1.0, 1.0), provenance="preprocessed")


def check_mask(mask, like: Volume, name: str = "mask") -> np.ndarray:
    m = np.asarray(getattr(mask, "data", mask))
    if m.dtype != bool and not np.isin(np.unique(m), (0, 1)).all():
        raise ValueError(f"{name}: mask must be binary")
    m = m.astype(bool)
    check_same_grid(like, m, f"{name} and image")
    if not m.any():
        raise ValueError(f"{name}: mask is empty")
    return m


def check_inputs(X) -> list[tuple[Volume, np.ndarray]]:
    """Normalize X to (volume, brain mask) pairs.

    Items may be (volume, mask) tuples, objects with ``image``/``mask``
    attributes, or bare volumes (mask = nonzero voxels).
    """
    if isinstance(X, (Volume, np.ndarray)) and np.ndim(getattr(X, "data", X)) == 3:
        X = [X]
    out = []
    for i, item in enumerate(X):
        if isinstance(item, tuple):
            if len(item) != 2:
                raise ValueError(f"X[{i}]: expected (volume, mask), got {len(item)} items")
            v = check_volume(item[0], f"X[{i}]")
            out.append((v, check_mask(item[1], v, f"X[{i}] mask")))
        elif hasattr(item, "image") and hasattr(item, "mask"):
            v = check_volume(item.image, f"X[{i}]")
            out.append((v, check_mask(item.mask, v, f"X[{i}] mask")))
        else:
            v = check_volume(item, f"X[{i}]")
            out.append((v, check_mask(v.data != 0, v, f"X[{i}] mask")))
    if not out:
        raise ValueError("X is empty")
    return out


def check_targets(y, inputs, kind: str) -> list:
    """Pair targets with inputs: WMn volumes (``kind="volume"``) or label maps (``"labels"``)."""
    y = list(y)
    if len(y) != len(inputs):
        raise ValueError(f"X and y have different lengths: {len(inputs)} vs {len(y)}")
    out = []
    for i, (t, (v, _)) in enumerate(zip(y, inputs)):
        if kind == "labels":
            t = t if isinstance(t, LabelMap) else LabelMap(np.asarray(t), v.spacing, v.affine)
        else:
            t = check_volume(t, f"y[{i}]")
        check_same_grid(v, t, f"X[{i}] and y[{i}]")
        out.append(t)
    return out
