"""Intensity normalization and wrappers around external preprocessing tools."""

from __future__ import annotations

import logging
import shlex
import shutil
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .volume import Volume, VolumeError, check_same_grid, load_mask, load_volume

log = logging.getLogger(__name__)

EXTERNAL_STEPS = ("affine_register", "brain_extract", "bias_correct")


class PreprocessError(RuntimeError):
    pass


@dataclass
class PreprocessRecord:
    """Append-only log of what was done to one volume."""

    steps: list = field(default_factory=list)
    p_low: float | None = None
    p_high: float | None = None
    v_low: float | None = None
    v_high: float | None = None
    degenerate: bool = False
    mask_ref: str | None = None

    def append(self, name: str, **params) -> None:
        self.steps.append({"step": name, **params})

    def to_dict(self) -> dict:
        return {
            "steps": list(self.steps),
            "p_low": self.p_low,
            "p_high": self.p_high,
            "v_low": self.v_low,
            "v_high": self.v_high,
            "degenerate": self.degenerate,
            "mask_ref": self.mask_ref,
        }


def _as_mask(mask, like) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    check_same_grid(like, mask, "volume and mask")
    return mask


def apply_mask(volume: Volume, mask) -> Volume:
    mask = _as_mask(mask, volume)
    return volume.with_data(np.where(mask, volume.data, 0.0))


def contrast_stretch(volume: Volume, mask, p_low: float = 1.0, p_high: float = 99.0,
                     record: PreprocessRecord | None = None) -> Volume:
    """Clip in-mask intensities to the [p_low, p_high] percentiles and rescale to [0, 1].

    Percentiles are taken over in-mask voxels only and rounded inward to the
    nearest order statistic, which makes the operation exactly idempotent
    (interpolated bounds drift by one order-statistic gap per pass). Out-of-mask voxels become 0. A constant in-mask
    image maps to all zeros and sets ``record.degenerate``; pass a
    :class:`PreprocessRecord` to see the flag and the bounds used.
    """
    if not 0 <= p_low < p_high <= 100:
        raise ValueError(f"need 0 <= p_low < p_high <= 100, got {p_low}, {p_high}")
    mask = _as_mask(mask, volume)
    if not mask.any():
        raise PreprocessError("brain mask is empty")
    record = record if record is not None else PreprocessRecord()
    values = volume.data[mask].astype(np.float64)
    v_low = np.percentile(values, p_low, method="higher")
    v_high = np.percentile(values, p_high, method="lower")
    record.p_low, record.p_high = float(p_low), float(p_high)
    record.v_low, record.v_high = float(v_low), float(v_high)
    out = np.zeros(volume.shape, dtype=np.float64)
    if v_high <= v_low:
        record.degenerate = True
        log.warning("contrast_stretch: constant in-mask intensity %.6g", v_low)
    else:
        clipped = np.clip(volume.data.astype(np.float64), v_low, v_high)
        out = np.where(mask, (clipped - v_low) / (v_high - v_low), 0.0)
    # float32 rounding can push values a hair outside the unit interval
    out = np.clip(out.astype(np.float32), 0.0, 1.0)
    record.append("contrast_stretch", p_low=p_low, p_high=p_high,
                  v_low=record.v_low, v_high=record.v_high)
    return volume.with_data(out, provenance="preprocessed")


class ContrastStretch(TransformerMixin, BaseEstimator):
    """Transformer form of :func:`contrast_stretch` for a list of (volume, mask) pairs.

    Stateless; ``fit`` only validates parameters.
    """

    def __init__(self, p_low=1.0, p_high=99.0):
        self.p_low = p_low
        self.p_high = p_high

    def fit(self, X, y=None):
        if not 0 <= self.p_low < self.p_high <= 100:
            raise ValueError("need 0 <= p_low < p_high <= 100")
        return self

    def transform(self, X):
        return [contrast_stretch(v, m, self.p_low, self.p_high) for v, m in X]


# -- external tools ------------------------------------------------------------

def external_step(kind: str, inputs: dict, tool_command: str | None, out_path,
                  record: PreprocessRecord | None = None, reference=None):
    """Run a configured external tool and validate its output grid.

    ``tool_command`` is a template with ``{in}`` and ``{out}`` placeholders
    (plus any other key of ``inputs``). ``reference`` is the volume whose grid
    the output must match; defaults to ``inputs["in"]``.
    Returns a Volume, or a boolean mask for ``brain_extract`` when the output
    is binary.
    """
    if kind not in EXTERNAL_STEPS:
        raise ValueError(f"unknown external step {kind!r}; expected one of {EXTERNAL_STEPS}")
    if not tool_command:
        raise PreprocessError(
            f"no tool configured for step '{kind}'; configure it or pass --assume-preprocessed")
    for key, p in inputs.items():
        if not Path(p).exists():
            raise PreprocessError(f"{kind}: input '{key}' not found: {p}")
    out_path = Path(out_path)
    argv = shlex.split(tool_command.format(**{k: str(v) for k, v in inputs.items()},
                                           out=str(out_path)))
    if shutil.which(argv[0]) is None:
        raise PreprocessError(f"{kind}: tool '{argv[0]}' not found on PATH")
    proc = subprocess.run(argv, capture_output=True, text=True)
    if proc.returncode != 0:
        raise PreprocessError(
            f"{kind}: '{argv[0]}' exited with status {proc.returncode}: {proc.stderr.strip()}")
    if not out_path.exists():
        raise PreprocessError(f"{kind}: tool produced no output at {out_path}")
    ref = load_volume(reference if reference is not None else inputs["in"])
    out = load_volume(out_path)
    try:
        check_same_grid(ref, out, f"{kind} input and output")
    except VolumeError as exc:
        raise PreprocessError(str(exc)) from exc
    if record is not None:
        record.append(kind, command=tool_command, output=Path(out_path).name)
    if kind == "brain_extract" and set(np.unique(out.data).tolist()) <= {0.0, 1.0}:
        return load_mask(out_path)
    return out
