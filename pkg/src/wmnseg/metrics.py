"""Overlap, volume and image-similarity metrics, and cohort aggregation.

Dice and volume difference are computed on hard masks. Synthesis metrics
are restricted to the brain mask; SSIM is the 2D slice-wise index with an
11x11 Gaussian window (sigma 1.5), averaged over in-mask pixels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy import ndimage

from . import taxonomy
from .volume import LabelMap, check_same_grid

PSNR_CAP = 100.0
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11x11 window
SSIM_K1, SSIM_K2 = 0.01, 0.03


class MetricError(ValueError):
    pass


def _mask(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x)).astype(bool)


def dice(g, p) -> float:
    """Hard Dice 2|G n P| / (|G| + |P|); both empty -> 1, exactly one empty -> 0."""
    g, p = _mask(g), _mask(p)
    check_same_grid(g, p, "masks")
    ng, np_ = np.count_nonzero(g), np.count_nonzero(p)
    if ng + np_ == 0:
        return 1.0
    return 2.0 * np.count_nonzero(g & p) / (ng + np_)


def volume_difference(g, p, spacing=(1.0, 1.0, 1.0)) -> float:
    """|V_G - V_P| / V_G x 100. Not symmetric; undefined for an empty ``g``."""
    g, p = _mask(g), _mask(p)
    check_same_grid(g, p, "masks")
    vox = float(np.prod(spacing))
    vg = np.count_nonzero(g) * vox
    vp = np.count_nonzero(p) * vox
    if vg == 0:
        raise MetricError("volume difference undefined: ground-truth mask is empty")
    return abs(vg - vp) / vg * 100.0


# -- synthesis -----------------------------------------------------------------------

@dataclass
class SynthesisScore:
    rmse: float
    psnr: float
    ssim: float
    region: str = "brain_mask"
    subject_id: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Per-pixel SSIM of each z-slice (2D Gaussian statistics, population covariance)."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    sigma = (SSIM_SIGMA, SSIM_SIGMA) + (0,) * (a.ndim - 2)
    blur = lambda x: ndimage.gaussian_filter(x, sigma, truncate=SSIM_RADIUS / SSIM_SIGMA,
                                             mode="reflect")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    ma, mb = blur(a), blur(b)
    vaa = blur(a * a) - ma * ma
    vbb = blur(b * b) - mb * mb
    vab = blur(a * b) - ma * mb
    return ((2 * ma * mb + c1) * (2 * vab + c2)) / ((ma ** 2 + mb ** 2 + c1) * (vaa + vbb + c2))


def synthesis_metrics(w, w_syn, mask, subject_id: str = "") -> SynthesisScore:
    w = np.asarray(getattr(w, "data", w), np.float64)
    s = np.asarray(getattr(w_syn, "data", w_syn), np.float64)
    m = _mask(mask)
    check_same_grid(w, s, "images")
    check_same_grid(w, m, "image and mask")
    if not m.any():
        raise MetricError("mask is empty")
    for name, x in (("reference", w), ("synthesized", s)):
        if x.min() < 0 or x.max() > 1:
            raise MetricError(f"{name} image must lie in [0, 1]")
    mse = float(np.mean((w[m] - s[m]) ** 2))
    rmse = float(np.sqrt(mse))
    psnr = PSNR_CAP if mse < 1e-10 else min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))
    ssim = float(np.mean(ssim_map(w, s)[m]))
    return SynthesisScore(rmse, float(psnr), ssim, subject_id=subject_id)


# -- segmentation --------------------------------------------------------------------

@dataclass
class SegmentationScore:
    subject_id: str
    dice: dict = field(default_factory=dict)   # structure abbrev (and "Thal") -> Dice
    vd: dict = field(default_factory=dict)     # structure abbrev (and "Thal") -> VD %

    def to_dict(self) -> dict:
        return asdict(self)


def score_subject(gt: LabelMap, pred: LabelMap, pred_thalamus=None,
                  subject_id: str = "") -> SegmentationScore:
    """Per-structure Dice/VD plus whole-thalamus ("Thal").

    ``pred_thalamus`` is the thalamus-head mask; defaults to ``pred > 0``.
    """
    check_same_grid(gt, pred, "label maps")
    g, p = gt.data, pred.data
    score = SegmentationScore(subject_id)
    for s in taxonomy.STRUCTURES:
        score.dice[s.abbrev] = dice(g == s.code, p == s.code)
        score.vd[s.abbrev] = volume_difference(g == s.code, p == s.code, gt.spacing)
    pt = p > 0 if pred_thalamus is None else _mask(pred_thalamus)
    score.dice["Thal"] = dice(g > 0, pt)
    score.vd["Thal"] = volume_difference(g > 0, pt, gt.spacing)
    return score


ROWS = (*taxonomy.ABBREVS, "Thal")


def score_cohort(pairs) -> pd.DataFrame:
    """Mean and sample SD of Dice and VD per structure over (gt, pred) pairs.

    Items of ``pairs`` are (gt, pred) LabelMap pairs or ready
    :class:`SegmentationScore` objects. One subject gives SD 0.
    """
    scores = [p if isinstance(p, SegmentationScore) else score_subject(*p) for p in pairs]
    if not scores:
        raise MetricError("need at least one subject")
    dice_t = pd.DataFrame([s.dice for s in scores], columns=ROWS)
    vd_t = pd.DataFrame([s.vd for s in scores], columns=ROWS)
    ddof = 1 if len(scores) > 1 else 0
    out = pd.DataFrame({
        "dice_mean": dice_t.mean(), "dice_sd": dice_t.std(ddof=ddof),
        "vd_mean": vd_t.mean(), "vd_sd": vd_t.std(ddof=ddof),
    })
    out.index.name = "structure"
    out.attrs["n"] = len(scores)
    return out


def mean_dice(table: pd.DataFrame, structures=taxonomy.ABBREVS) -> float:
    return float(table.loc[list(structures), "dice_mean"].mean())


def comparison_table(tables: dict) -> pd.DataFrame:
    """Rows = structures; columns Dice/VD mean and SD for each pipeline (e.g. NCS, SCS)."""
    cols = {}
    for metric in ("dice", "vd"):
        for name, t in tables.items():
            cols[f"{metric}_{name.lower()}_mean"] = t[f"{metric}_mean"]
            cols[f"{metric}_{name.lower()}_sd"] = t[f"{metric}_sd"]
    out = pd.DataFrame(cols)
    out.index.name = "structure"
    return out


def write_json(obj, path) -> None:
    def default(o):
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if hasattr(o, "to_dict"):
            return o.to_dict()
        raise TypeError(f"not serializable: {type(o)}")

    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=default)
