"""Synthetic paired MPRAGE / white-matter-nulled phantoms with known labels.

Geometry is a brain ellipsoid with a cortical shell, two ventricles and a
thalamus made of twelve disjoint nucleus ellipsoids. The white-matter-nulled
contrast gives every nucleus its own intensity; the MPRAGE contrast keeps the
thalamus nearly uniform. All randomness flows from the spec seed.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import ndimage

from . import taxonomy
from .volume import LabelMap, Volume, save_labelmap, save_mask, save_volume, structure_volume_mm3


class PhantomSpecError(ValueError):
    pass


# (offset from thalamus center, radii) in voxels; x medial->lateral,
# y anterior->posterior, z inferior->superior
DEFAULT_NUCLEI = {
    "AV": ((-2, -14, 3), (3, 3, 3)),
    "VLa": ((6, -8, 3), (3, 3, 3)),
    "MD": ((-6, -3, 3), (4, 5, 3)),
    "VLp": ((6, 2, 3), (4, 4, 3)),
    "Hb": ((-5, 9, 3), (2.5, 2.5, 2.5)),
    "Pul": ((4, 13, 3), (5, 4, 3)),
    "MTT": ((-4, -12, -4), (2.5, 2.5, 2.5)),
    "VA": ((4, -12, -4), (3, 3, 3)),
    "CM": ((-4, -2, -4), (3, 3, 3)),
    "VPl": ((7, 3, -4), (3, 3, 3)),
    "MGN": ((-3, 9, -4), (3, 3, 3)),
    "LGN": ((6, 12, -4), (3, 3, 3)),
}

DEFAULT_INTENSITY = {
    # CSF-nulled T1: bright WM, thalamus nearly uniform
    "mprage": {
        "wm": 0.85, "gm": 0.55, "csf": 0.12,
        "nuclei": {"AV": 0.66, "VA": 0.64, "VLa": 0.65, "VLp": 0.67, "VPl": 0.68,
                   "Pul": 0.63, "LGN": 0.62, "MGN": 0.66, "CM": 0.69, "MD": 0.64,
                   "Hb": 0.62, "MTT": 0.70},
    },
    # white matter nulled: dark WM, strong contrast between nuclei
    "wmn": {
        "wm": 0.08, "gm": 0.55, "csf": 0.3,
        "nuclei": {"AV": 0.92, "VA": 0.50, "VLa": 0.70, "VLp": 0.38, "VPl": 0.82,
                   "Pul": 0.62, "LGN": 0.95, "MGN": 0.44, "CM": 0.28, "MD": 0.76,
                   "Hb": 0.88, "MTT": 0.20},
    },
}


@dataclass
class LesionSpec:
    count: int = 0
    radius: float = 2.0
    offsets: dict = field(default_factory=lambda: {"mprage": -0.08, "wmn": 0.3})


@dataclass
class PhantomSpec:
    shape: tuple = (96, 96, 24)
    spacing: tuple = (1.0, 1.0, 1.0)
    seed: int = 0
    brain_center: tuple = (47.5, 47.5, 11.5)
    brain_radii: tuple = (43.0, 44.0, 14.0)
    cortex_thickness: float = 3.0
    ventricles: list = field(default_factory=lambda: [
        ((30.0, 46.0, 13.0), (3.0, 12.0, 4.0)),
        ((66.0, 46.0, 13.0), (3.0, 12.0, 4.0)),
    ])
    thalamus_center: tuple = (48.3, 49.7, 12.2)  # off-lattice: aligned centers distort voxel counts
    thalamus_radii: tuple = (16.0, 22.0, 11.0)
    nuclei: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_NUCLEI))
    intensity: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_INTENSITY))
    noise_sd: float = 0.008
    smoothing: float = 0.5
    lesions: LesionSpec = field(default_factory=LesionSpec)
    atrophy: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        if "lesions" in d and isinstance(d["lesions"], dict):
            d["lesions"] = LesionSpec(**d["lesions"])
        for key in ("shape", "spacing", "brain_center", "brain_radii", "thalamus_center",
                    "thalamus_radii"):
            if key in d:
                d[key] = tuple(d[key])
        if "nuclei" in d:
            d["nuclei"] = {k: (tuple(v[0]), tuple(v[1])) for k, v in d["nuclei"].items()}
        if "ventricles" in d:
            d["ventricles"] = [(tuple(c), tuple(r)) for c, r in d["ventricles"]]
        return cls(**d)


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    r = sum(((g - c) / rad) ** 2 for g, c, rad in zip(grids, center, radii))
    return r <= 1.0


def nucleus_geometry(spec: PhantomSpec) -> dict:
    """Absolute (center, radii) per structure after atrophy."""
    tc = np.asarray(spec.thalamus_center, float)
    out = {}
    for s in taxonomy.STRUCTURES:
        off, radii = spec.nuclei[s.abbrev]
        f = float(spec.atrophy.get(s.abbrev, 1.0))
        out[s.abbrev] = (tuple(tc + np.asarray(off, float)), tuple(f * np.asarray(radii, float)))
    return out


def validate_spec(spec: PhantomSpec) -> None:
    if set(spec.nuclei) != set(taxonomy.ABBREVS):
        raise PhantomSpecError(f"spec must define exactly the structures {taxonomy.ABBREVS}")
    if spec.noise_sd < 0 or spec.smoothing < 0:
        raise PhantomSpecError("noise_sd and smoothing must be >= 0")
    for f in spec.atrophy.values():
        if not 0 < f <= 1.5:
            raise PhantomSpecError(f"atrophy factor {f} out of range (0, 1.5]")
    for contrast in ("mprage", "wmn"):
        table = spec.intensity[contrast]
        levels = [table["wm"], table["gm"], table["csf"], *table["nuclei"].values()]
        if min(levels) < 0 or max(levels) > 1:
            raise PhantomSpecError(f"{contrast} intensity table must lie in [0, 1]")
    container = _ellipsoid(spec.shape, spec.thalamus_center, spec.thalamus_radii)
    claimed = np.zeros(spec.shape, dtype=np.int16)
    for abbrev, (c, r) in nucleus_geometry(spec).items():
        m = _ellipsoid(spec.shape, c, r)
        if (claimed[m] > 0).any():
            raise PhantomSpecError(f"structure {abbrev} overlaps another structure")
        if (m & ~container).any():
            raise PhantomSpecError(f"structure {abbrev} extends outside the thalamus ellipsoid")
        claimed[m] = 1


def render_labels(spec: PhantomSpec) -> np.ndarray:
    labels = np.zeros(spec.shape, dtype=np.int16)
    for abbrev, (c, r) in nucleus_geometry(spec).items():
        labels[_ellipsoid(spec.shape, c, r)] = taxonomy.code_of(abbrev)
    return labels


def generate_phantom(spec: PhantomSpec):
    """Render (mprage, wmn, labels, brain_mask) from one geometry.

    Each contrast is a piecewise-constant tissue image, Gaussian-smoothed
    (``smoothing`` = sigma in voxels), then corrupted by additive Gaussian
    noise inside the brain, clipped to [0, 1] and zeroed outside the brain.
    """
    validate_spec(spec)
    rng = np.random.default_rng(spec.seed)
    shape = spec.shape
    brain = _ellipsoid(shape, spec.brain_center, spec.brain_radii)
    inner = _ellipsoid(shape, spec.brain_center,
                       [max(r - spec.cortex_thickness, 1.0) for r in spec.brain_radii])
    csf = np.zeros(shape, bool)
    for c, r in spec.ventricles:
        csf |= _ellipsoid(shape, c, r)
    csf &= inner
    labels = render_labels(spec)
    labels[~brain] = 0

    lesion = np.zeros(shape, bool)
    thal = labels > 0
    if spec.lesions.count and thal.any():
        cand = np.argwhere(thal)
        for _ in range(spec.lesions.count):
            c = cand[rng.integers(len(cand))]
            lesion |= _ellipsoid(shape, c, [spec.lesions.radius] * 3)
        lesion &= thal

    out = {}
    for contrast in ("mprage", "wmn"):
        table = spec.intensity[contrast]
        img = np.zeros(shape, dtype=np.float64)
        img[brain] = table["gm"]
        img[inner] = table["wm"]
        img[csf] = table["csf"]
        for s in taxonomy.STRUCTURES:
            img[labels == s.code] = table["nuclei"][s.abbrev]
        img[lesion] += spec.lesions.offsets.get(contrast, 0.0)
        out[contrast] = img
    for contrast in ("mprage", "wmn"):
        img = out[contrast]
        if spec.smoothing > 0:
            img = ndimage.gaussian_filter(img, spec.smoothing)
        if spec.noise_sd > 0:
            img = img + rng.normal(0.0, spec.noise_sd, size=shape)
        img = np.where(brain, np.clip(img, 0.0, 1.0), 0.0)
        out[contrast] = Volume(img, spec.spacing, provenance="raw")
    return out["mprage"], out["wmn"], LabelMap(labels, spec.spacing), brain


def intensity_spread(volume: Volume, labelmap: LabelMap) -> float:
    """Standard deviation of per-structure mean intensities inside the thalamus."""
    means = [volume.data[labelmap.data == s.code].mean()
             for s in taxonomy.STRUCTURES if (labelmap.data == s.code).any()]
    return float(np.std(means))


# -- cohorts -------------------------------------------------------------------

AGE_RANGE = (25.0, 75.0)
ICV_MEAN, ICV_SD = 1.5e6, 1.2e5
AGE_SLOPE = 0.002  # fractional radius loss per year around age 50
RADIUS_JITTER = 0.04


def subject_spec(base: PhantomSpec, rng: np.random.Generator, age: float, icv: float,
                 atrophy: dict | None = None, seed: int = 0) -> PhantomSpec:
    """Per-subject geometry: head-size and age scaling, position and size jitter."""
    spec = copy.deepcopy(base)
    size = (icv / ICV_MEAN) ** (1 / 3) * (1.0 - AGE_SLOPE * (age - 50.0))
    spec.seed = int(seed)
    spec.brain_radii = tuple(r * (icv / ICV_MEAN) ** (1 / 3) for r in base.brain_radii)
    shift = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-0.5, 0.5)])
    spec.thalamus_center = tuple(np.asarray(base.thalamus_center) + shift)
    nuclei = {}
    for abbrev, (off, radii) in base.nuclei.items():
        jit = size * np.exp(rng.normal(0.0, RADIUS_JITTER))
        off = tuple(np.asarray(off, float) + rng.uniform(-0.3, 0.3, 3))
        # default layout stays disjoint up to 1.2x growth
        nuclei[abbrev] = (off, tuple(min(jit, 1.15) * np.asarray(radii, float)))
    spec.nuclei = nuclei
    spec.atrophy = dict(atrophy or {})
    return spec


def cohort_columns(sources=("gt",)) -> list[str]:
    cols = ["subject_id", "diagnosis", "age_years", "icv_mm3"]
    for src in sources:
        cols += [f"{src}_{a}_mm3" for a in (*taxonomy.ABBREVS, "Thal")]
    return cols


def structure_volumes(labelmap: LabelMap, prefix: str = "gt") -> dict:
    vols = {f"{prefix}_{s.abbrev}_mm3": structure_volume_mm3(labelmap, s.code)
            for s in taxonomy.STRUCTURES}
    vols[f"{prefix}_Thal_mm3"] = float(np.count_nonzero(labelmap.data)) * np.prod(labelmap.spacing)
    return vols


def cohort_specs(n_controls: int, n_patients: int, base_spec: PhantomSpec | None = None,
                 atrophy: dict | None = None, seed: int = 0):
    """Yield (subject_id, diagnosis, age, icv, spec) for each cohort member.

    Ages are uniform on ``AGE_RANGE``; ICVs normal (``ICV_MEAN``,
    ``ICV_SD``). Patients (diagnosis 1) carry ``atrophy`` (structure ->
    radius factor). Subject ``i`` draws from ``default_rng([seed, i])``.
    """
    if n_controls < 2 or n_patients < 0 or (n_patients and n_patients < 2):
        raise PhantomSpecError("need at least 2 subjects per group")
    base = base_spec or PhantomSpec()
    validate_spec(base)
    for i in range(n_controls + n_patients):
        patient = i >= n_controls
        rng = np.random.default_rng([seed, i])
        age = float(rng.uniform(*AGE_RANGE))
        icv = float(rng.normal(ICV_MEAN, ICV_SD))
        spec = subject_spec(base, rng, age, icv, atrophy if patient else None,
                            seed=int(rng.integers(2**31)))
        yield f"sub-{i:03d}", int(patient), age, icv, spec


def generate_cohort(n_controls: int, n_patients: int, base_spec: PhantomSpec | None = None,
                    atrophy: dict | None = None, seed: int = 0, out_dir=None,
                    render: bool = True) -> pd.DataFrame:
    """Synthetic control/patient cohort with ground-truth structure volumes.

    See :func:`cohort_specs` for the sampling. With ``out_dir`` every
    subject is written under ``subjects/<id>/`` and the table to
    ``cohort.csv``. ``render=False`` skips image rendering and only
    rasterizes labels (ignored when writing to disk).
    """
    rows = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        (out_dir / "subjects").mkdir(parents=True, exist_ok=True)
        taxonomy.to_json(out_dir / "taxonomy.json")
    for sid, dx, age, icv, spec in cohort_specs(n_controls, n_patients, base_spec, atrophy, seed):
        if render or out_dir is not None:
            mprage, wmn, labels, brain = generate_phantom(spec)
        else:
            labels = LabelMap(render_labels(spec), spec.spacing)
        rows.append({"subject_id": sid, "diagnosis": dx, "age_years": age,
                     "icv_mm3": icv, **structure_volumes(labels)})
        if out_dir is not None:
            d = out_dir / "subjects" / sid
            d.mkdir(parents=True, exist_ok=True)
            save_volume(mprage, d / "mprage.nii.gz")
            save_volume(wmn, d / "wmn.nii.gz")
            save_labelmap(labels, d / "labels.nii.gz")
            save_mask(brain, mprage, d / "brain_mask.nii.gz")
            (d / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
    df = pd.DataFrame(rows, columns=cohort_columns())
    if out_dir is not None:
        df.to_csv(out_dir / "cohort.csv", index=False, float_format="%.6f")
    return df
