"""Agreement and group-difference statistics for structure volumes.

Bland-Altman agreement (bias, limits, RPC, CV, Pearson), paired t-tests,
and ANCOVA for a diagnosis effect adjusted for age and ICV, run first on
nuclei-group volumes and then on the nuclei of flagged groups. Functions
report raw p-values; choosing a threshold is the caller's job.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats as sps

from . import taxonomy

F_CAP = 1e12
Z95 = 1.96


class StatsError(ValueError):
    pass


def _vec(x, name) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).ravel()
    if not np.isfinite(a).all():
        raise StatsError(f"{name} contains non-finite values")
    return a


# -- agreement -----------------------------------------------------------------------

@dataclass
class BlandAltmanResult:
    n: int
    bias: float
    sd: float
    loa_low: float
    loa_high: float
    rpc: float
    rpc_pct: float
    cv_pct: float
    pearson_r: float
    grand_mean: float

    def to_dict(self) -> dict:
        return asdict(self)


def bland_altman(true_volumes, predicted_volumes) -> BlandAltmanResult:
    """Agreement of predicted with true values; differences are predicted - true.

    SD is the sample SD of the differences; RPC = 1.96 SD; RPC% and CV%
    are RPC and SD as percentages of the grand mean of pair means.
    """
    t = _vec(true_volumes, "true_volumes")
    p = _vec(predicted_volumes, "predicted_volumes")
    if t.shape != p.shape:
        raise StatsError(f"paired samples differ in length: {t.size} vs {p.size}")
    if t.size < 2:
        raise StatsError("need at least 2 pairs")
    d = p - t
    grand = float(np.mean((p + t) / 2))
    if grand == 0:
        raise StatsError("grand mean is zero; CV undefined")
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    rpc = Z95 * sd
    if np.ptp(t) == 0 or np.ptp(p) == 0:
        r = float("nan")  # correlation undefined for a constant sample
    else:
        r = float(np.corrcoef(t, p)[0, 1])
    return BlandAltmanResult(t.size, bias, sd, bias - rpc, bias + rpc, rpc,
                             rpc / abs(grand) * 100, sd / abs(grand) * 100, r, grand)


# -- paired t-test -------------------------------------------------------------------

@dataclass
class TTestResult:
    t: float
    p: float
    df: int
    mean_diff: float
    significant: bool

    def to_dict(self) -> dict:
        return asdict(self)


def paired_ttest(sample_a, sample_b, alpha: float = 0.05) -> TTestResult:
    """Two-sided paired t-test on a - b with n - 1 degrees of freedom."""
    a = _vec(sample_a, "sample_a")
    b = _vec(sample_b, "sample_b")
    if a.shape != b.shape:
        raise StatsError(f"paired samples differ in length: {a.size} vs {b.size}")
    n = a.size
    if n < 2:
        raise StatsError("need at least 2 pairs")
    d = a - b
    mean = float(d.mean())
    if np.ptp(d) == 0:
        if mean == 0:
            return TTestResult(0.0, 1.0, n - 1, 0.0, False)
        raise StatsError("degenerate differences: zero variance with nonzero mean")
    se = d.std(ddof=1) / np.sqrt(n)
    t = mean / se
    p = float(2 * sps.t.sf(abs(t), n - 1))
    return TTestResult(float(t), p, n - 1, mean, p < alpha)


# -- ANCOVA --------------------------------------------------------------------------

@dataclass
class AncovaResult:
    f: float
    p: float
    df: tuple
    n: int
    ls_means: dict       # diagnosis (0, 1) -> adjusted mean at covariate means
    ls_se: dict          # diagnosis -> standard error
    effect: float        # adjusted patient - control difference
    effect_se: float
    rss_full: float
    rss_reduced: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["df"] = list(self.df)
        d["ls_means"] = {str(k): v for k, v in self.ls_means.items()}
        d["ls_se"] = {str(k): v for k, v in self.ls_se.items()}
        return d


def ancova_diagnosis(volumes, diagnosis, age, icv) -> AncovaResult:
    """OLS of volume on [1, diagnosis, age, ICV]; F-test for dropping diagnosis.

    F = (RSS_reduced - RSS_full) / (RSS_full / (n - 4)) with df (1, n - 4).
    On noiseless data with a real effect F is capped at ``F_CAP``; when
    both models fit exactly F = 0 and p = 1. LS means are the fitted
    values at each diagnosis with covariates at their sample means.
    """
    y = _vec(volumes, "volumes")
    g = _vec(diagnosis, "diagnosis")
    a = _vec(age, "age")
    c = _vec(icv, "icv")
    n = y.size
    if not (g.size == a.size == c.size == n):
        raise StatsError("volumes, diagnosis, age and icv must have equal length")
    if n < 5:
        raise StatsError(f"need at least 5 subjects, got {n}")
    if not set(np.unique(g)) <= {0.0, 1.0}:
        raise StatsError("diagnosis must be coded 0 (control) / 1 (patient)")
    # centred, scaled covariates: same fit, better conditioning, and the
    # intercept becomes the control mean at covariate means
    cov = np.column_stack([a, c])
    sd = cov.std(axis=0)
    sd[sd == 0] = 1.0
    z = (cov - cov.mean(axis=0)) / sd
    X = np.column_stack([np.ones(n), g, z])
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise StatsError("design matrix [1, diagnosis, age, icv] is rank deficient")
    Xr = X[:, [0, 2, 3]]
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    beta_r, *_ = np.linalg.lstsq(Xr, y, rcond=None)
    rss_f = float(np.sum((y - X @ beta) ** 2))
    rss_r = float(np.sum((y - Xr @ beta_r) ** 2))
    dof = n - 4
    tiny = 1e-20 * max(1.0, float(np.sum(y ** 2)))
    if rss_f <= tiny:
        if rss_r - rss_f <= tiny:
            f, p = 0.0, 1.0
        else:
            f = F_CAP
            p = float(sps.f.sf(f, 1, dof))
    else:
        f = max(0.0, (rss_r - rss_f) / (rss_f / dof))
        f = min(f, F_CAP)
        p = float(sps.f.sf(f, 1, dof))
    sigma2 = rss_f / dof
    cov_b = sigma2 * np.linalg.inv(X.T @ X)
    ls, se = {}, {}
    for lvl in (0, 1):
        v = np.array([1.0, lvl, 0.0, 0.0])
        ls[lvl] = float(v @ beta)
        se[lvl] = float(np.sqrt(max(v @ cov_b @ v, 0.0)))
    return AncovaResult(float(f), p, (1, dof), n, ls, se, float(beta[1]),
                        float(np.sqrt(max(cov_b[1, 1], 0.0))), rss_f, rss_r)


# -- cohort tables -------------------------------------------------------------------

BASE_COLUMNS = ("subject_id", "diagnosis", "age_years", "icv_mm3")


def volume_column(source: str, abbrev: str) -> str:
    return f"{source}_{abbrev}_mm3"


def validate_cohort(df: pd.DataFrame, sources=("gt",)) -> pd.DataFrame:
    missing = [c for c in BASE_COLUMNS if c not in df.columns]
    for src in sources:
        missing += [volume_column(src, a) for a in taxonomy.ABBREVS
                    if volume_column(src, a) not in df.columns]
    if missing:
        raise StatsError(f"cohort table is missing columns: {missing}")
    if not set(df["diagnosis"].unique()) <= {0, 1}:
        raise StatsError("diagnosis must be 0 (control) or 1 (patient)")
    if (df["age_years"] <= 0).any() or (df["icv_mm3"] <= 0).any():
        raise StatsError("age and ICV must be positive")
    vols = [volume_column(s, a) for s in sources for a in taxonomy.ABBREVS]
    if (df[vols] < 0).any().any():
        raise StatsError("structure volumes must be nonnegative")
    return df


def read_cohort(path, sources=("gt",)) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"cohort table not found: {path}")
    df = pd.read_csv(path)
    df["diagnosis"] = df["diagnosis"].astype(int)
    return validate_cohort(df, sources)


def sources_in(df: pd.DataFrame) -> list[str]:
    out = []
    for c in df.columns:
        if c.endswith("_mm3") and c.count("_") == 2 and c not in BASE_COLUMNS:
            src = c.split("_")[0]
            if src not in out:
                out.append(src)
    return out


def group_volume(df: pd.DataFrame, group: str, source: str = "gt") -> np.ndarray:
    cols = [volume_column(source, s.abbrev) for s in taxonomy.members(group)]
    return df[cols].sum(axis=1).to_numpy(np.float64)


@dataclass
class GroupReport:
    source: str
    alpha: float
    groups: dict = field(default_factory=dict)    # group -> AncovaResult
    nuclei: dict = field(default_factory=dict)    # group -> {abbrev -> AncovaResult}

    @property
    def flagged_groups(self) -> list[str]:
        return [g for g, r in self.groups.items() if r.p < self.alpha]

    def flagged_nuclei(self) -> list[str]:
        return [a for res in self.nuclei.values() for a, r in res.items() if r.p < self.alpha]

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "alpha": self.alpha,
            "groups": {g: r.to_dict() for g, r in self.groups.items()},
            "nuclei": {g: {a: r.to_dict() for a, r in res.items()}
                       for g, res in self.nuclei.items()},
            "flagged_groups": self.flagged_groups,
            "flagged_nuclei": self.flagged_nuclei(),
        }


def group_analysis(cohort: pd.DataFrame, source: str = "gt", alpha: float = 0.05,
                   groups=taxonomy.NUCLEI_GROUPS) -> GroupReport:
    """Stage 1: ANCOVA per nuclei group (summed volumes). Stage 2: per nucleus inside flagged groups."""
    validate_cohort(cohort, (source,))
    if cohort["diagnosis"].nunique() < 2:
        raise StatsError("group analysis needs both diagnoses in the cohort")
    dx = cohort["diagnosis"].to_numpy(float)
    age = cohort["age_years"].to_numpy(float)
    icv = cohort["icv_mm3"].to_numpy(float)
    rep = GroupReport(source, alpha)
    for grp in groups:
        rep.groups[grp] = ancova_diagnosis(group_volume(cohort, grp, source), dx, age, icv)
    for grp in rep.flagged_groups:
        rep.nuclei[grp] = {
            s.abbrev: ancova_diagnosis(cohort[volume_column(source, s.abbrev)].to_numpy(float),
                                       dx, age, icv)
            for s in taxonomy.members(grp)}
    return rep


def bland_altman_table(cohort: pd.DataFrame, source: str, reference: str = "gt",
                       structures=(*taxonomy.ABBREVS, "Thal")) -> tuple[pd.DataFrame, dict]:
    """Scatter rows (structure, subject, mean, difference) and per-structure summaries."""
    rows, summary = [], {}
    for a in structures:
        t = cohort[volume_column(reference, a)].to_numpy(float)
        p = cohort[volume_column(source, a)].to_numpy(float)
        res = bland_altman(t, p)
        summary[a] = res
        for sid, ti, pi in zip(cohort["subject_id"], t, p):
            rows.append({"structure": a, "subject_id": sid, "mean_mm3": (ti + pi) / 2,
                         "diff_mm3": pi - ti, "bias": res.bias, "loa_low": res.loa_low,
                         "loa_high": res.loa_high})
    return pd.DataFrame(rows), summary
