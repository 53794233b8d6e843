"""Acceptance criteria 1-9. Each test prints one PASS/FAIL line."""

import hashlib
import time

import numpy as np
import pytest
import torch
import yaml

from wmnseg import experiment, losses, metrics, phantom, stats, taxonomy
from wmnseg.models import FeatureExtractor
from wmnseg.sampler import AugmentationParams, Window2p5D, augment, extract_segmentation_slabs, stitch
from wmnseg.volume import LabelMap, Volume

from test_cli import SMALL, run_pipeline
from test_stats import oracle_ancova, oracle_ba, random_cohort, t_two_sided_p


# -- 1. loss gradients ---------------------------------------------------------------

def _probs(rng, shape):
    """Random interior class probabilities along dim 1."""
    x = rng.uniform(0.05, 1.0, shape)
    return x / x.sum(axis=1, keepdims=True)


def _synthesis_pattern(target, extractor):
    """Kink pattern of the synthesis loss: L1 signs, ReLU signs, max-pool winners."""

    def pattern(t):
        parts = [(target - t).flatten() > 0]
        x = t.expand(-1, 3, -1, -1)
        for layer in extractor.features:
            if isinstance(layer, torch.nn.ReLU):
                parts.append(x.flatten() > 0)
                x = layer(x)
            elif isinstance(layer, torch.nn.MaxPool2d):
                x, idx = torch.nn.functional.max_pool2d(x, 2, 2, return_indices=True)
                parts.append(idx.flatten())
            else:
                x = layer(x)
        return torch.cat([p.long() for p in parts]).numpy()

    return pattern


def test_criterion_1_loss_gradients(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    extractor = FeatureExtractor("fixed-random", 7).double()
    worst = {}
    for i in range(10):
        g_bin = torch.from_numpy((rng.random((2, 8, 8)) < 0.4).astype(np.float64))
        p = rng.uniform(0.05, 0.95, (2, 8, 8))
        worst["soft_dice"] = max(worst.get("soft_dice", 0), losses.gradient_check(
            lambda t: losses.soft_dice_loss(t, g_bin).total, p, seed=i))

        lab = rng.integers(0, 13, (2, 6, 6))
        g = torch.nn.functional.one_hot(torch.from_numpy(lab), 13).permute(0, 3, 1, 2).double()
        p = _probs(rng, (2, 13, 6, 6))
        worst["multilabel_dice"] = max(worst.get("multilabel_dice", 0), losses.gradient_check(
            lambda t: losses.multilabel_dice_loss(t, g).total, p, seed=i))

        w = losses.class_weights(rng.integers(1, 100, 13))
        worst["wcce"] = max(worst.get("wcce", 0), losses.gradient_check(
            lambda t: losses.wcce_loss(t, g, w).total, p, seed=i))

        target = torch.from_numpy(rng.random((1, 1, 16, 16)))
        syn = rng.random((1, 1, 16, 16))
        worst["synthesis"] = max(worst.get("synthesis", 0), losses.gradient_check(
            lambda t: losses.synthesis_loss(target, t, extractor).total, syn, seed=i,
            pattern=_synthesis_pattern(target, extractor)))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s"
    criterion(1, ok, detail)
    assert ok, detail


# -- 2. loss bounds ------------------------------------------------------------------

def test_criterion_2_loss_bounds(criterion):
    rng = np.random.default_rng(200)
    extractor = FeatureExtractor("fixed-random", 7)
    C = 12
    bad = []
    for i in range(1000):
        lab = rng.integers(0, 13, (1, 6, 6))
        g = torch.nn.functional.one_hot(torch.from_numpy(lab), 13).permute(0, 3, 1, 2).float()
        p = torch.from_numpy(_probs(rng, (1, 13, 6, 6))).float()
        ml = losses.multilabel_dice_loss(p, g).item()
        if not -C / 2 <= ml <= 0:
            bad.append(("multilabel", ml))
        gb = torch.from_numpy(rng.random((1, 8, 8)) < rng.random()).float()
        pb = torch.from_numpy(rng.random((1, 8, 8))).float()
        sd = losses.soft_dice_loss(pb, gb).item()
        if not -1 <= sd <= 0:
            bad.append(("soft", sd))
        wc = losses.wcce_loss(p, g, np.ones(13)).item()
        if wc < 0:
            bad.append(("wcce", wc))
        if i % 10 == 0:
            a = torch.rand((2, 1, 16, 16), generator=torch.Generator().manual_seed(i))
            b = torch.rand((2, 1, 16, 16), generator=torch.Generator().manual_seed(i + 1))
            sl = losses.synthesis_loss(a, b, extractor).item()
            if sl < 0:
                bad.append(("synthesis", sl))
    # equality cases
    lab = np.tile(np.arange(13), 3).reshape(1, 3, 13)
    g = torch.nn.functional.one_hot(torch.from_numpy(lab), 13).permute(0, 3, 1, 2).float()
    eq = {
        "multilabel": losses.multilabel_dice_loss(g, g).item() - (-C / 2),
        "soft": losses.soft_dice_loss(g[:, 1], g[:, 1]).item() - (-1),
        "wcce": losses.wcce_loss(g, g, np.ones(13)).item(),
    }
    a = torch.rand((2, 1, 16, 16), generator=torch.Generator().manual_seed(0))
    eq["synthesis"] = losses.synthesis_loss(a, a, extractor).item()
    ok = not bad and all(abs(v) <= 1e-3 for v in eq.values())
    detail = f"{len(bad)} bound violations; equality gaps " + \
        ", ".join(f"{k} {abs(v):.1e}" for k, v in eq.items())
    criterion(2, ok, detail)
    assert ok, detail


# -- 3. metric oracles ---------------------------------------------------------------

def test_criterion_3_metric_oracles(criterion):
    rng = np.random.default_rng(300)
    mismatches = 0
    for _ in range(200):
        g = rng.random((16, 16, 16)) < rng.uniform(0.05, 0.6)
        p = rng.random((16, 16, 16)) < rng.uniform(0.05, 0.6)
        gs = {tuple(i) for i in np.argwhere(g)}
        ps = {tuple(i) for i in np.argwhere(p)}
        d_ref = 2 * len(gs & ps) / (len(gs) + len(ps))
        vd_ref = abs(len(gs) - len(ps)) / len(gs) * 100
        mismatches += metrics.dice(g, p) != d_ref
        mismatches += metrics.volume_difference(g, p) != vd_ref
    psnr_err = 0.0
    ssim_err = 0.0
    for _ in range(50):
        w = rng.random((16, 16, 4))
        s = np.clip(w + rng.normal(0, rng.uniform(1e-4, 0.3), w.shape), 0, 1)
        m = rng.random(w.shape) < 0.7
        r = metrics.synthesis_metrics(w, s, m)
        if r.rmse > 1e-5:
            psnr_err = max(psnr_err, abs(r.psnr + 20 * np.log10(r.rmse)))
        ssim_err = max(ssim_err, abs(metrics.synthesis_metrics(w, w, m).ssim - 1))
    ok = mismatches == 0 and psnr_err < 1e-9 and ssim_err < 1e-12
    detail = f"{mismatches} Dice/VD mismatches, PSNR err {psnr_err:.1e}, |SSIM(W,W)-1| {ssim_err:.1e}"
    criterion(3, ok, detail)
    assert ok, detail


# -- 4. stats oracles ----------------------------------------------------------------

def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def test_criterion_4_stats_oracles(criterion):
    rng = np.random.default_rng(400)
    worst = {"bland_altman": 0.0, "paired_ttest": 0.0, "ancova": 0.0}
    for _ in range(50):
        y, g, age, icv = random_cohort(rng, n=45, effect=rng.uniform(-40, 40))
        pred = y * rng.uniform(0.9, 1.1) + rng.normal(0, 20, 45)
        ba = stats.bland_altman(y, pred)
        ref = oracle_ba(list(y), list(pred))
        for got, exp in zip((ba.sd, ba.rpc_pct, ba.cv_pct, ba.pearson_r), ref[1:]):
            worst["bland_altman"] = max(worst["bland_altman"], _rel(got, exp))
        worst["bland_altman"] = max(worst["bland_altman"], abs(ba.bias - ref[0]) / ref[1])
        tt = stats.paired_ttest(pred, y)
        d = pred - y
        t_ref = d.mean() / (np.sqrt(np.sum((d - d.mean()) ** 2) / 44) / np.sqrt(45))
        worst["paired_ttest"] = max(worst["paired_ttest"], _rel(tt.t, t_ref),
                                    _rel(tt.p, t_two_sided_p(t_ref, 44)))
        an = stats.ancova_diagnosis(y, g, age, icv)
        f, p, eff, ls0, _ = oracle_ancova(y, g, age, icv)
        worst["ancova"] = max(worst["ancova"], _rel(an.f, f), _rel(an.p, p), _rel(an.effect, eff),
                              _rel(an.ls_means[0], ls0))
    # hand examples
    b = stats.bland_altman([100.0] * 3, [98.0, 100.0, 102.0])
    t = stats.paired_ttest([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
    hand = (abs(b.bias) < 1e-12 and abs(b.sd - 2) < 1e-12 and abs(b.rpc - 3.92) < 1e-12
            and abs(b.cv_pct - 2.0) < 1e-12 and abs(t.t - 2 * np.sqrt(3)) < 1e-12
            and abs(t.p - 0.0742) < 5e-5 and t.df == 2
            and stats.paired_ttest([1.0, 2.0], [1.0, 2.0]).p == 1.0)
    ok = max(worst.values()) < 1e-8 and hand
    detail = ", ".join(f"{k} rel {v:.1e}" for k, v in worst.items()) + \
        f", hand examples {'ok' if hand else 'wrong'}"
    criterion(4, ok, detail)
    assert ok, detail


# -- 5. sampler round trip -----------------------------------------------------------

def test_criterion_5_sampler_round_trip(criterion):
    failures = 0
    specs = list(phantom.cohort_specs(20, 0, seed=500))
    for k, (_, _, _, _, spec) in enumerate(specs):
        lab = phantom.render_labels(spec)
        vol = Volume((lab > 0).astype(np.float32) + 0.1)
        size = (96, 96, 5) if k % 2 == 0 else (32, 32, 5)
        slabs = extract_segmentation_slabs(vol, LabelMap(lab), size, stride=None)
        onehot = [np.eye(13)[w.center_labels()].transpose(2, 0, 1) for w in slabs]
        back = np.argmax(stitch(slabs, onehot, lab.shape), axis=0)
        failures += not np.array_equal(back, lab)
    rng = np.random.default_rng(501)
    ident_fail = 0
    for _ in range(20):
        lab = rng.integers(0, 13, (24, 24, 5)).astype(np.int16)
        w = Window2p5D("s", (0, 0, 0), rng.random((1, 24, 24, 5)).astype(np.float32), lab)
        ident_fail += not np.array_equal(
            augment(w, AugmentationParams.identity(), rng).labels, lab)
    ok = failures == 0 and ident_fail == 0
    detail = f"{20 - failures}/20 phantoms reconstructed, identity augmentation {20 - ident_fail}/20"
    criterion(5, ok, detail)
    assert ok, detail


# -- 6, 7. phantom study -------------------------------------------------------------

_STUDIES = {}


def study(seed):
    if seed not in _STUDIES:
        _STUDIES[seed] = experiment.run_study(experiment.StudyConfig(seed=seed)).summary()
    return _STUDIES[seed]


@pytest.mark.slow
def test_criterion_6_phantom_end_to_end(criterion):
    s = study(0)
    syn, ncs, scs = s["synthesis"], s["NCS"], s["SCS"]
    minutes = s["timings"]["total"] / 60
    checks = {
        "SSIM": syn["ssim"] >= 0.85,
        "PSNR": syn["psnr"] >= 20,
        "thalamus Dice": min(ncs["thalamus_dice"], scs["thalamus_dice"]) >= 0.85,
        "structure Dice": min(ncs["mean_structure_dice"], scs["mean_structure_dice"]) >= 0.55,
        "runtime": minutes <= 30,
    }
    ok = all(checks.values())
    detail = (f"SSIM {syn['ssim']:.3f}, PSNR {syn['psnr']:.1f} dB, thalamus Dice "
              f"NCS {ncs['thalamus_dice']:.3f} / SCS {scs['thalamus_dice']:.3f}, mean structure "
              f"Dice NCS {ncs['mean_structure_dice']:.3f} / SCS {scs['mean_structure_dice']:.3f}, "
              f"{minutes:.1f} min")
    if not ok:
        detail += "; failed: " + ", ".join(k for k, v in checks.items() if not v)
    criterion(6, ok, detail)
    assert ok, detail


@pytest.mark.slow
def test_criterion_7_scs_vs_ncs_small_structures(criterion):
    pairs = []
    for seed in (0, 1, 2):
        s = study(seed)
        pairs.append((s["NCS"]["small_structure_dice"], s["SCS"]["small_structure_dice"]))
    ncs = np.mean([p[0] for p in pairs])
    scs = np.mean([p[1] for p in pairs])
    wins = sum(b > a for a, b in pairs)
    ok = scs >= ncs - 0.02 and wins >= 2
    detail = (f"mean small-structure Dice NCS {ncs:.3f} / SCS {scs:.3f}, SCS higher in "
              f"{wins}/3 seeds (" + ", ".join(f"{a:.3f}->{b:.3f}" for a, b in pairs) + ")")
    criterion(7, ok, detail)
    assert ok, detail


# -- 8. synthetic cohort ANCOVA ------------------------------------------------------

def test_criterion_8_cohort_ancova(criterion):
    rep = stats.group_analysis(
        phantom.generate_cohort(20, 20, atrophy={"VLp": 0.85}, seed=0, render=False))
    lateral_p = rep.groups["lateral"].p
    vlp_p = rep.nuclei.get("lateral", {}).get("VLp")
    detected = "lateral" in rep.flagged_groups and vlp_p is not None and vlp_p.p < 0.05
    flags = {g: 0 for g in taxonomy.NUCLEI_GROUPS}
    for seed in range(1000, 1040):
        null = stats.group_analysis(phantom.generate_cohort(20, 20, seed=seed, render=False))
        for g in null.flagged_groups:
            flags[g] += 1
    calibrated = all(v <= 4 for v in flags.values())
    ok = detected and calibrated
    detail = (f"lateral p {lateral_p:.2g}, VLp p {vlp_p.p if vlp_p else float('nan'):.2g}; "
              "null flags/40: " + ", ".join(f"{g} {v}" for g, v in flags.items()))
    criterion(8, ok, detail)
    assert ok, detail


# -- 9. determinism ------------------------------------------------------------------

def _digests(root):
    out = {}
    for sub in ("syn", "ncs", "scs"):
        for name in ("final.pt", "best.pt"):
            out[f"{sub}/{name}"] = (root / sub / name).read_bytes()
    for sub in ("pred_ncs", "pred_scs", "eval", "stats", "report"):
        for f in sorted((root / sub).rglob("*")):
            if f.is_file() and f.name != "timings.json":  # wall-clock stage times
                out[f.relative_to(root).as_posix()] = f.read_bytes()
    return {k: hashlib.sha256(v).hexdigest() for k, v in out.items()}


@pytest.mark.slow
def test_criterion_9_determinism(criterion, tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump(SMALL))
    a, b = tmp_path / "a", tmp_path / "b"
    run_pipeline(a, cfg, seed=3)
    run_pipeline(b, cfg, seed=3)
    da, db = _digests(a), _digests(b)
    differ = sorted(k for k in da if da[k] != db.get(k))
    ok = set(da) == set(db) and not differ
    n_ckpt = sum(k.endswith(".pt") for k in da)
    detail = f"{len(da)} artifacts compared ({n_ckpt} checkpoints), {len(differ)} differ"
    if differ:
        detail += ": " + ", ".join(differ[:5])
    criterion(9, ok, detail)
    assert ok, detail
