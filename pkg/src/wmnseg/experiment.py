"""Desk-scale phantom study: train synthesis and both segmentation pipelines, score held-out phantoms."""

from __future__ import annotations

import copy
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine, metrics, phantom, taxonomy
from .models import NetConfig
from .preprocess import contrast_stretch

log = logging.getLogger(__name__)


def phantom_synthesis_config(seed: int = 0, **overrides) -> engine.TrainConfig:
    kw = dict(task="synthesis", epochs=10, batch_size=5, seed=seed,
              net=NetConfig(depth=4, base_channels=16, window=(64, 64)),
              windows_per_epoch=600,
              # the brain caps in the end slices cover under half of a 64x64 patch
              min_mask_fraction=0.25)
    kw.update(overrides)
    return engine.TrainConfig(**kw)


def phantom_segmentation_config(seed: int = 0, **overrides) -> engine.TrainConfig:
    kw = dict(task="segmentation", epochs=10, batch_size=5, seed=seed,
              net=NetConfig(depth=4, base_channels=16, window=(96, 96)))
    kw.update(overrides)
    return engine.TrainConfig(**kw)


@dataclass
class StudyConfig:
    seed: int = 0
    n_train: int = 24
    n_val: int = 4
    n_test: int = 8
    base_spec: phantom.PhantomSpec | None = None
    synthesis: engine.TrainConfig | None = None
    segmentation: engine.TrainConfig | None = None
    # input used to train the SCS segmenter: "synthesized" or "true_wmn"
    scs_train_input: str = "synthesized"

    def __post_init__(self):
        if self.synthesis is None:
            self.synthesis = phantom_synthesis_config(self.seed)
        if self.segmentation is None:
            self.segmentation = phantom_segmentation_config(self.seed)
        if self.scs_train_input not in ("synthesized", "true_wmn"):
            raise ValueError("scs_train_input must be 'synthesized' or 'true_wmn'")


@dataclass
class PhantomSubject:
    subject_id: str
    mprage: object
    wmn: object
    labels: object
    brain: np.ndarray


def make_subjects(n: int, seed: int, base_spec=None) -> list[PhantomSubject]:
    """Render ``n`` jittered control phantoms, contrast-stretched inside the brain mask."""
    out = []
    for sid, _, _, _, spec in phantom.cohort_specs(n, 0, base_spec, seed=seed):
        mprage, wmn, labels, brain = phantom.generate_phantom(spec)
        out.append(PhantomSubject(sid, contrast_stretch(mprage, brain),
                                  contrast_stretch(wmn, brain), labels, brain))
    return out


@dataclass
class StudyResult:
    synthesis_scores: list
    tables: dict                       # "NCS"/"SCS" -> cohort table
    checkpoints: dict                  # name -> Checkpoint
    timings: dict = field(default_factory=dict)
    label_checksums: dict = field(default_factory=dict)

    def synthesis_mean(self) -> dict:
        return {k: float(np.mean([getattr(s, k) for s in self.synthesis_scores]))
                for k in ("rmse", "psnr", "ssim")}

    def summary(self) -> dict:
        out = {"synthesis": self.synthesis_mean(), "timings": self.timings}
        for name, t in self.tables.items():
            out[name] = {
                "thalamus_dice": float(t.loc["Thal", "dice_mean"]),
                "mean_structure_dice": metrics.mean_dice(t),
                "small_structure_dice": metrics.mean_dice(t, taxonomy.SMALL_STRUCTURES),
            }
        return out


def run_study(config: StudyConfig, out_dir=None) -> StudyResult:
    """Train synthesis, NCS and SCS networks on phantoms and score the test split."""
    t_start = time.perf_counter()
    out_dir = Path(out_dir) if out_dir is not None else None
    n = config.n_train + config.n_val + config.n_test
    subjects = make_subjects(n, config.seed, config.base_spec)
    tr = subjects[:config.n_train]
    va = subjects[config.n_train:config.n_train + config.n_val]
    te = subjects[config.n_train + config.n_val:]
    timings = {}

    def sub(s, image, target=None):
        return engine.Subject(s.subject_id, image, s.brain, s.labels, target)

    def cfg(base, split_tr, split_va):
        c = copy.deepcopy(base)
        c.train_subjects = tuple(s.subject_id for s in split_tr)
        c.val_subjects = tuple(s.subject_id for s in split_va)
        return c

    def where(name):
        return None if out_dir is None else out_dir / name

    t0 = time.perf_counter()
    syn_ckpt = engine.train(cfg(config.synthesis, tr, va),
                            [sub(s, s.mprage, s.wmn) for s in tr],
                            [sub(s, s.mprage, s.wmn) for s in va], where("synthesis"))
    timings["train_synthesis"] = time.perf_counter() - t0
    syn_model = syn_ckpt.model(best=True)

    t0 = time.perf_counter()
    synthesized = {s.subject_id: engine.predict_synthesis(syn_model, s.mprage, s.brain)
                   for s in subjects}
    timings["synthesize_all"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    ncs_ckpt = engine.train(cfg(config.segmentation, tr, va),
                            [sub(s, s.mprage) for s in tr], [sub(s, s.mprage) for s in va],
                            where("ncs"))
    timings["train_ncs"] = time.perf_counter() - t0

    def scs_input(s):
        return synthesized[s.subject_id] if config.scs_train_input == "synthesized" else s.wmn

    t0 = time.perf_counter()
    scs_ckpt = engine.train(cfg(config.segmentation, tr, va),
                            [sub(s, scs_input(s)) for s in tr], [sub(s, scs_input(s)) for s in va],
                            where("scs"))
    timings["train_scs"] = time.perf_counter() - t0

    models = {
        "NCS": {"segmentation": ncs_ckpt.model(best=True)},
        "SCS": {"segmentation": scs_ckpt.model(best=True), "synthesis": syn_model},
    }
    syn_scores = [metrics.synthesis_metrics(s.wmn, synthesized[s.subject_id], s.brain,
                                            s.subject_id) for s in te]
    tables, checks = {}, {}
    t0 = time.perf_counter()
    for mode, m in models.items():
        scores = []
        for s in te:
            res = engine.run_pipeline(mode, m, s.mprage, s.brain)
            scores.append(metrics.score_subject(s.labels, res.labelmap, res.thalamus_mask,
                                                s.subject_id))
            checks[f"{mode}/{s.subject_id}"] = hashlib.sha256(
                np.ascontiguousarray(res.labelmap.data).tobytes()).hexdigest()
        tables[mode] = metrics.score_cohort(scores)
    timings["inference"] = time.perf_counter() - t0
    timings["total"] = time.perf_counter() - t_start
    return StudyResult(syn_scores, tables,
                       {"synthesis": syn_ckpt, "ncs": ncs_ckpt, "scs": scs_ckpt},
                       timings, checks)
