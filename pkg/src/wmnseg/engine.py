"""Training loops for the synthesis and segmentation networks, and the NCS/SCS pipelines.

Randomness during training comes from streams derived from the run seed:
``default_rng([seed, epoch])`` orders the windows of an epoch and
``default_rng([seed, epoch, window])`` draws that window's augmentation.
Resuming from a checkpoint therefore needs no saved generator state, and
``k`` epochs + resume for ``m`` reproduces ``k + m`` straight epochs.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses
from .models import (FeatureExtractor, NetConfig, build_segmentation_model,
                     build_synthesis_model, state_checksum, windows_to_tensor)
from .sampler import (DEPTH, AugmentationParams, augment, extract_segmentation_slabs,
                      extract_synthesis_patches, materialize, segmentation_corners,
                      stitch, synthesis_corners)
from .taxonomy import N_CLASSES
from .volume import LabelMap, Volume, check_same_grid, load_labelmap, load_mask, load_volume

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
TASKS = ("synthesis", "segmentation")
DECAY_MODES = ("inverse_time", "weight_decay", "none")


class TrainingError(RuntimeError):
    pass


class PipelineError(RuntimeError):
    pass


def _default_augmentation(task: str) -> AugmentationParams:
    # segmentation: scaling and shearing only; synthesis adds in-plane and
    # through-plane rotations
    if task == "segmentation":
        return AugmentationParams(rotation_deg=(0.0, 0.0), through_plane_deg=(0.0, 0.0))
    return AugmentationParams(through_plane=True)


@dataclass
class TrainConfig:
    task: str = "segmentation"
    loss: str = "dice"
    epochs: int = 50
    batch_size: int = 10
    lr: float = 1e-3
    decay: float = 0.1
    decay_mode: str = "inverse_time"
    seed: int = 0
    net: NetConfig | None = None
    stride: int | None = None
    augment: bool = True
    augmentation: AugmentationParams | None = None
    windows_per_epoch: int | None = None
    min_mask_fraction: float = 0.5
    checkpoint_every: int = 1
    train_subjects: tuple = ()
    val_subjects: tuple = ()
    extractor: str = "fixed-random"
    extractor_seed: int = 7
    class_weighting: str = "inverse_frequency"
    threads: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.net is None:
            self.net = NetConfig(window=(192, 192) if self.task == "segmentation" else (64, 64))
        elif isinstance(self.net, dict):
            self.net = NetConfig(**self.net)
        if self.augmentation is None:
            self.augmentation = _default_augmentation(self.task)
        elif isinstance(self.augmentation, dict):
            self.augmentation = AugmentationParams(
                **{k: tuple(v) if isinstance(v, list) else v for k, v in self.augmentation.items()})
        self.train_subjects = tuple(self.train_subjects)
        self.val_subjects = tuple(self.val_subjects)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.decay < 0:
            raise ValueError("decay must be >= 0")
        if self.decay_mode not in DECAY_MODES:
            raise ValueError(f"decay_mode must be one of {DECAY_MODES}")
        if self.loss not in ("dice", "wcce"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.class_weighting not in ("inverse_frequency", "uniform"):
            raise ValueError(f"unknown class_weighting {self.class_weighting!r}")
        if self.windows_per_epoch is not None and self.windows_per_epoch < 1:
            raise ValueError("windows_per_epoch must be >= 1")
        overlap = set(self.train_subjects) & set(self.val_subjects)
        if overlap:
            raise ValueError(f"train and validation subjects overlap: {sorted(overlap)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"] = self.net.to_dict()
        d["augmentation"] = {k: list(v) if isinstance(v, tuple) else v
                             for k, v in asdict(self.augmentation).items()}
        d["train_subjects"] = list(self.train_subjects)
        d["val_subjects"] = list(self.val_subjects)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self, exclude=()) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in exclude}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def lr_at(self, epoch: int) -> float:
        """Learning rate of 0-based ``epoch``."""
        if self.decay_mode == "inverse_time":
            return self.lr / (1.0 + self.decay * epoch)
        return self.lr

    @property
    def margin(self) -> int:
        """Extra context slices each side so through-plane rotation never reads past the stack."""
        p = self.augmentation
        if self.task != "synthesis" or not self.augment or not p.through_plane:
            return 0
        tilt = max(abs(p.through_plane_deg[0]), abs(p.through_plane_deg[1]))
        return int(math.ceil(max(self.net.window) / 2 * math.tan(math.radians(tilt)))) + 1


# keys that may change between a checkpoint and its resumed run
_RESUME_FREE = ("epochs", "checkpoint_every", "threads")


@dataclass
class Subject:
    """One training or inference subject.

    ``image`` is the network input (MPRAGE, or WMn for SCS segmentation),
    ``target`` the paired WMn for synthesis, ``labels`` the structure labels.
    """

    subject_id: str
    image: Volume
    mask: np.ndarray
    labels: LabelMap | None = None
    target: Volume | None = None

    def __post_init__(self):
        self.mask = np.asarray(getattr(self.mask, "data", self.mask)).astype(bool)
        check_same_grid(self.image, self.mask, f"{self.subject_id}: image and mask")
        if self.labels is not None:
            check_same_grid(self.image, self.labels, f"{self.subject_id}: image and labels")
        if self.target is not None:
            check_same_grid(self.image, self.target, f"{self.subject_id}: image and target")

    @classmethod
    def from_dir(cls, path, image: str = "mprage", target: str | None = None,
                 subject_id: str | None = None) -> "Subject":
        """Read ``<image>.nii.gz``, ``brain_mask.nii.gz`` and (if present) ``labels.nii.gz``."""
        path = Path(path)
        img = load_volume(path / f"{image}.nii.gz", provenance="preprocessed")
        mask = load_mask(path / "brain_mask.nii.gz")
        lab = load_labelmap(path / "labels.nii.gz") if (path / "labels.nii.gz").exists() else None
        tgt = (load_volume(path / f"{target}.nii.gz", provenance="preprocessed")
               if target else None)
        return cls(subject_id or path.name, img, mask, lab, tgt)


@dataclass
class Checkpoint:
    config: TrainConfig
    model_state: dict
    optimizer_state: dict
    epoch: int  # completed epochs
    history: list = field(default_factory=list)
    best_state: dict | None = None
    best_epoch: int | None = None
    best_val: float | None = None
    class_weights: list | None = None
    rng: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()

    def model(self, best: bool = False) -> torch.nn.Module:
        state = self.best_state if best and self.best_state is not None else self.model_state
        net = _build(self.config)
        net.load_state_dict(state)
        net.eval()
        return net

    def checksum(self) -> str:
        """Digest of parameters, optimizer state and loss history (no wall times)."""
        h = hashlib.sha256()
        h.update(state_checksum(self.model_state).encode())
        opt = self.optimizer_state
        for pid in sorted(opt.get("state", {})):
            h.update(state_checksum({str(k): v for k, v in opt["state"][pid].items()}).encode())
        h.update(json.dumps(self.history, sort_keys=True).encode())
        if self.best_state is not None:
            h.update(state_checksum(self.best_state).encode())
        return h.hexdigest()

    def to_payload(self) -> dict:
        return {
            "version": self.version,
            "config": self.config.to_dict(),
            "config_hash": self.config_hash,
            "model_state": self.model_state,
            "optimizer_state": self.optimizer_state,
            "epoch": self.epoch,
            "history": self.history,
            "best_state": self.best_state,
            "best_epoch": self.best_epoch,
            "best_val": self.best_val,
            "class_weights": self.class_weights,
            "rng": self.rng,
        }

    def save(self, path) -> Path:
        """Write atomically: temp file in the target directory, then rename."""
        path = Path(path)
        if not path.parent.exists():
            raise OSError(f"checkpoint directory does not exist: {path.parent}")
        buf = io.BytesIO()
        torch.save(self.to_payload(), buf)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(buf.getvalue())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        d = torch.load(path, map_location="cpu", weights_only=False)
        if d.get("version") != CHECKPOINT_VERSION:
            raise TrainingError(f"{path}: unsupported checkpoint version {d.get('version')}")
        config = TrainConfig.from_dict(d["config"])
        if config.config_hash() != d["config_hash"]:
            raise TrainingError(f"{path}: config hash mismatch (file corrupted or edited)")
        return cls(config, d["model_state"], d["optimizer_state"], d["epoch"], d["history"],
                   d["best_state"], d["best_epoch"], d["best_val"], d["class_weights"], d["rng"],
                   d["version"])


def _build(config: TrainConfig) -> torch.nn.Module:
    if config.task == "segmentation":
        return build_segmentation_model(config.net, seed=config.seed)
    return build_synthesis_model(config.net, seed=config.seed)


def set_numeric_mode(threads: int = 1) -> None:
    """Single-threaded, deterministic torch kernels (needed for bit-identical reruns)."""
    torch.set_num_threads(int(threads))
    torch.use_deterministic_algorithms(True, warn_only=True)


# -- window bookkeeping ------------------------------------------------------------

class _WindowSet:
    """Lazy window index: (subject, corner) pairs materialized per batch."""

    def __init__(self, subjects, config: TrainConfig, margin: int):
        self.subjects = list(subjects)
        self.config = config
        self.margin = margin
        self.size = config.net.window
        self.index = []
        for si, s in enumerate(self.subjects):
            if config.task == "segmentation":
                if s.labels is None:
                    raise TrainingError(f"subject {s.subject_id} has no labels")
                corners = segmentation_corners(s.image.shape, self.size, config.stride, s.mask)
            else:
                if s.target is None:
                    raise TrainingError(f"subject {s.subject_id} has no synthesis target")
                # edge slices are centres too, exactly as at inference
                corners = synthesis_corners(s.image.shape, s.mask, self.size, config.stride,
                                            config.min_mask_fraction, replicate_edges=True)
            self.index += [(si, c) for c in corners]

    def __len__(self):
        return len(self.index)

    def get(self, i: int):
        si, corner = self.index[i]
        s = self.subjects[si]
        if self.config.task == "segmentation":
            return materialize([s.image.data], s.labels.data, corner, self.size, self.margin,
                               s.subject_id)
        return materialize([s.image.data, s.target.data], None, corner, self.size, self.margin,
                           s.subject_id)


def _one_hot(labels: np.ndarray, k: int = N_CLASSES) -> torch.Tensor:
    lab = torch.from_numpy(labels.astype(np.int64))
    return torch.nn.functional.one_hot(lab, k).permute(0, 3, 1, 2).to(torch.float32)


def _class_weights(subjects, config: TrainConfig) -> np.ndarray:
    if config.loss != "wcce" or config.class_weighting == "uniform":
        return np.ones(N_CLASSES)
    counts = np.zeros(N_CLASSES)
    for s in subjects:
        counts += np.bincount(s.labels.data.ravel(), minlength=N_CLASSES)[:N_CLASSES]
    return losses.class_weights(counts)


def _batch_loss(model, windows, config: TrainConfig, weights, extractor) -> losses.LossValue:
    if config.task == "segmentation":
        x = windows_to_tensor(windows)
        centers = np.stack([w.center_labels() for w in windows])
        thal_g = torch.from_numpy((centers > 0).astype(np.float32))
        nuc_g = _one_hot(centers)
        thal, nuc = model(x)
        return losses.segmentation_loss(thal, thal_g, nuc, nuc_g, config.loss, weights)
    x = windows_to_tensor(windows, channels=[0])
    target = torch.from_numpy(np.stack([w.center_image()[1] for w in windows]))
    pred = model(x)
    return losses.synthesis_loss(target[:, None], pred[:, None], extractor)


def _describe(windows) -> str:
    return ", ".join(f"{w.subject_id}@{w.corner}" for w in windows[:4]) + \
        (" ..." if len(windows) > 4 else "")


def _evaluate(model, wset: _WindowSet, config, weights, extractor) -> float:
    total, n = 0.0, 0
    with torch.no_grad():
        for b in range(0, len(wset), config.batch_size):
            batch = [wset.get(i).core() for i in range(b, min(b + config.batch_size, len(wset)))]
            total += _batch_loss(model, batch, config, weights, extractor).item() * len(batch)
            n += len(batch)
    return total / n


def train(config: TrainConfig, train_subjects, val_subjects=(), out_dir=None,
          resume: Checkpoint | str | Path | None = None) -> Checkpoint:
    """Train one network; returns the final checkpoint (``best_state`` holds the best-val weights).

    With ``out_dir`` the run writes ``final.pt``, ``best.pt`` and a
    line-delimited JSON ``train_log.jsonl``. ``resume`` continues a
    checkpoint trained with the same config up to ``config.epochs`` total.
    """
    train_subjects = list(train_subjects)
    val_subjects = list(val_subjects)
    if not train_subjects:
        raise TrainingError("empty training dataset")
    ids_t = {s.subject_id for s in train_subjects}
    ids_v = {s.subject_id for s in val_subjects}
    if ids_t & ids_v:
        raise TrainingError(f"train and validation subjects overlap: {sorted(ids_t & ids_v)}")
    set_numeric_mode(config.threads)

    margin = config.margin
    train_set = _WindowSet(train_subjects, config, margin)
    if len(train_set) == 0:
        raise TrainingError("empty training dataset: no windows extracted")
    val_set = _WindowSet(val_subjects, config, 0) if val_subjects else None

    model = _build(config)
    wd = config.decay if config.decay_mode == "weight_decay" else 0.0
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=wd)
    extractor = (FeatureExtractor(config.extractor, config.extractor_seed)
                 if config.task == "synthesis" else None)
    weights = _class_weights(train_subjects, config)

    ckpt = Checkpoint(config, model.state_dict(), opt.state_dict(), 0,
                      class_weights=weights.tolist())
    if resume is not None:
        prev = resume if isinstance(resume, Checkpoint) else Checkpoint.load(resume)
        if prev.config.config_hash(_RESUME_FREE) != config.config_hash(_RESUME_FREE):
            raise TrainingError("cannot resume: checkpoint was trained with a different config")
        if prev.epoch > config.epochs:
            raise TrainingError(f"checkpoint already has {prev.epoch} epochs > {config.epochs}")
        model.load_state_dict(prev.model_state)
        opt.load_state_dict(prev.optimizer_state)
        ckpt = copy.deepcopy(prev)
        ckpt.config = config

    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        if resume is None and log_path.exists():
            log_path.unlink()

    n_use = len(train_set) if config.windows_per_epoch is None \
        else min(config.windows_per_epoch, len(train_set))
    for epoch in range(ckpt.epoch, config.epochs):
        t0 = time.perf_counter()
        lr = config.lr_at(epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set))[:n_use]
        model.train()
        total = 0.0
        for b, start in enumerate(range(0, n_use, config.batch_size)):
            idx = order[start:start + config.batch_size]
            batch = []
            for i in idx:
                rng = np.random.default_rng([config.seed, epoch, int(i)])
                w = train_set.get(int(i))
                batch.append(augment(w, config.augmentation, rng) if config.augment else w.core())
            loss = _batch_loss(model, batch, config, weights, extractor)
            if not torch.isfinite(loss.total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {b} (windows {_describe(batch)})")
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            total += loss.item() * len(batch)
        train_loss = total / n_use
        model.eval()
        val_loss = _evaluate(model, val_set, config, weights, extractor) if val_set else None

        ckpt.epoch = epoch + 1
        ckpt.model_state = copy.deepcopy(model.state_dict())
        ckpt.optimizer_state = copy.deepcopy(opt.state_dict())
        record = {"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_loss": val_loss}
        ckpt.history.append(record)
        score = val_loss if val_loss is not None else train_loss
        if ckpt.best_val is None or score < ckpt.best_val:
            ckpt.best_val, ckpt.best_epoch = score, epoch
            ckpt.best_state = copy.deepcopy(model.state_dict())
        # training never draws from torch's global generator, so the seed and
        # epoch counter are the whole random state
        ckpt.rng = {"scheme": "default_rng([seed, epoch, window])", "seed": config.seed,
                    "next_epoch": ckpt.epoch}
        log.info("epoch %d lr %.3g train %.5f val %s", epoch, lr, train_loss, val_loss)
        if log_path is not None:
            with open(log_path, "a") as f:
                f.write(json.dumps({**record, "wall_time": time.perf_counter() - t0}) + "\n")
            last = ckpt.epoch == config.epochs
            if last or (config.checkpoint_every and ckpt.epoch % config.checkpoint_every == 0):
                ckpt.save(out_dir / "final.pt")
    if out_dir is not None:
        best = copy.copy(ckpt)
        best.model_state = ckpt.best_state
        best.save(out_dir / "best.pt")
    return ckpt


# -- inference -----------------------------------------------------------------------

def _as_model(m, task: str):
    if m is None:
        return None
    if isinstance(m, (str, Path)):
        m = Checkpoint.load(m)
    if isinstance(m, Checkpoint):
        if m.config.task != task:
            raise PipelineError(f"expected a {task} checkpoint, got {m.config.task}")
        m = m.model(best=True)
    m.eval()
    return m


def _forward_batches(fn, windows, batch_size: int):
    outs = []
    with torch.no_grad():
        for b in range(0, len(windows), batch_size):
            outs.append(fn(windows_to_tensor(windows[b:b + batch_size])))
    return outs


def predict_synthesis(model, mprage: Volume, brain_mask, stride=None,
                      batch_size: int = 16) -> Volume:
    """Patch-wise synthesis over every slice, stitched and masked to the brain."""
    model = _as_model(model, "synthesis")
    mask = np.asarray(getattr(brain_mask, "data", brain_mask)).astype(bool)
    check_same_grid(mprage, mask, "image and brain mask")
    size = model.config.window
    patches = extract_synthesis_patches(mprage, None, mask, (*size, DEPTH), stride,
                                        min_mask_fraction=0.0, replicate_edges=True)
    preds = np.concatenate([o.numpy() for o in _forward_batches(model, patches, batch_size)])
    out = stitch(patches, preds[:, None], mprage.shape, normalize=False, fill=[0.0])[0]
    out = np.where(mask, np.clip(out, 0.0, 1.0), 0.0)
    return Volume(out, mprage.spacing, mprage.affine, provenance="synthesized")


def argmax_labels(prob: np.ndarray) -> np.ndarray:
    """Per-voxel argmax over axis 0; ties go to the lowest class code."""
    return np.argmax(prob, axis=0).astype(np.int16)


@dataclass
class LabelPrediction:
    thalamus_mask: np.ndarray
    labelmap: LabelMap          # raw nuclei-head argmax (reported)
    labelmap_gated: LabelMap    # structure argmax inside the thalamus mask, 0 outside
    thalamus_prob: np.ndarray
    nuclei_prob: np.ndarray


def predict_labels(model, volume: Volume, mask=None, stride=None,
                   batch_size: int = 16) -> LabelPrediction:
    model = _as_model(model, "segmentation")
    size = model.config.window
    m = None if mask is None else np.asarray(getattr(mask, "data", mask)).astype(bool)
    slabs = extract_segmentation_slabs(volume, None, (*size, DEPTH), stride, m)
    outs = _forward_batches(model, slabs, batch_size)
    thal = np.concatenate([t.numpy() for t, _ in outs])
    nuc = np.concatenate([n.numpy() for _, n in outs])
    bg = np.zeros(N_CLASSES)
    bg[0] = 1.0
    thal_p = stitch(slabs, thal[:, None], volume.shape, normalize=False, fill=[0.0])[0]
    nuc_p = stitch(slabs, nuc, volume.shape, normalize=True, fill=bg)
    thal_mask = thal_p >= 0.5
    raw = argmax_labels(nuc_p)
    gated = np.where(thal_mask, argmax_labels(nuc_p[1:]) + 1, 0).astype(np.int16)
    return LabelPrediction(thal_mask, LabelMap(raw, volume.spacing, volume.affine),
                           LabelMap(gated, volume.spacing, volume.affine), thal_p, nuc_p)


@dataclass
class PipelineResult:
    mode: str
    thalamus_mask: np.ndarray
    labelmap: LabelMap
    labelmap_gated: LabelMap
    synthesized: Volume | None = None
    timings: dict = field(default_factory=dict)


def run_pipeline(mode: str, models: dict, mprage: Volume, brain_mask=None,
                 batch_size: int = 16) -> PipelineResult:
    """NCS segments ``mprage`` directly; SCS synthesizes WMn first and segments that.

    ``models`` maps ``"synthesis"`` / ``"segmentation"`` to a module, a
    :class:`Checkpoint`, or a checkpoint path.
    """
    mode = mode.upper()
    if mode not in ("NCS", "SCS"):
        raise PipelineError(f"mode must be NCS or SCS, got {mode!r}")
    if models.get("segmentation") is None:
        raise PipelineError(f"{mode} requires a segmentation checkpoint; none given")
    if mode == "SCS" and models.get("synthesis") is None:
        raise PipelineError("SCS requires a synthesis checkpoint; none given")
    if brain_mask is None:
        brain_mask = mprage.data != 0
    timings = {}
    synthesized = None
    seg_input = mprage
    if mode == "SCS":
        t0 = time.perf_counter()
        synthesized = predict_synthesis(models["synthesis"], mprage, brain_mask,
                                        batch_size=batch_size)
        timings["synthesis"] = time.perf_counter() - t0
        seg_input = synthesized
    t0 = time.perf_counter()
    pred = predict_labels(models["segmentation"], seg_input, brain_mask, batch_size=batch_size)
    timings["segmentation"] = time.perf_counter() - t0
    return PipelineResult(mode, pred.thalamus_mask, pred.labelmap, pred.labelmap_gated,
                          synthesized, timings)
