"""scikit-learn style wrappers around training and inference.

``X`` is a list of (volume, brain mask) pairs (see
:func:`wmnseg.validation.check_inputs`). Hyperparameters mirror
:class:`wmnseg.engine.TrainConfig`; fitted state ends in an underscore.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import engine, metrics
from .models import NetConfig
from .validation import check_inputs, check_targets


class _NetworkEstimator(BaseEstimator):
    _task = None

    def _config(self, n_train: int) -> engine.TrainConfig:
        net = NetConfig(depth=self.depth, base_channels=self.base_channels,
                        window=tuple(self.window))
        kw = dict(task=self._task, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                  decay=self.decay, decay_mode=self.decay_mode, seed=self.random_state,
                  net=net, stride=self.stride, augment=self.augment,
                  windows_per_epoch=self.windows_per_epoch,
                  train_subjects=tuple(f"train-{i}" for i in range(n_train)))
        if self._task == "segmentation":
            kw["loss"] = self.loss
        return engine.TrainConfig(**kw)

    def _fit(self, X, y, kind, validation_data=None):
        inputs = check_inputs(X)
        targets = check_targets(y, inputs, kind)
        cfg = self._config(len(inputs))

        def subjects(pairs, ts, prefix):
            out = []
            for i, ((v, m), t) in enumerate(zip(pairs, ts)):
                if kind == "labels":
                    out.append(engine.Subject(f"{prefix}-{i}", v, m, labels=t))
                else:
                    out.append(engine.Subject(f"{prefix}-{i}", v, m, target=t))
            return out

        val = []
        if validation_data is not None:
            vx = check_inputs(validation_data[0])
            val = subjects(vx, check_targets(validation_data[1], vx, kind), "val")
        self.checkpoint_ = engine.train(cfg, subjects(inputs, targets, "train"), val)
        self.model_ = self.checkpoint_.model(best=True)
        self.history_ = list(self.checkpoint_.history)
        return self


class WMnSynthesizer(TransformerMixin, _NetworkEstimator):
    """Learns MPRAGE -> white-matter-nulled MPRAGE; ``transform`` returns synthesized volumes."""

    _task = "synthesis"

    def __init__(self, epochs=50, batch_size=10, lr=1e-3, decay=0.1, decay_mode="inverse_time",
                 depth=4, base_channels=24, window=(64, 64), stride=None, augment=True,
                 windows_per_epoch=None, random_state=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.decay = decay
        self.decay_mode = decay_mode
        self.depth = depth
        self.base_channels = base_channels
        self.window = window
        self.stride = stride
        self.augment = augment
        self.windows_per_epoch = windows_per_epoch
        self.random_state = random_state

    def fit(self, X, y, validation_data=None):
        """``y``: paired white-matter-nulled volumes on the same grids as ``X``."""
        return self._fit(X, y, "volume", validation_data)

    def transform(self, X):
        check_is_fitted(self, "model_")
        return [engine.predict_synthesis(self.model_, v, m) for v, m in check_inputs(X)]

    def score(self, X, y):
        """Mean in-mask SSIM of the synthesized volumes against ``y``."""
        inputs = check_inputs(X)
        ys = check_targets(y, inputs, "volume")
        out = self.transform(X)
        return float(np.mean([metrics.synthesis_metrics(t, s, m).ssim
                              for t, s, (_, m) in zip(ys, out, inputs)]))


class ThalamicSegmenter(_NetworkEstimator):
    """Whole-thalamus and nuclei segmentation; ``predict`` returns raw-argmax label maps."""

    _task = "segmentation"

    def __init__(self, loss="dice", epochs=50, batch_size=10, lr=1e-3, decay=0.1,
                 decay_mode="inverse_time", depth=4, base_channels=24, window=(192, 192),
                 stride=None, augment=True, windows_per_epoch=None, random_state=0):
        self.loss = loss
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.decay = decay
        self.decay_mode = decay_mode
        self.depth = depth
        self.base_channels = base_channels
        self.window = window
        self.stride = stride
        self.augment = augment
        self.windows_per_epoch = windows_per_epoch
        self.random_state = random_state

    def fit(self, X, y, validation_data=None):
        """``y``: structure label maps."""
        return self._fit(X, y, "labels", validation_data)

    def predict_full(self, X) -> list:
        check_is_fitted(self, "model_")
        return [engine.predict_labels(self.model_, v, m) for v, m in check_inputs(X)]

    def predict(self, X) -> list:
        return [p.labelmap for p in self.predict_full(X)]

    def score(self, X, y):
        """Mean whole-thalamus Dice."""
        inputs = check_inputs(X)
        ys = check_targets(y, inputs, "labels")
        preds = self.predict_full(X)
        return float(np.mean([metrics.dice(t.data > 0, p.thalamus_mask)
                              for t, p in zip(ys, preds)]))
