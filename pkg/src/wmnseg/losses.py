"""Training losses for the segmentation and synthesis networks.

All losses take torch tensors and return a :class:`LossValue` whose
``total`` is differentiable. Class axis is dim 1 throughout: probabilities
and one-hot targets are (N, K, ...).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

EPS = 1e-5
LOG_FLOOR = 1e-12


@dataclass
class LossValue:
    total: torch.Tensor
    components: dict = field(default_factory=dict)

    def item(self) -> float:
        return float(self.total.detach())

    def __add__(self, other: "LossValue") -> "LossValue":
        comps = {**self.components, **other.components}
        return LossValue(self.total + other.total, comps)


def _check(p: torch.Tensor, g: torch.Tensor) -> None:
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(p.shape)} vs target {tuple(g.shape)}")
    if torch.isnan(p).any() or torch.isnan(g).any():
        raise ValueError("NaN in loss inputs")


def soft_dice_loss(p: torch.Tensor, g: torch.Tensor, eps: float = EPS) -> LossValue:
    """Binary soft Dice, ``-(2 sum(g p) + eps) / (sum g + sum p + eps)``; lies in [-1, 0]."""
    _check(p, g)
    val = -(2 * (g * p).sum() + eps) / (g.sum() + p.sum() + eps)
    return LossValue(val, {"thalamus_dice": val})


def multilabel_dice_loss(p: torch.Tensor, g: torch.Tensor, n_structures: int | None = None,
                         eps: float = EPS) -> LossValue:
    """``-sum_i |G_i ∩ P_i| / (|G_i| + |P_i|)`` over the structure channels.

    Channel 0 is background and excluded. The intersection is the soft
    product. There is no factor 2 in the numerator, so a perfect
    prediction scores -1/2 per present structure and the loss lies in
    [-C/2, 0]. ``eps`` only stabilizes the denominator so absent classes
    contribute exactly 0.
    """
    _check(p, g)
    k = p.shape[1]
    c = k - 1 if n_structures is None else n_structures
    if c != k - 1:
        raise ValueError(f"expected {c + 1} class channels, got {k}")
    sums = p.sum(dim=1)
    if (sums - 1).abs().max() > 1e-4:
        raise ValueError("probability columns must sum to 1 within 1e-4")
    dims = [0] + list(range(2, p.ndim))
    inter = (g * p).sum(dim=dims)[1:]
    denom = g.sum(dim=dims)[1:] + p.sum(dim=dims)[1:] + eps
    val = -(inter / denom).sum()
    return LossValue(val, {"nuclei_dice": val})


def wcce_loss(p: torch.Tensor, g: torch.Tensor, weights) -> LossValue:
    """Weighted categorical cross-entropy, averaged over pixels."""
    _check(p, g)
    w = torch.as_tensor(weights, dtype=p.dtype, device=p.device)
    if w.ndim != 1 or w.numel() != p.shape[1]:
        raise ValueError(f"need one weight per class ({p.shape[1]}), got {tuple(w.shape)}")
    if not torch.isfinite(w).all() or (w <= 0).any():
        raise ValueError("class weights must be positive and finite")
    shape = [1, -1] + [1] * (p.ndim - 2)
    logp = torch.log(p.clamp_min(LOG_FLOOR))
    n_pix = p.numel() // p.shape[1]
    val = -(w.view(shape) * g * logp).sum() / n_pix
    return LossValue(val, {"nuclei_wcce": val})


def binary_cross_entropy(p: torch.Tensor, g: torch.Tensor) -> LossValue:
    _check(p, g)
    p = p.clamp(LOG_FLOOR, 1 - LOG_FLOOR)
    val = -(g * torch.log(p) + (1 - g) * torch.log(1 - p)).mean()
    return LossValue(val, {"thalamus_bce": val})


def class_weights(label_counts) -> np.ndarray:
    """Inverse-frequency class weights rescaled to mean 1.

    Classes never seen get the count of the rarest seen class so every
    weight stays finite.
    """
    counts = np.asarray(label_counts, dtype=np.float64)
    if (counts < 0).any() or counts.sum() <= 0:
        raise ValueError("label counts must be nonnegative with a positive total")
    seen = counts[counts > 0]
    counts = np.where(counts > 0, counts, seen.min())
    w = 1.0 / counts
    return w / w.mean()


def segmentation_loss(thal_p, thal_g, nuc_p, nuc_g, kind: str = "dice",
                      weights=None) -> LossValue:
    """Thalamus term plus nuclei term with unit weights."""
    if kind == "dice":
        return soft_dice_loss(thal_p, thal_g) + multilabel_dice_loss(nuc_p, nuc_g)
    if kind == "wcce":
        if weights is None:
            weights = np.ones(nuc_p.shape[1])
        return binary_cross_entropy(thal_p, thal_g) + wcce_loss(nuc_p, nuc_g, weights)
    raise ValueError(f"unknown segmentation loss {kind!r}")


def synthesis_loss(w: torch.Tensor, w_syn: torch.Tensor, extractor) -> LossValue:
    """Mean absolute error plus feature-space Euclidean distance.

    Images are (N, 1, H, W). The perceptual term is the per-image L2 norm
    of the feature difference divided by the square root of the feature
    count (a root-mean-square), averaged over the batch.
    """
    _check(w, w_syn)
    intensity = (w - w_syn).abs().mean()
    fw = extractor(w)
    fs = extractor(w_syn)
    diff = (fw - fs).flatten(1)
    perceptual = (torch.linalg.vector_norm(diff, dim=1) / diff.shape[1] ** 0.5).mean()
    return LossValue(intensity + perceptual, {"intensity_l1": intensity, "perceptual_l2": perceptual})


def gradient_check(loss_fn, x, h: float = 1e-5, n_coords: int = 50, seed: int = 0,
                   pattern=None) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` maps a float64 tensor to a scalar tensor. ``n_coords``
    coordinates (all of them if fewer) are probed; relative error is
    ``|a - n| / max(|a|, |n|, 1e-8)``. For piecewise-smooth losses,
    ``pattern(x)`` returns the activation pattern (ReLU signs, pooling
    winners, ...) as an array; coordinates whose +h and -h probes see
    different patterns straddle a kink and are replaced by others.
    """
    x = torch.as_tensor(x, dtype=torch.float64).clone().requires_grad_(True)
    loss = loss_fn(x)
    (grad,) = torch.autograd.grad(loss, x)
    flat = x.detach().flatten()
    rng = np.random.default_rng(seed)
    n = flat.numel()
    worst, probed = 0.0, 0
    with torch.no_grad():
        for i in rng.permutation(n):
            if probed == min(n, n_coords):
                break
            xp = flat.clone()
            xm = flat.clone()
            xp[i] += h
            xm[i] -= h
            if pattern is not None and not np.array_equal(pattern(xp.view_as(x)),
                                                          pattern(xm.view_as(x))):
                continue
            probed += 1
            fp = float(loss_fn(xp.view_as(x)))
            fm = float(loss_fn(xm.view_as(x)))
            num = (fp - fm) / (2 * h)
            ana = float(grad.flatten()[i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
