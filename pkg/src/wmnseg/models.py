"""Multi-scale encoder-decoder networks for 2.5D segmentation and contrast synthesis.

Both networks share one backbone. A 3D stem with 3x3x3 kernels consumes the
five-slice slab (no padding along the slice axis, so 5 -> 3 -> 1 slices);
the remaining scales work in-plane on the center slice with 2x2 pooling and
transposed-convolution upsampling, joined by skip connections.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .sampler import DEPTH
from .taxonomy import N_CLASSES


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    depth: int = 4
    base_channels: int = 24
    growth: int = 2
    norm: str = "instance"
    nonlinearity: str = "relu"
    window: tuple[int, int] = (192, 192)
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "window", tuple(int(w) for w in self.window))
        if self.depth < 2:
            raise ModelConfigError("depth must be >= 2")
        div = 2 ** (self.depth - 1)
        for w in self.window:
            if w % div:
                raise ModelConfigError(
                    f"window {self.window} not divisible by 2^(depth-1) = {div} at depth {self.depth}")
        if self.norm not in ("instance", "batch", "none"):
            raise ModelConfigError(f"unknown norm {self.norm!r}")
        if self.nonlinearity not in ("relu", "leaky_relu"):
            raise ModelConfigError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.base_channels < 1 or self.growth < 1:
            raise ModelConfigError("channel counts must be positive")

    def channels(self) -> list[int]:
        return [self.base_channels * self.growth ** i for i in range(self.depth)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window"] = list(self.window)
        return d


def _norm(kind: str, ch: int, dims: int) -> nn.Module:
    if kind == "instance":
        return (nn.InstanceNorm2d if dims == 2 else nn.InstanceNorm3d)(ch, affine=True)
    if kind == "batch":
        return (nn.BatchNorm2d if dims == 2 else nn.BatchNorm3d)(ch)
    return nn.Identity()


def _act(kind: str) -> nn.Module:
    return nn.ReLU() if kind == "relu" else nn.LeakyReLU(0.01)


def _block2d(cin, cout, cfg: NetConfig) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), _norm(cfg.norm, cout, 2), _act(cfg.nonlinearity),
        nn.Conv2d(cout, cout, 3, padding=1), _norm(cfg.norm, cout, 2), _act(cfg.nonlinearity),
    )


class Backbone(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        ch = cfg.channels()
        self.stem = nn.Sequential(
            nn.Conv3d(cfg.in_channels, ch[0], 3, padding=(0, 1, 1)),
            _norm(cfg.norm, ch[0], 3), _act(cfg.nonlinearity),
            nn.Conv3d(ch[0], ch[0], 3, padding=(0, 1, 1)),
            _norm(cfg.norm, ch[0], 3), _act(cfg.nonlinearity),
        )
        self.down = nn.ModuleList(_block2d(ch[i - 1], ch[i], cfg) for i in range(1, cfg.depth))
        self.up = nn.ModuleList(nn.ConvTranspose2d(ch[i], ch[i - 1], 2, stride=2)
                                for i in range(cfg.depth - 1, 0, -1))
        self.dec = nn.ModuleList(_block2d(2 * ch[i - 1], ch[i - 1], cfg)
                                 for i in range(cfg.depth - 1, 0, -1))
        self.out_channels = ch[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (N, C, DEPTH, H, W)
        h = self.stem(x).squeeze(2)
        skips = [h]
        for block in self.down:
            h = block(F.max_pool2d(h, 2))
            skips.append(h)
        skips.pop()
        for up, dec in zip(self.up, self.dec):
            h = dec(torch.cat([up(h), skips.pop()], dim=1))
        return h


def _check_input(x: torch.Tensor, cfg: NetConfig) -> None:
    if x.ndim != 5 or x.shape[1] != cfg.in_channels or x.shape[2] != DEPTH \
            or tuple(x.shape[3:]) != cfg.window:
        raise ValueError(
            f"expected input (N, {cfg.in_channels}, {DEPTH}, {cfg.window[0]}, {cfg.window[1]}), "
            f"got {tuple(x.shape)}")


BACKGROUND_PRIOR = 0.5  # initial background probability of the nuclei head


class SegmentationModel(nn.Module):
    """Dual-head network: whole-thalamus map, then nuclei from features + that map."""

    def __init__(self, cfg: NetConfig, n_classes: int = N_CLASSES):
        super().__init__()
        self.config = cfg
        self.n_classes = n_classes
        self.backbone = Backbone(cfg)
        c = self.backbone.out_channels
        self.thalamus_head = nn.Conv2d(c, 1, 1)
        self.nuclei_head = nn.Sequential(
            nn.Conv2d(c + 1, c, 3, padding=1), _norm(cfg.norm, c, 2), _act(cfg.nonlinearity),
            nn.Conv2d(c, n_classes, 1),
        )
        # start with background dominant: the Dice terms exclude background, so a
        # structure that starts out covering the background gets almost no
        # gradient pushing it back
        with torch.no_grad():
            bias = self.nuclei_head[-1].bias
            bias.zero_()
            bias[0] = math.log(BACKGROUND_PRIOR / (1 - BACKGROUND_PRIOR) * (n_classes - 1))

    @property
    def nuclei_in_channels(self) -> int:
        return self.nuclei_head[0].in_channels

    def forward(self, x: torch.Tensor, thalamus_override: torch.Tensor | None = None):
        """Return (thalamus probability (N, H, W), nuclei probabilities (N, K, H, W)).

        ``thalamus_override`` replaces the thalamus map fed to the nuclei head;
        used to probe the dependence of the nuclei head on it.
        """
        _check_input(x, self.config)
        feats = self.backbone(x)
        thal = torch.sigmoid(self.thalamus_head(feats))
        fed = thal if thalamus_override is None else thalamus_override
        nuc = torch.softmax(self.nuclei_head(torch.cat([feats, fed], dim=1)), dim=1)
        return thal[:, 0], nuc


class SynthesisModel(nn.Module):
    """Regresses the white-matter-nulled center slice, bounded to [0, 1] by a sigmoid."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.config = cfg
        self.backbone = Backbone(cfg)
        self.head = nn.Conv2d(self.backbone.out_channels, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, self.config)
        return torch.sigmoid(self.head(self.backbone(x)))[:, 0]


def _seeded(builder, seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return builder()


def build_segmentation_model(config: NetConfig, seed: int = 0) -> SegmentationModel:
    return _seeded(lambda: SegmentationModel(config), seed)


def build_synthesis_model(config: NetConfig, seed: int = 0) -> SynthesisModel:
    return _seeded(lambda: SynthesisModel(config), seed)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def state_checksum(state: dict) -> str:
    """SHA-256 over tensor names, dtypes, shapes and raw bytes."""
    h = hashlib.sha256()
    for key in sorted(state):
        t = state[key]
        if isinstance(t, torch.Tensor):
            t = t.detach().cpu().contiguous()
            h.update(f"{key}|{t.dtype}|{tuple(t.shape)}".encode())
            h.update(t.numpy().tobytes())
        else:
            h.update(f"{key}|{t!r}".encode())
    return h.hexdigest()


def parameter_checksum(model: nn.Module) -> str:
    return state_checksum(model.state_dict())


def windows_to_tensor(windows, channels=None, dtype=torch.float32) -> torch.Tensor:
    """Stack window images (C, h, w, DEPTH) into a network batch (N, C, DEPTH, h, w)."""
    arr = np.stack([w.image if channels is None else w.image[channels] for w in windows])
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 1, 4, 2, 3))).to(dtype)


def forward_segmentation(model: SegmentationModel, windows) -> tuple[np.ndarray, np.ndarray]:
    model.eval()
    with torch.no_grad():
        thal, nuc = model(windows_to_tensor(windows))
    return thal.numpy(), nuc.numpy()


def forward_synthesis(model: SynthesisModel, windows) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        out = model(windows_to_tensor(windows, channels=[0]))
    return out.numpy()


# -- perceptual feature extractor -------------------------------------------------

# VGG16 layers up to and including the third ReLU
_VGG_PREFIX = [(3, 64), (64, 64), "pool", (64, 128)]
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)
CACHE_ENV = "WMNSEG_CACHE"


class FeatureExtractor(nn.Module):
    """Frozen VGG16 prefix ending at the third ReLU.

    ``provenance`` is ``"fixed-random"`` (Kaiming init from ``seed``, no
    download) or ``"pretrained"`` (ImageNet weights read from the torch hub
    cache; set ``WMNSEG_CACHE`` to point at it).
    """

    def __init__(self, provenance: str = "fixed-random", seed: int = 7):
        super().__init__()
        if provenance not in ("fixed-random", "pretrained"):
            raise ValueError(f"unknown extractor provenance {provenance!r}")
        self.provenance = provenance
        self.seed = seed
        layers = []
        for spec in _VGG_PREFIX:
            if spec == "pool":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                layers += [nn.Conv2d(*spec, 3, padding=1), nn.ReLU()]
        self.features = nn.Sequential(*layers)
        if provenance == "pretrained":
            self._load_pretrained()
            self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
            self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))
        else:
            g = torch.Generator().manual_seed(seed)
            for m in self.features:
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * 9
                    with torch.no_grad():
                        m.weight.copy_(torch.randn(m.weight.shape, generator=g) * (2 / fan_in) ** 0.5)
                        m.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def _load_pretrained(self):
        import torchvision

        cache = os.environ.get(CACHE_ENV)
        if cache:
            torch.hub.set_dir(cache)
        try:
            vgg = torchvision.models.vgg16(weights=torchvision.models.VGG16_Weights.IMAGENET1K_V1)
        except Exception as exc:
            raise RuntimeError(
                "pretrained VGG16 weights unavailable; populate the cache named by "
                f"{CACHE_ENV} or use provenance='fixed-random'") from exc
        src = [m for m in vgg.features[:len(self.features)]]
        for dst, s in zip(self.features, src):
            if isinstance(dst, nn.Conv2d):
                dst.load_state_dict(s.state_dict())

    def train(self, mode: bool = True):
        # weights stay frozen; there is no train-mode behaviour to switch
        return super().train(False)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """``image`` is (N, 1, H, W) or (N, H, W) in [0, 1]."""
        if image.ndim == 3:
            image = image[:, None]
        x = image.expand(-1, 3, -1, -1).to(self.features[0].weight.dtype)
        if self.provenance == "pretrained":
            x = (x - self.mean) / self.std
        return self.features(x)


def extract_features(extractor: FeatureExtractor, image_2d) -> np.ndarray:
    x = torch.as_tensor(np.asarray(image_2d), dtype=torch.float32)
    while x.ndim < 4:
        x = x[None]
    with torch.no_grad():
        return extractor(x)[0].numpy()
