"""Network components: feature backbone, segmentor head, patch discriminator
and the attention fusion block, all at desk scale.

Tensors follow the torch NCHW convention.  Images are (N, 1, H, W); feature
maps are (N, C_f, H/4, W/4); score maps are logits of shape (N, C, H, W).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class NetworkConfig:
    """Sizes and widths of every parametric component."""

    image_size: int = 64
    num_classes: int = 5
    base_width: int = 16
    feat_channels: int = 32
    seg_hidden: int = 32
    disc_width: int = 32
    norm_groups: int = 4
    disc_input: str = "probs"   # what the discriminator sees: probs | logits
    init_seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least background + one structure")
        if self.image_size % 4 != 0:
            raise ValueError("image size must be divisible by 4")
        for w in (self.base_width, self.feat_channels, self.seg_hidden,
                  self.disc_width):
            if w <= 0 or w % self.norm_groups != 0:
                raise ValueError("widths must be positive multiples of the "
                                 "group-norm group count")
        if self.disc_input not in ("probs", "logits"):
            raise ValueError("disc_input must be 'probs' or 'logits'")

    @property
    def feat_size(self) -> int:
        return self.image_size // 4

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "NetworkConfig":
        return NetworkConfig(**d)


class Backbone(nn.Module):
    """Three conv blocks (two with stride 2) mapping (N,1,H,W) to
    (N, feat_channels, H/4, W/4)."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        w, f, g = cfg.base_width, cfg.feat_channels, cfg.norm_groups
        self.cfg = cfg
        self.net = nn.Sequential(
            nn.Conv2d(1, w, 3, stride=1, padding=1),
            nn.GroupNorm(g, w),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.GroupNorm(g, 2 * w),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, f, 3, stride=2, padding=1),
            nn.GroupNorm(g, f),
            nn.ReLU(inplace=True),
        )

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 4 or image.shape[1] != 1:
            raise ValueError(f"expected (N,1,H,W) image, got {tuple(image.shape)}")
        if image.shape[-1] != self.cfg.image_size or image.shape[-2] != self.cfg.image_size:
            raise ValueError(f"expected {self.cfg.image_size}px image, "
                             f"got {tuple(image.shape)}")
        return self.net(image)


class Segmentor(nn.Module):
    """Two 1x1 conv layers on the feature map, then bilinear upsampling x4
    back to full-resolution logits over all classes."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.net = nn.Sequential(
            nn.Conv2d(cfg.feat_channels, cfg.seg_hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(cfg.seg_hidden, cfg.num_classes, 1),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim != 4 or features.shape[1] != self.cfg.feat_channels:
            raise ValueError(f"expected (N,{self.cfg.feat_channels},h,w) "
                             f"features, got {tuple(features.shape)}")
        logits = self.net(features)
        return F.interpolate(logits, scale_factor=4, mode="bilinear",
                             align_corners=False)


class PatchDiscriminator(nn.Module):
    """PatchGAN-style discriminator: three stride-2 conv stages and a 1x1
    head, sigmoid outputs on a (H/8, W/8) patch grid.

    Outputs are clamped to the open interval (0, 1) so downstream log
    terms stay finite even when the sigmoid saturates in float32.
    """

    CLAMP = 1e-6

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        w = cfg.disc_width
        self.cfg = cfg
        self.net = nn.Sequential(
            nn.Conv2d(cfg.num_classes, w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * w, 2 * w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * w, 1, 1),
        )

    def forward(self, score_map: torch.Tensor) -> torch.Tensor:
        if score_map.ndim != 4 or score_map.shape[1] != self.cfg.num_classes:
            raise ValueError(f"expected (N,{self.cfg.num_classes},H,W) map, "
                             f"got {tuple(score_map.shape)}")
        out = torch.sigmoid(self.net(score_map))
        return out.clamp(self.CLAMP, 1.0 - self.CLAMP)


class FusionAttention(nn.Module):
    """Guidance-weighted residual feature recalibration.

    forward(f, g) = M(g * f) + f where M is three conv+norm+ReLU layers and
    g is average-pooled to the feature resolution first.  The final conv of
    M is zero-initialized so training starts from the identity mapping.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        f, g = cfg.feat_channels, cfg.norm_groups
        self.cfg = cfg
        self.net = nn.Sequential(
            nn.Conv2d(f, f, 3, padding=1),
            nn.GroupNorm(g, f),
            nn.ReLU(inplace=True),
            nn.Conv2d(f, f, 3, padding=1),
            nn.GroupNorm(g, f),
            nn.ReLU(inplace=True),
            nn.Conv2d(f, f, 3, padding=1),
            nn.GroupNorm(g, f),
            nn.ReLU(inplace=True),
        )

    def forward(self, features: torch.Tensor,
                guidance: torch.Tensor) -> torch.Tensor:
        if guidance.ndim != 4 or guidance.shape[1] != 1:
            raise ValueError(f"expected (N,1,H,W) guidance, "
                             f"got {tuple(guidance.shape)}")
        g = F.adaptive_avg_pool2d(guidance, features.shape[-2:])
        return self.net(g * features) + features


def softmax_probs(scores: torch.Tensor) -> torch.Tensor:
    """Per-pixel class probabilities from logits (channel softmax)."""
    return torch.softmax(scores, dim=1)


def inheritance_guidance(scores: torch.Tensor) -> torch.Tensor:
    """Guidance map: per-pixel max probability over non-background channels.

    ``scores`` are logits (N, C, H, W) with channel 0 = background; the
    result has shape (N, 1, H, W).
    """
    if scores.shape[1] < 2:
        raise ValueError("guidance needs at least two channels")
    probs = softmax_probs(scores)
    return probs[:, 1:].max(dim=1, keepdim=True).values


def inheritance_attention(features: torch.Tensor, guidance: torch.Tensor,
                          fusion: FusionAttention) -> torch.Tensor:
    return fusion(features, guidance)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_module(module: nn.Module, seed: int, zero_final: bool = False) -> None:
    """Deterministic scaled-Gaussian init: conv weights ~ N(0, 1/fan_in),
    biases zero, norm layers at identity.  ``zero_final`` additionally
    zeroes the last conv layer (used for the fusion block)."""
    gen = torch.Generator().manual_seed(seed)
    convs = [m for m in module.modules() if isinstance(m, nn.Conv2d)]
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.weight[0].numel()
                w = torch.randn(m.weight.shape, generator=gen,
                                dtype=m.weight.dtype)
                m.weight.copy_(w / math.sqrt(fan_in))
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.GroupNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()
        if zero_final and convs:
            convs[-1].weight.zero_()
            if convs[-1].bias is not None:
                convs[-1].bias.zero_()


def build_segmentation_model(cfg: NetworkConfig, seed: int
                             ) -> tuple[Backbone, Segmentor]:
    backbone = Backbone(cfg)
    segmentor = Segmentor(cfg)
    init_module(backbone, seed)
    init_module(segmentor, seed + 1)
    return backbone, segmentor


def build_fusion(cfg: NetworkConfig, seed: int) -> FusionAttention:
    fusion = FusionAttention(cfg)
    init_module(fusion, seed, zero_final=True)
    return fusion


def build_discriminator(cfg: NetworkConfig, seed: int) -> PatchDiscriminator:
    disc = PatchDiscriminator(cfg)
    init_module(disc, seed)
    return disc


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def set_requires_grad(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def parameter_fingerprint(module: nn.Module) -> bytes:
    """Byte-level digest of all parameters, for freeze/no-touch checks."""
    import hashlib
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.digest()


# ---------------------------------------------------------------------------
# checkpoints: portable npz container with a JSON header
# ---------------------------------------------------------------------------

_MODULE_KINDS = {
    "Backbone": Backbone,
    "Segmentor": Segmentor,
    "PatchDiscriminator": PatchDiscriminator,
    "FusionAttention": FusionAttention,
}


def save_checkpoint(path: str | Path, modules: dict[str, nn.Module],
                    config: NetworkConfig, step: int) -> Path:
    """Write named parameter tensors + config + step counter to one .npz.

    The round trip through :func:`load_checkpoint` is bit-exact.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    roles = {}
    for name, module in modules.items():
        roles[name] = type(module).__name__
        for key, tensor in module.state_dict().items():
            arrays[f"{name}/{key}"] = tensor.detach().cpu().numpy()
    header = json.dumps({"config": config.to_dict(), "step": int(step),
                         "roles": roles})
    np.savez(path, __header__=np.array(header), **arrays)
    return path


def load_checkpoint(path: str | Path
                    ) -> tuple[dict[str, nn.Module], NetworkConfig, int]:
    """Rebuild the stored modules from a checkpoint file."""
    path = Path(path)
    with np.load(path) as data:
        header = json.loads(str(data["__header__"]))
        config = NetworkConfig.from_dict(header["config"])
        modules: dict[str, nn.Module] = {}
        for name, kind in header["roles"].items():
            module = _MODULE_KINDS[kind](config)
            prefix = f"{name}/"
            state = {key[len(prefix):]: torch.from_numpy(data[key])
                     for key in data.files if key.startswith(prefix)}
            module.load_state_dict(state)
            modules[name] = module
    return modules, config, header["step"]
