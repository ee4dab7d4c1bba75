"""U-Net autoencoder / segmenter, masked reconstruction loss, encoder transfer.

Weights travel as :class:`ModelWeights`: an ordered name -> tensor mapping
plus the :class:`NetConfig` that produced it. Tensors named ``encoder.*`` are
the part shared between the pretraining autoencoder and the segmenter.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Literal

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .patching import MaskPlan

ENCODER_PREFIX = "encoder."

_ACTIVATIONS = {"relu": nn.ReLU, "gelu": nn.GELU, "silu": nn.SiLU, "tanh": nn.Tanh}


class TransferError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    base_channels: int = 16
    depth: int = 3
    out_channels: int = 1
    nonlinearity: str = "relu"
    normalization: Literal["none", "group"] = "none"
    image_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.image_size % (2**self.depth):
            raise ValueError(
                f"image size {self.image_size} is not divisible by 2**depth = {2**self.depth}"
            )
        if self.nonlinearity not in _ACTIVATIONS:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.normalization not in ("none", "group"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.normalization == "group" and self.base_channels % 4:
            raise ValueError("group normalization needs base_channels divisible by 4")
        if min(self.in_channels, self.base_channels, self.out_channels) < 1:
            raise ValueError("channel counts must be positive")

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // 2**self.depth

    def channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.depth + 1)]


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int, cfg: NetConfig):
        layers: list[nn.Module] = []
        for i, o in ((cin, cout), (cout, cout)):
            layers.append(nn.Conv2d(i, o, 3, padding=1))
            if cfg.normalization == "group":
                layers.append(nn.GroupNorm(4, o))
            layers.append(_ACTIVATIONS[cfg.nonlinearity]())
        super().__init__(*layers)


class Encoder(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        ch = cfg.channels()
        self.stages = nn.ModuleList(
            ConvBlock(cfg.in_channels if i == 0 else ch[i - 1], ch[i], cfg) for i in range(cfg.depth)
        )
        self.bottleneck = ConvBlock(ch[cfg.depth - 1], ch[cfg.depth], cfg)

    def forward(self, x):
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        return self.bottleneck(x), skips


class Decoder(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        ch = cfg.channels()
        levels = list(reversed(range(cfg.depth)))
        self.ups = nn.ModuleList(nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2) for i in levels)
        self.blocks = nn.ModuleList(ConvBlock(2 * ch[i], ch[i], cfg) for i in levels)

    def forward(self, x, skips):
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            x = block(torch.cat([up(x), skip], dim=1))
        return x


class UNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.head = nn.Conv2d(cfg.base_channels, cfg.out_channels, 1)

    def forward(self, x):
        z, skips = self.encoder(x)
        return self.head(self.decoder(z, skips))


@dataclass
class ModelWeights:
    tensors: dict[str, torch.Tensor]
    config: NetConfig
    patch_size: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, t in self.tensors.items():
            if not torch.isfinite(t).all():
                raise ValueError(f"tensor {name} has non-finite values")

    @property
    def encoder_names(self) -> list[str]:
        return [n for n in self.tensors if n.startswith(ENCODER_PREFIX)]

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def clone(self) -> "ModelWeights":
        return ModelWeights({k: v.detach().clone() for k, v in self.tensors.items()}, self.config, self.patch_size, dict(self.meta))

    def to(self, dtype: torch.dtype) -> "ModelWeights":
        return ModelWeights({k: v.to(dtype) for k, v in self.tensors.items()}, self.config, self.patch_size, dict(self.meta))

    def numpy(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.tensors.items()}

    def descriptor(self) -> dict:
        return {"config": asdict(self.config), "patch_size": self.patch_size}

    def load_into(self, module: nn.Module) -> None:
        module.load_state_dict(self.tensors, strict=True)

    @classmethod
    def from_module(cls, module: UNet, patch_size: int | None = None, **meta) -> "ModelWeights":
        tensors = {k: v.detach().clone() for k, v in module.state_dict().items()}
        return cls(tensors, module.cfg, patch_size, meta)


def _init_module(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                w = m.weight
                # fan-in of the input side of the convolution
                fan_in = w.shape[1] * w.shape[2] * w.shape[3] if isinstance(m, nn.Conv2d) else w.shape[0] * w.shape[2] * w.shape[3]
                w.copy_(torch.randn(w.shape, generator=gen, dtype=w.dtype) * math.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.GroupNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()


def build_module(config: NetConfig, seed: int | None = None, dtype: torch.dtype = torch.float32) -> UNet:
    net = UNet(config).to(dtype)
    _init_module(net, config.seed if seed is None else seed)
    return net


def init_weights(config: NetConfig, seed: int | None = None, patch_size: int | None = None) -> ModelWeights:
    """Fan-in-scaled normal initialization, deterministic in ``seed``."""
    return ModelWeights.from_module(build_module(config, seed), patch_size)


_MODULE_CACHE: dict[tuple, UNet] = {}


def _module_for(weights: ModelWeights) -> UNet:
    key = (weights.config, next(iter(weights.tensors.values())).dtype)
    if key not in _MODULE_CACHE:
        _MODULE_CACHE[key] = UNet(weights.config).to(key[1]).eval()
    return _MODULE_CACHE[key]


def _as_batch(image, config: NetConfig, dtype) -> tuple[torch.Tensor, bool]:
    x = torch.as_tensor(image)
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != config.in_channels or x.shape[-1] % 2**config.depth or x.shape[-2] % 2**config.depth:
        raise ValueError(
            f"input shape {tuple(torch.as_tensor(image).shape)} does not fit a network with "
            f"{config.in_channels} input channels and depth {config.depth}"
        )
    return x.to(dtype), single


def forward(image, weights: ModelWeights) -> torch.Tensor:
    """Raw network output for ``(C, H, W)`` or ``(B, C, H, W)`` input, differentiable in the weights."""
    dtype = next(iter(weights.tensors.values())).dtype
    x, single = _as_batch(image, weights.config, dtype)
    out = functional_call(_module_for(weights), weights.tensors, (x,))
    return out[0] if single else out


def reconstruct(masked_image, weights: ModelWeights) -> torch.Tensor:
    """Reconstruct a full-size image from its masked version."""
    if weights.config.out_channels != weights.config.in_channels:
        raise ValueError("reconstruction needs out_channels == in_channels")
    return forward(masked_image, weights)


def segment(image, weights: ModelWeights) -> torch.Tensor:
    """Per-pixel lesion probability, shape ``(1, H, W)`` (or ``(B, 1, H, W)``)."""
    if weights.config.out_channels != 1:
        raise ValueError("segmentation needs a single output channel")
    return torch.sigmoid(forward(image, weights))


# --------------------------------------------------------------------------
# losses


def per_patch_sq_error(reconstructed: torch.Tensor, original: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Squared error summed inside each patch; shape ``(..., N)`` in row-major grid order."""
    if reconstructed.shape != original.shape:
        raise ValueError(f"shape mismatch: {tuple(reconstructed.shape)} vs {tuple(original.shape)}")
    *lead, c, h, w = reconstructed.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} does not tile into {patch_size}-pixel patches")
    sq = (reconstructed - original) ** 2
    sq = sq.reshape(*lead, c, h // patch_size, patch_size, w // patch_size, patch_size)
    return sq.sum(dim=(-5, -3, -1)).reshape(*lead, -1)


@dataclass
class LossResult:
    loss: torch.Tensor  # summed over masked patches (the training objective)
    per_patch: torch.Tensor  # zero for visible patches
    mean_per_masked_pixel: float  # logging only
    empty: bool = False


def masked_l2(reconstructed: torch.Tensor, original: torch.Tensor, patch_mask: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Batched masked loss: per-image sum of squared error over masked patches.

    ``patch_mask`` is boolean ``(B, N)``. Visible patches are excluded with
    ``torch.where``, so their gradient is exactly zero.
    """
    err = per_patch_sq_error(reconstructed, original, patch_size)
    return torch.where(patch_mask, err, torch.zeros((), dtype=err.dtype)).sum(dim=-1)


def reconstruction_loss(reconstructed, original, plan: MaskPlan) -> LossResult:
    """Sum of squared pixel error over the ``plan.n`` masked patches of one image."""
    reconstructed = torch.as_tensor(reconstructed)
    original = torch.as_tensor(original, dtype=reconstructed.dtype)
    if plan.grid is None:
        raise ValueError("mask plan carries no patch grid")
    if tuple(original.shape[-2:]) != plan.grid.image_shape[1:]:
        raise ValueError(f"plan grid {plan.grid.image_shape} does not match image {tuple(original.shape)}")
    patch_mask = torch.as_tensor(plan.patch_mask())
    err = per_patch_sq_error(reconstructed, original, plan.grid.patch_size)
    per_patch = torch.where(patch_mask, err, torch.zeros((), dtype=err.dtype))
    loss = per_patch.sum()
    n = int(patch_mask.sum())
    if n == 0:
        warnings.warn("mask plan masks no patches; reconstruction loss carries no gradient", stacklevel=2)
        return LossResult(loss, per_patch, 0.0, empty=True)
    pixels = n * plan.grid.patch_size**2 * original.shape[-3]
    return LossResult(loss, per_patch, float(loss.detach()) / pixels)


def segmentation_loss(logits: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Pixelwise binary cross-entropy plus soft Dice, equally weighted, averaged over the batch."""
    target = target.to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, target)
    prob = torch.sigmoid(logits)
    dims = tuple(range(1, logits.dim()))
    inter = (prob * target).sum(dims)
    dice = 1 - (2 * inter + eps) / (prob.sum(dims) + target.sum(dims) + eps)
    return bce + dice.mean()


# --------------------------------------------------------------------------
# transfer


def transfer_encoder(pretrained: ModelWeights, target: ModelWeights) -> tuple[ModelWeights, int]:
    """Copy every ``encoder.*`` tensor of ``pretrained`` into a copy of ``target``.

    Returns the new weights and the number of tensors copied.
    """
    names = pretrained.encoder_names
    if not names:
        warnings.warn("pretrained weights contain no encoder tensors; nothing transferred", stacklevel=2)
        return target.clone(), 0
    bad = []
    for name in names:
        if name not in target.tensors:
            bad.append(f"{name}: missing in target")
        elif target.tensors[name].shape != pretrained.tensors[name].shape:
            bad.append(f"{name}: {tuple(pretrained.tensors[name].shape)} vs {tuple(target.tensors[name].shape)}")
    if bad:
        raise TransferError("encoder mismatch: " + "; ".join(bad))
    out = target.clone()
    for name in names:
        out.tensors[name] = pretrained.tensors[name].detach().clone().to(out.tensors[name].dtype)
    return out, len(names)


def segmenter_config(config: NetConfig) -> NetConfig:
    return replace(config, out_channels=1)


def autoencoder_config(config: NetConfig) -> NetConfig:
    return replace(config, out_channels=config.in_channels)
