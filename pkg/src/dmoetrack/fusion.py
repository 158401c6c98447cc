"""Meta Merger: shared patch embedding, attention enhancement and meta-embedding fusion.

Images arrive as B x C x H x W arrays in normalized intensity space (0 means
"no signal"). Both modalities pass through one patch embedding, get their own
spatial/channel attention enhancement, and meet in a learnable meta embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .nn import Conv2d, Linear, Module, parameter


class PatchEmbed(Module):
    """Non-overlapping patch projection shared by every modality."""

    def __init__(self, in_channels: int, dim: int, patch: int, rng: np.random.Generator):
        self.patch = patch
        self.in_channels = in_channels
        self.proj = Linear(in_channels * patch * patch, dim, rng)

    def forward(self, image) -> Tensor:
        image = ad.as_tensor(image)
        if image.ndim != 4 or image.shape[1] != self.in_channels:
            raise ShapeError(f"expected B x {self.in_channels} x H x W image, got {image.shape}")
        b, c, h, w = image.shape
        p = self.patch
        if h % p or w % p:
            raise ConfigError(f"image size {h}x{w} is not divisible by patch size {p}")
        gh, gw = h // p, w // p
        patches = image.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, gh, gw, c * p * p)
        return self.proj(patches).transpose(0, 3, 1, 2)


class Enhance(Module):
    """Residual spatial x channel attention: F * W_spatial * W_channel + F.

    Spatial weights come from a 7x7 conv over the channel-pooled avg/max maps;
    channel weights from a bottleneck MLP shared by the spatially pooled avg/max
    vectors.
    """

    def __init__(self, dim: int, rng: np.random.Generator, kernel: int = 7, reduction: int = 4):
        self.spatial = Conv2d(2, 1, kernel, rng)
        hidden = max(1, dim // reduction)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def channel_mlp(self, v: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(v)))

    def weights(self, f: Tensor) -> tuple[Tensor, Tensor]:
        pooled = ad.concat([f.mean(axis=1, keepdims=True), f.max(axis=1, keepdims=True)], axis=1)
        w_spatial = ad.sigmoid(self.spatial(pooled))
        w_channel = ad.sigmoid(self.channel_mlp(f.mean(axis=(2, 3))) + self.channel_mlp(f.max(axis=(2, 3))))
        return w_spatial, w_channel

    def forward(self, f: Tensor) -> Tensor:
        w_spatial, w_channel = self.weights(f)
        b, c = f.shape[:2]
        return f * w_spatial * w_channel.reshape(b, c, 1, 1) + f


class MetaMerger(Module):
    """conv_out(conv_rgb(meta + F_rgb) + conv_x(meta + F_x) + meta)."""

    def __init__(self, dim: int, rng: np.random.Generator, kernel: int = 3):
        self.conv_rgb = Conv2d(dim, dim, kernel, rng)
        self.conv_x = Conv2d(dim, dim, kernel, rng)
        self.conv_out = Conv2d(dim, dim, kernel, rng)

    def forward(self, f_rgb: Tensor, f_x: Tensor, meta: Tensor) -> Tensor:
        if f_rgb.shape != f_x.shape or f_rgb.shape[1:] != meta.shape[-3:]:
            raise ShapeError(f"merge shapes disagree: rgb {f_rgb.shape}, x {f_x.shape}, meta {meta.shape}")
        return self.conv_out(self.conv_rgb(meta + f_rgb) + self.conv_x(meta + f_x) + meta)


class ModalityFusion(Module):
    """Full fusion path for one region kind; the meta embedding is passed in."""

    def __init__(self, in_channels: int, dim: int, patch: int, rng: np.random.Generator,
                 spatial_kernel: int = 7, merge_kernel: int = 3):
        self.embed = PatchEmbed(in_channels, dim, patch, rng)
        self.enhance_rgb = Enhance(dim, rng, spatial_kernel)
        self.enhance_x = Enhance(dim, rng, spatial_kernel)
        self.merger = MetaMerger(dim, rng, merge_kernel)

    def forward(self, rgb, x, meta: Tensor) -> Tensor:
        f_rgb = self.enhance_rgb(self.embed(rgb))
        f_x = self.enhance_x(self.embed(x))
        return self.merger(f_rgb, f_x, meta)


def meta_embedding(dim: int, grid_h: int, grid_w: int, rng: np.random.Generator, std: float = 0.02) -> Tensor:
    return parameter(rng.normal(0.0, std, size=(1, dim, grid_h, grid_w)))


def substitute_rgb_only(rgb, x=None):
    """RGB-only samples reuse the RGB image as the auxiliary input."""
    return (rgb, rgb) if x is None else (rgb, x)


@dataclass(frozen=True)
class PerturbationConfig:
    p_swap: float = 0.1
    p_mask: float = 0.1
    mask_value: float = 0.0

    def __post_init__(self):
        for name in ("p_swap", "p_mask"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")


# Perturbation records.
NONE, SWAP, MASK_RGB, MASK_X = "none", "swap", "mask_rgb", "mask_x"


def draw_perturbation(rng: np.random.Generator, cfg: PerturbationConfig) -> str:
    """Pick one action: swap with p_swap, else blank one input (fair coin) with p_mask.

    Three draws are consumed per call regardless of outcome so the stream
    stays aligned across samples.
    """
    u_swap, u_mask, coin = rng.random(3)
    if u_swap < cfg.p_swap:
        return SWAP
    if u_mask < cfg.p_mask:
        return MASK_X if coin < 0.5 else MASK_RGB
    return NONE


def apply_perturbation(rgb: np.ndarray, x: np.ndarray, record: str, mask_value: float = 0.0):
    if record == SWAP:
        return x, rgb
    if record == MASK_X:
        return rgb, np.full_like(x, mask_value)
    if record == MASK_RGB:
        return np.full_like(rgb, mask_value), x
    return rgb, x


def perturb(rgb: np.ndarray, x: np.ndarray, rng: np.random.Generator, cfg: PerturbationConfig):
    record = draw_perturbation(rng, cfg)
    return (*apply_perturbation(rgb, x, record, cfg.mask_value), record)


def perturb_batch(template: tuple[np.ndarray, np.ndarray], search: tuple[np.ndarray, np.ndarray],
                  rng: np.random.Generator, cfg: PerturbationConfig):
    """Per-sample perturbation; template and search of a sample share the action."""
    t_rgb, t_x = template[0].copy(), template[1].copy()
    s_rgb, s_x = search[0].copy(), search[1].copy()
    records = []
    for i in range(t_rgb.shape[0]):
        rec = draw_perturbation(rng, cfg)
        t_rgb[i], t_x[i] = apply_perturbation(template[0][i], template[1][i], rec, cfg.mask_value)
        s_rgb[i], s_x[i] = apply_perturbation(search[0][i], search[1][i], rec, cfg.mask_value)
        records.append(rec)
    return (t_rgb, t_x), (s_rgb, s_x), records
