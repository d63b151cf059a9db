"""Backbone feature extraction and the top-down feature pyramid merge.

A five-block convolutional backbone emits feature maps C2..C5 at strides
4/8/16/32; the pyramid merges them top-down into P2..P5, all at a fixed
channel depth: the top map is a 1x1 projection of C5, and each level below
adds a nearest-neighbor 2x upsample of the level above to a 1x1 lateral
projection, then smooths the sum with a 3x3 convolution to compensate for
upsampling aliasing. Lateral and smoothing convolutions carry biases and no
nonlinearity.

Forward passes are pure given weights and may run concurrently over shared
read-only weights.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

DEFAULT_WIDTHS = (16, 32, 64, 128, 256)
FULL_WIDTHS = (64, 64, 128, 256, 512)
LEVELS = (2, 3, 4, 5)


def _norm_groups(channels: int) -> int:
    return math.gcd(channels, 8)


class ResidualStage(nn.Module):
    """One stride-2 stage: two 3x3 convolutions with a projected skip."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 2):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.norm1 = nn.GroupNorm(_norm_groups(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(_norm_groups(out_channels), out_channels)
        self.proj = nn.Conv2d(in_channels, out_channels, 1, stride=stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(h + self.proj(x))


class Backbone(nn.Module):
    """Five stride-2 stages; emits C2..C5 (C1 is dropped, it is too large)."""

    def __init__(self, widths: tuple[int, ...] = DEFAULT_WIDTHS):
        super().__init__()
        if len(widths) != 5:
            raise ValueError(f"expected 5 block widths, got {len(widths)}")
        self.widths = tuple(int(w) for w in widths)
        chans = (3,) + self.widths
        self.blocks = nn.ModuleList(
            ResidualStage(chans[i], chans[i + 1]) for i in range(5)
        )

    def forward(self, image: torch.Tensor) -> dict[int, torch.Tensor]:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        h, w = image.shape[-2:]
        if h % 32 != 0 or w % 32 != 0:
            raise ValueError(f"image dimensions must be divisible by 32, got {h}x{w}")
        feats: dict[int, torch.Tensor] = {}
        x = image
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if i >= 2:
                feats[i] = x
        return feats


def upsample2x_nearest(m: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbor 2x upsampling of the two trailing (spatial) dims."""
    return m.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)


class FeaturePyramid(nn.Module):
    """Top-down merge of C2..C5 into equal-depth P2..P5."""

    def __init__(self, in_channels: tuple[int, int, int, int], depth: int = 256):
        super().__init__()
        if depth < 1:
            raise ValueError("pyramid depth must be >= 1")
        self.depth = int(depth)
        self.in_channels = {lvl: int(c) for lvl, c in zip(LEVELS, in_channels)}
        self.lateral = nn.ModuleDict(
            {str(lvl): nn.Conv2d(self.in_channels[lvl], depth, 1) for lvl in LEVELS}
        )
        self.smooth = nn.ModuleDict(
            {str(lvl): nn.Conv2d(depth, depth, 3, padding=1) for lvl in LEVELS[:-1]}
        )

    def forward(self, feats: dict[int, torch.Tensor]) -> dict[int, torch.Tensor]:
        for lvl in LEVELS:
            if lvl not in feats:
                raise ValueError(f"missing backbone level C{lvl}")
            if feats[lvl].shape[-3] != self.in_channels[lvl]:
                raise ValueError(
                    f"C{lvl} has {feats[lvl].shape[-3]} channels, expected {self.in_channels[lvl]}"
                )
        for hi in (5, 4, 3):
            lo = feats[hi - 1].shape[-2:]
            hi_shape = feats[hi].shape[-2:]
            if lo[0] != 2 * hi_shape[0] or lo[1] != 2 * hi_shape[1]:
                raise ValueError(
                    f"C{hi - 1} spatial dims {tuple(lo)} are not a 2x refinement of C{hi} {tuple(hi_shape)}"
                )

        pyramid: dict[int, torch.Tensor] = {5: self.lateral["5"](feats[5])}
        for lvl in (4, 3, 2):
            merged = upsample2x_nearest(pyramid[lvl + 1]) + self.lateral[str(lvl)](feats[lvl])
            pyramid[lvl] = self.smooth[str(lvl)](merged)
        return pyramid


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic init: fan-in-scaled uniform weights, zero biases.

    Normalization gains start at 1. Iteration follows registration order,
    so the same module structure and seed always yield the same weights.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, param in module.named_parameters():
            if name.endswith("bias"):
                param.zero_()
            elif param.dim() == 1:  # normalization gain
                param.fill_(1.0)
            else:
                fan_in = int(np.prod(param.shape[1:]))
                bound = math.sqrt(6.0 / fan_in)
                param.uniform_(-bound, bound, generator=gen)


def module_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    """State dict as float32/numpy, in registration order, for archiving."""
    return {
        name: tensor.detach().cpu().numpy().copy()
        for name, tensor in module.state_dict().items()
    }


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {name: torch.from_numpy(np.ascontiguousarray(arr)) for name, arr in arrays.items()}
    module.load_state_dict(state)
