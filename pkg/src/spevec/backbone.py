"""ResNet-34-shaped frame-level feature extractor.

Input is a batch of Fbank matrices laid out as (B, 64, T, 1); the output
feature map is (B, 8, ceil(T/8), 8 * base_channels).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import BatchNorm2d, Conv2d, ReLU
from .numerics import Module, ShapeError


@dataclass
class BackboneConfig:
    blocks_per_stage: list[int] = field(default_factory=lambda: [3, 4, 6, 3])
    base_channels: int = 32

    def __post_init__(self):
        if len(self.blocks_per_stage) != 4 or min(self.blocks_per_stage) < 1:
            raise ValueError(f"need four stage counts >= 1, got {self.blocks_per_stage}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")

    @classmethod
    def reduced(cls) -> "BackboneConfig":
        return cls([1, 1, 1, 1], 8)

    @property
    def out_channels(self) -> int:
        return 8 * self.base_channels


class BasicBlock(Module):
    """Two 3x3 conv-BN layers plus shortcut; projection when shape changes."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, rng)
        self.bn1 = BatchNorm2d(out_ch)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, rng)
        self.bn2 = BatchNorm2d(out_ch)
        self.relu2 = ReLU()
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, stride, rng)
            self.proj_bn = BatchNorm2d(out_ch)
        else:
            self.proj = self.proj_bn = None

    def forward(self, x):
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x)))
        h = self.bn2.forward(self.conv2.forward(h))
        sc = x if self.proj is None else self.proj_bn.forward(self.proj.forward(x))
        return self.relu2.forward(h + sc)

    def backward(self, dout):
        d = self.relu2.backward(dout)
        dh = self.conv1.backward(self.bn1.backward(self.relu1.backward(
            self.conv2.backward(self.bn2.backward(d)))))
        if self.proj is None:
            return dh + d
        return dh + self.proj.backward(self.proj_bn.backward(d))


class ResNetBackbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        self.conv1 = Conv2d(1, c, 7, 1, rng)
        self.bn1 = BatchNorm2d(c)
        self.relu1 = ReLU()
        blocks = []
        in_ch = c
        for stage, n in enumerate(cfg.blocks_per_stage):
            out_ch = c * 2 ** stage
            for b in range(n):
                stride = 2 if stage > 0 and b == 0 else 1
                blocks.append(BasicBlock(in_ch, out_ch, stride, rng))
                in_ch = out_ch
        self.blocks = blocks

    @property
    def out_channels(self) -> int:
        return self.cfg.out_channels

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[-1] != 1:
            raise ShapeError(f"backbone expects (B, 64, T, 1), got {x.shape}")
        if x.shape[2] < 8:
            raise ShapeError(f"need at least 8 frames, got T={x.shape[2]}")
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x)))
        for blk in self.blocks:
            h = blk.forward(h)
        return h

    def backward(self, dout: np.ndarray) -> np.ndarray:
        for blk in reversed(self.blocks):
            dout = blk.backward(dout)
        return self.conv1.backward(self.bn1.backward(self.relu1.backward(dout)))


def build_backbone(cfg: BackboneConfig | None = None, seed: int = 0) -> ResNetBackbone:
    return ResNetBackbone(cfg or BackboneConfig(), np.random.default_rng(seed))


def backbone_forward(net: ResNetBackbone, batch: np.ndarray) -> np.ndarray:
    return net.forward(np.asarray(batch, dtype=np.float64))
