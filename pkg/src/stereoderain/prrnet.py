"""PRRNet: per-view SADM, semantic fusion (SFNet), cross-view fusion (VFNet)."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .blocks import ResBlock, ShapeError, Stack, conv
from .sadm import SADM

MODES = ("monocular", "stereo")


def swap_halves(x):
    n = x.shape[0] // 2
    return torch.cat([x[n:], x[:n]], dim=0)


class SFNet(nn.Module):
    def __init__(self, num_classes, stem_channels=16, channels=32):
        super().__init__()
        self.num_classes = num_classes
        self.image_stem = conv(3, stem_channels)
        self.seg_stem = conv(num_classes, stem_channels)
        self.body = Stack(conv(2 * stem_channels, channels), conv(channels, channels), conv(channels, channels))
        self.out_channels = channels

    def forward(self, coarse, seg_probs):
        if coarse.shape[-2:] != seg_probs.shape[-2:] or coarse.shape[0] != seg_probs.shape[0]:
            raise ShapeError(f"SFNet: image {tuple(coarse.shape)} and segmentation {tuple(seg_probs.shape)} differ")
        return self.body(torch.cat([self.image_stem(coarse), self.seg_stem(seg_probs)], dim=1))


class VFNet(nn.Module):
    """Shared fusion applied to [self, other] for each view; outputs are residuals on the coarse images."""

    def __init__(self, in_channels=32, channels=64, blocks=5):
        super().__init__()
        self.in_channels = in_channels
        self.entry = conv(2 * in_channels, channels, kernel=1)
        self.blocks = Stack(*(ResBlock(channels) for _ in range(blocks)))
        self.head = conv(channels, 3, kernel=1, activation="none")

    def forward(self, feat_left, feat_right, coarse_left, coarse_right, monocular=False):
        if feat_left.shape != feat_right.shape:
            raise ShapeError(f"VFNet: left {tuple(feat_left.shape)} vs right {tuple(feat_right.shape)}")
        own = torch.cat([feat_left, feat_right], dim=0)
        other = own if monocular else swap_halves(own)
        rain = self.head(self.blocks(self.entry(torch.cat([own, other], dim=1))))
        out = torch.cat([coarse_left, coarse_right], dim=0) - rain
        if not self.training:
            out = out.clamp(0, 1)
        n = feat_left.shape[0]
        return out[:n], out[n:]


@dataclass
class StereoOutput:
    final_left: torch.Tensor
    final_right: torch.Tensor
    coarse_left: torch.Tensor
    coarse_right: torch.Tensor
    seg_left: torch.Tensor | None
    seg_right: torch.Tensor | None
    fused_left: torch.Tensor
    fused_right: torch.Tensor

    def swapped(self):
        return StereoOutput(self.final_right, self.final_left, self.coarse_right, self.coarse_left,
                            self.seg_right, self.seg_left, self.fused_right, self.fused_left)


class PRRNet(nn.Module):
    def __init__(self, num_classes=8, sadm_width=1.0, vf_channels=64, mode="stereo", use_seg=True):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.num_classes = num_classes
        self.mode = mode
        self.use_seg = use_seg
        self.sadm = SADM(num_classes, width=sadm_width)
        self.sfnet = SFNet(num_classes)
        self.vfnet = VFNet(self.sfnet.out_channels, vf_channels)

    def forward(self, rainy_left, rainy_right):
        if rainy_left.shape != rainy_right.shape:
            raise ShapeError(f"views differ: {tuple(rainy_left.shape)} vs {tuple(rainy_right.shape)}")
        n = rainy_left.shape[0]
        both = torch.cat([rainy_left, rainy_right], dim=0)
        sadm_out = self.sadm(both)
        coarse, seg = sadm_out.derained, sadm_out.seg_probs
        # without the segmentation task the fusion net gets no semantics at all
        prior = seg if self.use_seg else torch.zeros_like(seg)
        fused = self.sfnet(coarse, prior)
        final_l, final_r = self.vfnet(fused[:n], fused[n:], coarse[:n], coarse[n:],
                                      monocular=self.mode == "monocular")
        return StereoOutput(final_l, final_r, coarse[:n], coarse[n:], seg[:n], seg[n:], fused[:n], fused[n:])

    def zero_output_convs(self):
        self.sadm.derain_head.zero_()
        self.vfnet.head.zero_()
        return self
