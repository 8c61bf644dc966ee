"""EPRRNet: coarse deraining, a pluggable segmentation prior, attention fusion and two-stream stereo fusion."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .blocks import DenseBlock, ShapeError, Stack, conv
from .prrnet import MODES, StereoOutput, swap_halves
from .synth import ConfigError

ATTENTION_WIDTHS = (32, 32, 32, 32, 32, 32, 16)


class CoarseDerainNet(nn.Module):
    """Pre-processing (conv + DenseBlock), 5 backbone DenseBlocks, post-processing (DenseBlock + conv).

    Predicts the rain layer; the output is the input minus that prediction.
    """

    def __init__(self, channels=16, backbone_blocks=5):
        super().__init__()
        self.pre = Stack(conv(3, channels), DenseBlock(channels))
        self.backbone = Stack(*(DenseBlock(channels) for _ in range(backbone_blocks)))
        self.post = Stack(DenseBlock(channels), conv(channels, 3, activation="none"))

    @property
    def output_conv(self):
        return self.post[-1]

    def dense_blocks(self):
        return [m for m in self.modules() if isinstance(m, DenseBlock)]

    def forward(self, rainy):
        out = rainy - self.post(self.backbone(self.pre(rainy)))
        return out if self.training else out.clamp(0, 1)


class Segmenter:
    """Source of the semantic prior: ``oracle`` (ground truth), ``trained`` (frozen SADM) or ``external``.

    Not a module: its parameters never train with the deraining pipeline.
    """

    def __init__(self, kind, num_classes, model=None, label_dir=None):
        if kind not in ("oracle", "trained", "external"):
            raise ConfigError(f"unknown segmenter kind {kind!r}")
        if kind == "trained":
            if model is None:
                raise ConfigError("trained segmenter needs a model")
            if model.num_classes != num_classes:
                raise ConfigError(f"segmenter has K={model.num_classes}, handle declares K={num_classes}")
            model.eval()
            for p in model.parameters():
                p.requires_grad_(False)
        if kind == "external" and label_dir is None:
            raise ConfigError("external segmenter needs a label directory")
        self.kind = kind
        self.num_classes = num_classes
        self.model = model
        self.label_dir = Path(label_dir) if label_dir is not None else None

    def one_hot(self, labels):
        if labels.max() >= self.num_classes or labels.min() < 0:
            raise ConfigError(f"label id outside [0, {self.num_classes})")
        return F.one_hot(labels.long(), self.num_classes).permute(0, 3, 1, 2)

    def __call__(self, coarse, labels=None, keys=None):
        if self.kind == "oracle":
            if labels is None:
                raise ConfigError("oracle segmenter requires ground-truth labels")
            return self.one_hot(labels).to(coarse.dtype)
        if self.kind == "trained":
            with torch.no_grad():
                return self.model.segment(coarse.detach()).to(coarse.dtype)
        if keys is None:
            raise ConfigError("external segmenter requires sample keys")
        maps = []
        for key in keys:
            path = self.label_dir / f"{key}.png"
            if not path.is_file():
                raise FileNotFoundError(f"no precomputed label map {path}")
            with Image.open(path) as im:
                maps.append(np.asarray(im, dtype=np.int64))
        return self.one_hot(torch.from_numpy(np.stack(maps))).to(coarse.dtype)


class ESFNet(nn.Module):
    def __init__(self, num_classes, channels=16, attention_widths=ATTENTION_WIDTHS):
        super().__init__()
        if len(attention_widths) != 7 or attention_widths[-1] != channels:
            raise ValueError(f"attention net needs 7 widths ending in {channels}")
        self.num_classes = num_classes
        self.encode = Stack(conv(3, channels), DenseBlock(channels))
        layers, c = [], channels + num_classes
        for i, w in enumerate(attention_widths):
            layers.append(conv(c, w, activation="none" if i == len(attention_widths) - 1 else "relu"))
            c = w
        self.attention = Stack(*layers)
        self.out_channels = 2 * channels

    def attention_weights(self, features, seg_probs):
        return torch.softmax(self.attention(torch.cat([features, seg_probs], dim=1)), dim=1)

    def forward(self, coarse, seg_probs):
        if coarse.shape[-2:] != seg_probs.shape[-2:] or coarse.shape[0] != seg_probs.shape[0]:
            raise ShapeError(f"ESFNet: image {tuple(coarse.shape)} and segmentation {tuple(seg_probs.shape)} differ")
        if seg_probs.shape[1] != self.num_classes:
            raise ShapeError(f"ESFNet: expected {self.num_classes} class channels, got {seg_probs.shape[1]}")
        feats = self.encode(coarse)
        weights = self.attention_weights(feats, seg_probs)
        return torch.cat([weights * feats, feats], dim=1)


class EVFNet(nn.Module):
    """Two weight-sharing streams exchanging features after every backbone DenseBlock."""

    def __init__(self, in_channels=32, channels=16, stages=5):
        super().__init__()
        self.entry = conv(in_channels, channels, kernel=1)
        self.stages = nn.ModuleList(DenseBlock(channels) for _ in range(stages))
        self.fuse = nn.ModuleList(conv(2 * channels, channels, kernel=1) for _ in range(stages))
        self.post = Stack(DenseBlock(channels), conv(channels, 3, activation="none"))

    @property
    def output_conv(self):
        return self.post[-1]

    @property
    def exchange_points(self):
        return len(self.fuse)

    def forward(self, feat_left, feat_right, coarse_left, coarse_right, monocular=False):
        if feat_left.shape != feat_right.shape:
            raise ShapeError(f"EVFNet: left {tuple(feat_left.shape)} vs right {tuple(feat_right.shape)}")
        x = self.entry(torch.cat([feat_left, feat_right], dim=0))
        for block, fuse in zip(self.stages, self.fuse):
            y = block(x)
            x = fuse(torch.cat([y, y if monocular else swap_halves(y)], dim=1))
        out = torch.cat([coarse_left, coarse_right], dim=0) - self.post(x)
        if not self.training:
            out = out.clamp(0, 1)
        n = feat_left.shape[0]
        return out[:n], out[n:]


class EPRRNet(nn.Module):
    def __init__(self, num_classes=8, mode="stereo", segmenter=None, attention_widths=ATTENTION_WIDTHS,
                 zero_init=True):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.num_classes = num_classes
        self.mode = mode
        self.coarse = CoarseDerainNet()
        self.esfnet = ESFNet(num_classes, attention_widths=attention_widths)
        self.evfnet = EVFNet(self.esfnet.out_channels)
        self.segmenter = segmenter or Segmenter("oracle", num_classes)
        if self.segmenter.num_classes != num_classes:
            raise ConfigError(f"segmenter K={self.segmenter.num_classes} does not match pipeline K={num_classes}")
        if zero_init:
            self.zero_output_convs()

    def zero_output_convs(self):
        self.coarse.output_conv.zero_()
        self.evfnet.output_conv.zero_()
        return self

    def forward(self, rainy_left, rainy_right, labels=(None, None), keys=(None, None)):
        if rainy_left.shape != rainy_right.shape:
            raise ShapeError(f"views differ: {tuple(rainy_left.shape)} vs {tuple(rainy_right.shape)}")
        n = rainy_left.shape[0]
        coarse = self.coarse(torch.cat([rainy_left, rainy_right], dim=0))
        # the prior is always computed from the coarse result, never the raw rainy input
        seg = torch.cat([self.segmenter(coarse[:n], labels[0], keys[0]),
                         self.segmenter(coarse[n:], labels[1], keys[1])], dim=0)
        fused = self.esfnet(coarse, seg)
        fine_l, fine_r = self.evfnet(fused[:n], fused[n:], coarse[:n], coarse[n:],
                                     monocular=self.mode == "monocular")
        return StereoOutput(fine_l, fine_r, coarse[:n], coarse[n:], seg[:n], seg[n:], fused[:n], fused[n:])
