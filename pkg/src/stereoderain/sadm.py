"""Semantic-aware deraining module: one encoder, one task-conditioned decoder, two heads."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
from torch import nn

from .blocks import ShapeError, build_decoder, build_vgg16_encoder, conv


class Task(enum.IntEnum):
    DERAIN = 0
    SEGMENT = 1


def task_map(task, like):
    """Spatially broadcast one-hot task channels matching ``like``'s batch and grid."""
    n, _, h, w = like.shape
    onehot = torch.zeros(n, len(Task), h, w, dtype=like.dtype, device=like.device)
    onehot[:, int(task)] = 1
    return onehot


@dataclass
class SadmOutput:
    features: torch.Tensor
    derained: torch.Tensor | None = None
    seg_probs: torch.Tensor | None = None


class SADM(nn.Module):
    downsample = 16

    def __init__(self, num_classes=8, width=1.0):
        super().__init__()
        self.num_classes = num_classes
        self.encoder = build_vgg16_encoder(3, width)
        bottleneck = self.encoder.convs()[-1].spec.out_channels
        self.decoder = build_decoder(bottleneck + len(Task), width)
        trunk = self.decoder.convs()[-1].spec.out_channels
        self.derain_head = conv(trunk, 3, kernel=1, activation="none")
        self.seg_head = conv(trunk, num_classes, kernel=1, activation="softmax")
        self.bottleneck_channels = bottleneck
        self.width = width

    def encode(self, image):
        if image.dim() != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected N x 3 x H x W image batch, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % self.downsample or w % self.downsample:
            raise ShapeError(f"image size {h}x{w} is not divisible by {self.downsample}; pad the input first")
        return self.encoder(image)

    def decode(self, features, task, image=None):
        """Run the shared trunk under ``task``.

        The derain head predicts the rain layer; the derained image is ``image`` minus it,
        so ``image`` is required for ``Task.DERAIN``.
        """
        trunk = self.decoder(torch.cat([features, task_map(task, features)], dim=1))
        out = SadmOutput(features=features)
        if task == Task.DERAIN:
            if image is None:
                raise ValueError("DERAIN decoding needs the input image for the residual")
            derained = image - self.derain_head(trunk)
            out.derained = derained if self.training else derained.clamp(0, 1)
        else:
            out.seg_probs = self.seg_head(trunk)
        return out

    def forward(self, image):
        """Both task outputs from one shared encoding."""
        features = self.encode(image)
        derained = self.decode(features, Task.DERAIN, image).derained
        seg = self.decode(features, Task.SEGMENT).seg_probs
        return SadmOutput(features=features, derained=derained, seg_probs=seg)

    def derain(self, image):
        return self.decode(self.encode(image), Task.DERAIN, image).derained

    def segment(self, image):
        return self.decode(self.encode(image), Task.SEGMENT).seg_probs

    def shared_parameter_names(self):
        return [n for n, _ in self.named_parameters() if n.startswith(("encoder.", "decoder."))]

