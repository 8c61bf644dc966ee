"""Layer vocabulary shared by every network: convs, ResBlock, DenseBlock, VGG16 encoder/decoder.

Tensors are NCHW. Each layer exposes ``output_shape((C, H, W))`` so stacks can be
shape-checked without a forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

ACTIVATIONS = ("relu", "none", "sigmoid", "softmax")
VGG16_PLAN = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512)
DECODER_PLAN = (512, 512, 512, "U", 512, 512, 256, "U", 256, 256, 128, "U", 128, 64, "U", 64, 64)


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int | None = None
    activation: str = "relu"

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and positive, got {self.kernel}")
        if self.stride < 1:
            raise ValueError("stride must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def pad(self):
        return self.kernel // 2 if self.padding is None else self.padding

    def output_size(self, n):
        return (n + 2 * self.pad - self.kernel) // self.stride + 1


def check_channels(x, expected, where):
    if x.shape[1] != expected:
        raise ShapeError(f"{where}: expected {expected} input channels, got {x.shape[1]}")


class Conv(nn.Module):
    """Convolution followed by its activation."""

    def __init__(self, spec: ConvSpec):
        super().__init__()
        self.spec = spec
        self.conv = nn.Conv2d(spec.in_channels, spec.out_channels, spec.kernel,
                              stride=spec.stride, padding=spec.pad)
        nonlinearity = "relu" if spec.activation == "relu" else "linear"
        nn.init.kaiming_normal_(self.conv.weight, nonlinearity=nonlinearity)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x):
        check_channels(x, self.spec.in_channels, "Conv")
        y = self.conv(x)
        act = self.spec.activation
        if act == "relu":
            return F.relu(y)
        if act == "sigmoid":
            return torch.sigmoid(y)
        if act == "softmax":
            return torch.softmax(y, dim=1)
        return y

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.spec.in_channels:
            raise ShapeError(f"Conv: expected {self.spec.in_channels} input channels, got {c}")
        return self.spec.out_channels, self.spec.output_size(h), self.spec.output_size(w)

    def zero_(self):
        with torch.no_grad():
            self.conv.weight.zero_()
            self.conv.bias.zero_()
        return self


def conv(cin, cout, kernel=3, activation="relu", stride=1):
    return Conv(ConvSpec(cin, cout, kernel=kernel, stride=stride, activation=activation))


class MaxPool(nn.Module):
    def forward(self, x):
        return F.max_pool2d(x, 2)

    def output_shape(self, shape):
        c, h, w = shape
        return c, h // 2, w // 2


class Upsample(nn.Module):
    def forward(self, x):
        return F.interpolate(x, scale_factor=2, mode="nearest")

    def output_shape(self, shape):
        c, h, w = shape
        return c, h * 2, w * 2


class Stack(nn.Sequential):
    def output_shape(self, shape):
        for layer in self:
            shape = layer.output_shape(shape)
        return shape

    def convs(self):
        return [m for m in self.modules() if isinstance(m, Conv)]


class ResBlock(nn.Module):
    """conv-ReLU-conv-ReLU-conv plus identity skip; no activation after the add."""

    def __init__(self, channels=64):
        super().__init__()
        self.channels = channels
        self.body = Stack(conv(channels, channels), conv(channels, channels),
                          conv(channels, channels, activation="none"))

    def forward(self, x):
        check_channels(x, self.channels, "ResBlock")
        return x + self.body(x)

    def output_shape(self, shape):
        return self.body.output_shape(shape)


class DenseBlock(nn.Module):
    def __init__(self, channels=16, layers=4, growth=8):
        super().__init__()
        self.channels = channels
        self.layers = nn.ModuleList(conv(channels + i * growth, growth) for i in range(layers))
        self.transition = conv(channels + layers * growth, channels, kernel=1)

    def layer_inputs(self):
        return [layer.spec.in_channels for layer in self.layers]

    def forward(self, x):
        check_channels(x, self.channels, "DenseBlock")
        feats = [x]
        for layer in self.layers:
            feats.append(layer(torch.cat(feats, dim=1)))
        return self.transition(torch.cat(feats, dim=1))

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.channels:
            raise ShapeError(f"DenseBlock: expected {self.channels} input channels, got {c}")
        return self.channels, h, w


def scaled(channels, width):
    return max(1, int(round(channels * width)))


def build_vgg16_encoder(in_channels=3, width=1.0):
    """13 convs with VGG16's channel plan; 4 max-pools (desk scale keeps an H/16 bottleneck)."""
    layers, c = [], in_channels
    for item in VGG16_PLAN:
        if item == "M":
            layers.append(MaxPool())
        else:
            out = scaled(item, width)
            layers.append(conv(c, out))
            c = out
    return Stack(*layers)


def build_decoder(in_channels, width=1.0):
    """Mirror of the encoder: 13 convs, 4 nearest-neighbour upsamplings."""
    layers, c = [], in_channels
    for item in DECODER_PLAN:
        if item == "U":
            layers.append(Upsample())
        else:
            out = scaled(item, width)
            layers.append(conv(c, out))
            c = out
    return Stack(*layers)


def load_external_weights(stack, tensors):
    """Copy externally supplied conv weights (e.g. classification-pretrained VGG16) in order.

    ``tensors`` is a sequence of ``(weight, bias)`` pairs, one per conv.
    """
    convs = stack.convs()
    if len(tensors) != len(convs):
        raise ShapeError(f"got {len(tensors)} weight pairs for {len(convs)} convs")
    with torch.no_grad():
        for layer, (w, b) in zip(convs, tensors):
            if tuple(w.shape) != tuple(layer.conv.weight.shape):
                raise ShapeError(f"weight shape {tuple(w.shape)} != {tuple(layer.conv.weight.shape)}")
            layer.conv.weight.copy_(torch.as_tensor(w))
            layer.conv.bias.copy_(torch.as_tensor(b))
