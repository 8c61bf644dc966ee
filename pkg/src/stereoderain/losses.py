"""Training objectives: reconstruction, segmentation, rethinking consistency, view loss, weighted total."""
from __future__ import annotations

from dataclasses import dataclass, fields

import torch

NORMS = ("l1", "l2")


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.2
    lambda3: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0, got {getattr(self, f.name)}")


@dataclass
class LossBundle:
    l_de: torch.Tensor
    l_seg: torch.Tensor
    l_con: torch.Tensor
    l_view: torch.Tensor
    l_total: torch.Tensor

    NAMES = ("l_de", "l_seg", "l_con", "l_view", "l_total")

    def as_floats(self):
        return {n: float(getattr(self, n).detach()) for n in self.NAMES}


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _distance(a, b, norm):
    if norm == "l1":
        return (a - b).abs().mean()
    if norm == "l2":
        return (a - b).pow(2).mean()
    raise ValueError(f"unknown norm {norm!r}; choose from {NORMS}")


def loss_de(pred, clean):
    _same_shape(pred, clean, "loss_de")
    return (pred - clean).pow(2).mean()


def loss_seg(probs, labels):
    """Mean per-pixel cross-entropy of an N x K x H x W probability map against N x H x W labels."""
    k = probs.shape[1]
    if labels.shape != probs.shape[:1] + probs.shape[2:]:
        raise ValueError(f"loss_seg: labels {tuple(labels.shape)} do not match probabilities {tuple(probs.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"loss_seg: label id out of range [0, {k})")
    picked = probs.gather(1, labels.long().unsqueeze(1)).squeeze(1)
    return -torch.log(picked.clamp_min(1e-12)).mean()


def loss_con(seg_ver, seg_up, norm="l1"):
    _same_shape(seg_ver, seg_up, "loss_con")
    return _distance(seg_ver, seg_up, norm)


def loss_view(derained_left, derained_right, gt_left, gt_right, norm="l1"):
    _same_shape(derained_left, gt_left, "loss_view (left)")
    _same_shape(derained_right, gt_right, "loss_view (right)")
    return _distance(derained_left, gt_left, norm) + _distance(derained_right, gt_right, norm)


def loss_total(l_de, l_seg, l_con, l_view, weights=None):
    weights = weights or LossWeights()
    zero = torch.zeros((), dtype=torch.as_tensor(l_de).dtype)
    l_de, l_seg, l_con, l_view = (torch.as_tensor(v) if v is not None else zero
                                  for v in (l_de, l_seg, l_con, l_view))
    total = l_de + weights.lambda1 * l_seg + weights.lambda2 * l_con + weights.lambda3 * l_view
    return LossBundle(l_de=l_de, l_seg=l_seg, l_con=l_con, l_view=l_view, l_total=total)
