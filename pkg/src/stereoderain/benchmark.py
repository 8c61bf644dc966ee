"""Benchmark execution and table-style reports."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .eprrnet import EPRRNet
from .metrics import miou, psnr, ssim
from .prrnet import PRRNet
from .synth import ConfigError


@dataclass
class MetricsReport:
    variant: str
    model_id: str
    dataset_id: str
    per_sample: list = field(default_factory=list)
    psnr: float = float("nan")
    ssim: float = float("nan")
    miou: float | None = None

    def aggregate(self):
        self.psnr = float(np.mean([r["psnr"] for r in self.per_sample]))
        self.ssim = float(np.mean([r["ssim"] for r in self.per_sample]))
        ious = [r["miou"] for r in self.per_sample if r.get("miou") is not None]
        self.miou = float(np.mean(ious)) if ious else None
        return self


class IdentityModel:
    """No-op 'deraining': returns its input. The baseline every trained variant must beat."""

    num_classes = None

    def predict(self, batch):
        return batch["rainy_left"], batch["rainy_right"], None, None


def _nhwc(t):
    return t.detach().permute(0, 2, 3, 1).cpu().numpy().astype(np.float64)


def _to_batch(samples):
    def imgs(attr):
        return torch.from_numpy(np.stack([getattr(s, attr) for s in samples])).permute(0, 3, 1, 2).float()

    def labels(attr):
        return torch.from_numpy(np.stack([getattr(s, attr) for s in samples])).long()

    return {"rainy_left": imgs("rainy_left"), "rainy_right": imgs("rainy_right"),
            "labels_left": labels("labels_left"), "labels_right": labels("labels_right"),
            "ids": [s.sample_id for s in samples]}


class ModelRunner:
    """Inference-mode wrapper giving (final_left, final_right, seg_left, seg_right)."""

    def __init__(self, model):
        self.model = model.eval()
        self.num_classes = model.num_classes

    def predict(self, batch):
        with torch.no_grad():
            if isinstance(self.model, EPRRNet):
                out = self.model(batch["rainy_left"], batch["rainy_right"],
                                 labels=(batch["labels_left"], batch["labels_right"]),
                                 keys=([f"{i}/labels_L" for i in batch["ids"]],
                                       [f"{i}/labels_R" for i in batch["ids"]]))
                return out.final_left, out.final_right, None, None
            out = self.model(batch["rainy_left"], batch["rainy_right"])
            return out.final_left, out.final_right, out.seg_left, out.seg_right


def check_compatible(runner, samples, num_classes):
    if not samples:
        raise ConfigError("benchmark dataset is empty")
    if runner.num_classes is not None and runner.num_classes != num_classes:
        raise ConfigError(f"model expects K={runner.num_classes}, dataset has K={num_classes}")
    if isinstance(getattr(runner, "model", None), PRRNet):
        h, w = samples[0].rainy_left.shape[:2]
        if h % 16 or w % 16:
            raise ConfigError(f"PRRNet needs image sides divisible by 16, dataset is {h}x{w}")


def run_benchmark(model, samples, variant, num_classes, model_id="", dataset_id="", batch_size=4):
    runner = model if isinstance(model, IdentityModel) else ModelRunner(model)
    check_compatible(runner, samples, num_classes)
    report = MetricsReport(variant=variant, model_id=model_id, dataset_id=dataset_id)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        fl, fr, sl, sr = runner.predict(_to_batch(chunk))
        fl, fr = _nhwc(fl), _nhwc(fr)
        for i, s in enumerate(chunk):
            row = {"sample_id": s.sample_id,
                   "psnr": 0.5 * (psnr(fl[i], s.clean_left) + psnr(fr[i], s.clean_right)),
                   "ssim": 0.5 * (ssim(fl[i], s.clean_left) + ssim(fr[i], s.clean_right))}
            if sl is not None:
                row["miou"] = 0.5 * (miou(sl[i].argmax(0).numpy(), s.labels_left, num_classes)
                                     + miou(sr[i].argmax(0).numpy(), s.labels_right, num_classes))
            report.per_sample.append(row)
    return report.aggregate()


def segmentation_scores(segment_fn, images, labels, num_classes, batch_size=8):
    """Mean mIoU and pixel accuracy of ``segment_fn`` (N x 3 x H x W -> N x K x H x W probabilities)."""
    ious, accs = [], []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            pred = segment_fn(images[start:start + batch_size]).argmax(1).numpy()
            gt = labels[start:start + batch_size].numpy()
            for p, g in zip(pred, gt):
                ious.append(miou(p, g, num_classes))
                accs.append(float(np.mean(p == g)))
    return float(np.mean(ious)), float(np.mean(accs))


def write_report_csv(path, reports, per_sample=False):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        if per_sample:
            w.writerow(["variant", "sample_id", "psnr", "ssim", "miou"])
            for r in reports:
                for row in r.per_sample:
                    w.writerow([r.variant, row["sample_id"], f"{row['psnr']:.6f}", f"{row['ssim']:.6f}",
                                "" if row.get("miou") is None else f"{row['miou']:.6f}"])
        else:
            w.writerow(["variant", "psnr", "ssim", "miou", "model", "dataset"])
            for r in reports:
                w.writerow([r.variant, f"{r.psnr:.4f}", f"{r.ssim:.4f}",
                            "" if r.miou is None else f"{r.miou:.4f}", r.model_id, r.dataset_id])


def format_table(reports, baseline=None):
    width = max([len("Methods")] + [len(r.variant) for r in reports])
    lines = [f"{'Methods':<{width}} |   PSNR    SSIM", "-" * (width + 18)]
    for r in reports:
        lines.append(f"{r.variant:<{width}} | {r.psnr:6.2f}  {r.ssim:6.3f}")
    if baseline is not None:
        lines.append("-" * (width + 18))
        lines.append(f"{'(no-op input)':<{width}} | {baseline.psnr:6.2f}  {baseline.ssim:6.3f}")
    return "\n".join(lines)
