"""Training: batching with paired crops, the semantic-rethinking step, LR schedule, resumable state."""
from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .eprrnet import EPRRNet, Segmenter
from .losses import LossWeights, loss_con, loss_de, loss_seg, loss_total, loss_view
from .prrnet import MODES, PRRNet
from .sadm import SADM
from .synth import ConfigError

log = logging.getLogger(__name__)

MODELS = ("prrnet", "eprrnet")
CURVE_COLUMNS = ("iteration", "l_de", "l_seg", "l_con", "l_view", "l_total", "lr")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: str = "prrnet"
    mode: str = "stereo"
    enable_seg_task: bool = True
    enable_loop: bool = True
    lr_initial: float = 1e-4
    lr_final: float = 1e-5
    lr_step_fraction: float = 0.8
    batch_size: int = 2
    max_iterations: int = 1000
    seed: int = 0
    lambda1: float = 1.0
    lambda2: float = 0.2
    lambda3: float = 1.0
    norm: str = "l1"
    crop_size: int = 64
    num_classes: int = 8
    sadm_width: float = 1.0
    vf_channels: int = 64
    segmenter: str = "oracle"
    dataset: str = ""
    checkpoint_every: int = 0
    variant: str = ""

    def validate(self):
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.enable_loop and not self.enable_seg_task:
            raise ConfigError("the rethinking loop needs the segmentation task (enable_seg_task)")
        if self.model == "eprrnet" and (self.enable_seg_task or self.enable_loop):
            raise ConfigError("eprrnet takes its semantics from a fixed segmenter; disable seg task and loop")
        if not 0 < self.lr_final <= self.lr_initial:
            raise ConfigError(f"need 0 < lr_final <= lr_initial, got {self.lr_final}, {self.lr_initial}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.crop_size and self.crop_size % 16:
            raise ConfigError(f"crop_size {self.crop_size} must be divisible by 16")
        if self.norm not in ("l1", "l2"):
            raise ConfigError(f"norm must be l1 or l2, got {self.norm!r}")
        LossWeights(self.lambda1, self.lambda2, self.lambda3)
        return self

    @property
    def weights(self):
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)

    def lr_at(self, iteration):
        drop = int(math.floor(self.lr_step_fraction * self.max_iterations))
        return self.lr_initial if iteration < drop else self.lr_final

    def to_dict(self):
        return dataclasses.asdict(self)


def build_ablation_suite(base):
    """The six table variants, in table order."""
    p = dict(model="prrnet", enable_seg_task=True, enable_loop=True)
    specs = [
        ("PRRNet(D)", dict(p, mode="monocular", enable_seg_task=False, enable_loop=False)),
        ("PRRNet(D+S)", dict(p, mode="monocular", enable_loop=False)),
        ("PRRNet(D+S+L)", dict(p, mode="monocular")),
        ("EPRRNet(monocular)", dict(model="eprrnet", mode="monocular", enable_seg_task=False, enable_loop=False)),
        ("PRRNet(stereo)", dict(p, mode="stereo")),
        ("EPRRNet(stereo)", dict(model="eprrnet", mode="stereo", enable_seg_task=False, enable_loop=False)),
    ]
    return [dataclasses.replace(base, variant=name, **kw) for name, kw in specs]


def build_model(config, segmenter=None):
    torch.manual_seed(config.seed)
    if config.model == "prrnet":
        return PRRNet(config.num_classes, sadm_width=config.sadm_width, vf_channels=config.vf_channels,
                      mode=config.mode, use_seg=config.enable_seg_task)
    return EPRRNet(config.num_classes, mode=config.mode,
                   segmenter=segmenter or make_segmenter(config.segmenter, config.num_classes))


def make_segmenter(spec, num_classes):
    """Parse ``oracle``, ``trained:<checkpoint>`` or ``external:<label dir>``."""
    kind, _, arg = spec.partition(":")
    if kind == "oracle":
        return Segmenter("oracle", num_classes)
    if kind == "trained":
        tensors, meta = checkpoint.load_tensors(arg)
        k = int(meta.get("num_classes", num_classes))
        if k != num_classes:
            raise ConfigError(f"segmenter checkpoint has K={k}, pipeline expects K={num_classes}")
        model = SADM(k, width=float(meta.get("width", 1.0)))
        checkpoint.load_model_state(model, tensors)
        return Segmenter("trained", num_classes, model=model)
    if kind == "external":
        return Segmenter("external", num_classes, label_dir=arg)
    raise ConfigError(f"bad segmenter spec {spec!r}")


def stack_samples(samples):
    """Samples to tensors: images N x 3 x H x W per view, labels N x H x W."""
    def imgs(attr):
        return torch.from_numpy(np.stack([getattr(s, attr) for s in samples])).permute(0, 3, 1, 2).contiguous().float()

    def labels(attr):
        return torch.from_numpy(np.stack([getattr(s, attr) for s in samples])).long()

    return {
        "rainy_left": imgs("rainy_left"), "rainy_right": imgs("rainy_right"),
        "clean_left": imgs("clean_left"), "clean_right": imgs("clean_right"),
        "labels_left": labels("labels_left"), "labels_right": labels("labels_right"),
        "ids": [s.sample_id for s in samples],
    }


def _crop(batch, y, x, size):
    out = {}
    for k, v in batch.items():
        if k == "ids":
            out[k] = v
        else:
            out[k] = v[..., y:y + size, x:x + size]
    return out


class BatchSampler:
    """Epoch-wise shuffled batches with one crop window shared by both views of a sample."""

    def __init__(self, data, batch_size, crop_size, seed):
        self.data = data
        self.n = len(data["ids"])
        if self.n == 0:
            raise ConfigError("dataset is empty")
        self.batch_size = batch_size
        self.crop_size = crop_size
        self.rng = np.random.default_rng(seed)
        self.order, self.pos = [], 0

    def _next_index(self):
        if self.pos >= len(self.order):
            self.order, self.pos = list(self.rng.permutation(self.n)), 0
        i = int(self.order[self.pos])
        self.pos += 1
        return i

    def next(self):
        idx = [self._next_index() for _ in range(self.batch_size)]
        h, w = self.data["rainy_left"].shape[-2:]
        size = self.crop_size or min(h, w)
        parts = []
        for i in idx:
            y = int(self.rng.integers(0, h - size + 1))
            x = int(self.rng.integers(0, w - size + 1))
            one = {k: (v[i:i + 1] if k != "ids" else [v[i]]) for k, v in self.data.items()}
            parts.append(_crop(one, y, x, size))
        batch = {k: torch.cat([p[k] for p in parts]) for k in parts[0] if k != "ids"}
        batch["ids"] = [p["ids"][0] for p in parts]
        return batch

    def state(self):
        return {"rng": self.rng.bit_generator.state, "order": [int(i) for i in self.order], "pos": self.pos}

    def set_state(self, state):
        self.rng.bit_generator.state = state["rng"]
        self.order, self.pos = list(state["order"]), int(state["pos"])


def check_finite(named):
    for name, t in named.items():
        if t is not None and not torch.isfinite(t).all():
            raise TrainingError(f"non-finite values in {name} (first non-finite tensor)")


def compute_losses(model, batch, config, frozen_sadm=None):
    """Forward the pipeline and build the loss bundle; ``frozen_sadm`` enables the verification stage."""
    w = config.weights
    if isinstance(model, EPRRNet):
        out = model(batch["rainy_left"], batch["rainy_right"],
                    labels=(batch["labels_left"], batch["labels_right"]))
    else:
        out = model(batch["rainy_left"], batch["rainy_right"])
    coarse = torch.cat([out.coarse_left, out.coarse_right])
    clean = torch.cat([batch["clean_left"], batch["clean_right"]])
    labels = torch.cat([batch["labels_left"], batch["labels_right"]])
    l_de = loss_de(coarse, clean)
    l_seg = l_con = None
    seg_ver = None
    if isinstance(model, PRRNet):
        seg_up = torch.cat([out.seg_left, out.seg_right])
        if config.enable_seg_task:
            l_seg = loss_seg(seg_up, labels)
        if config.enable_loop:
            if frozen_sadm is None:
                raise ConfigError("loop enabled but no verification copy supplied")
            # gradients reach the derained image through the frozen copy, never its weights
            seg_ver = frozen_sadm.segment(coarse)
            l_con = loss_con(seg_ver, seg_up, config.norm)
    l_view = loss_view(out.final_left, out.final_right, batch["clean_left"], batch["clean_right"], config.norm)
    bundle = loss_total(l_de, l_seg, l_con, l_view, w)
    check_finite({"coarse": coarse, "final_left": out.final_left, "final_right": out.final_right,
                  "l_de": bundle.l_de, "l_seg": bundle.l_seg, "l_con": bundle.l_con,
                  "l_view": bundle.l_view, "l_total": bundle.l_total})
    return bundle, out, seg_ver


def make_frozen_copy(sadm):
    frozen = copy.deepcopy(sadm)
    for p in frozen.parameters():
        p.requires_grad_(False)
    return frozen


class Trainer:
    def __init__(self, config, samples=None, data=None, segmenter=None):
        self.config = config.validate()
        self.data = data if data is not None else stack_samples(samples)
        self.model = build_model(config, segmenter)
        self.model.train()
        self.optimizer = torch.optim.Adam([p for p in self.model.parameters() if p.requires_grad],
                                          lr=config.lr_initial)
        self.sampler = BatchSampler(self.data, config.batch_size, config.crop_size, config.seed)
        self.frozen = make_frozen_copy(self.model.sadm) if config.model == "prrnet" and config.enable_loop else None
        self.iteration = 0
        self.curve = []

    def refresh_frozen(self):
        self.frozen.load_state_dict(self.model.sadm.state_dict())

    def rethinking_step(self, batch):
        """One update: stage I with live weights, stage II through a fresh frozen snapshot."""
        if self.frozen is not None:
            self.refresh_frozen()
        lr = self.config.lr_at(self.iteration)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        bundle, out, seg_ver = compute_losses(self.model, batch, self.config, self.frozen)
        self.optimizer.zero_grad(set_to_none=True)
        bundle.l_total.backward()
        self.optimizer.step()
        row = {"iteration": self.iteration, **bundle.as_floats(), "lr": lr}
        self.curve.append(row)
        self.iteration += 1
        return bundle, seg_ver

    def step(self):
        return self.rethinking_step(self.sampler.next())[0]

    def run(self, iterations=None, out_dir=None, log_every=100):
        end = self.config.max_iterations if iterations is None else min(self.iteration + iterations,
                                                                         self.config.max_iterations)
        while self.iteration < end:
            bundle = self.step()
            if log_every and self.iteration % log_every == 0:
                log.info("iter %d  l_total %.5f  l_de %.5f  l_view %.5f", self.iteration,
                         float(bundle.l_total), float(bundle.l_de), float(bundle.l_view))
            every = self.config.checkpoint_every
            if out_dir is not None and every and self.iteration % every == 0:
                self.save(Path(out_dir) / f"state_{self.iteration:06d}.ckpt")
        return self.curve

    def save(self, path):
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        opt = self.optimizer.state_dict()
        for idx, st in opt["state"].items():
            for k, v in st.items():
                tensors[f"optim.{idx}.{k}"] = torch.as_tensor(v)
        meta = {"kind": "train_state", "iteration": self.iteration, "config": self.config.to_dict(),
                "sampler": self.sampler.state(), "curve": self.curve,
                "num_classes": self.config.num_classes}
        checkpoint.save_tensors(path, tensors, meta)

    @classmethod
    def resume(cls, path, samples=None, data=None, segmenter=None):
        tensors, meta = checkpoint.load_tensors(path)
        config = TrainConfig(**meta["config"])
        trainer = cls(config, samples=samples, data=data, segmenter=segmenter)
        checkpoint.load_model_state(trainer.model, tensors)
        opt = trainer.optimizer.state_dict()
        state = {}
        for name, t in tensors.items():
            if name.startswith("optim."):
                _, idx, key = name.split(".", 2)
                state.setdefault(int(idx), {})[key] = t.clone()
        opt["state"] = state
        trainer.optimizer.load_state_dict(opt)
        trainer.iteration = int(meta["iteration"])
        trainer.sampler.set_state(meta["sampler"])
        trainer.curve = list(meta["curve"])
        return trainer


def save_inference_checkpoint(path, model, config):
    checkpoint.save_model(path, model, {"kind": "model", "config": config.to_dict(),
                                        "num_classes": config.num_classes})


def load_inference_model(path, segmenter=None):
    tensors, meta = checkpoint.load_tensors(path)
    if "config" not in meta:
        raise ConfigError(f"{path} carries no model config")
    config = TrainConfig(**meta["config"])
    model = build_model(config, segmenter)
    checkpoint.load_model_state(model, tensors)
    model.eval()
    return model, config


def write_curve(path, curve):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CURVE_COLUMNS)
        for row in curve:
            w.writerow([row["iteration"]] + [repr(float(row[c])) for c in CURVE_COLUMNS[1:]])


def train(config, samples, out_dir=None, segmenter=None, log_every=100):
    """Full run; returns ``(trainer, curve)`` and writes checkpoint + CSV when ``out_dir`` is set."""
    trainer = Trainer(config, samples=samples, segmenter=segmenter)
    trainer.run(out_dir=out_dir, log_every=log_every)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_inference_checkpoint(out / "model.ckpt", trainer.model, config)
        write_curve(out / "loss_curve.csv", trainer.curve)
        (out / "train_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    return trainer, trainer.curve


def train_segmenter(samples, num_classes, width=0.25, iterations=500, lr=1e-3, batch_size=2, seed=0,
                    crop_size=0, source="clean"):
    """Fit a SADM in SEGMENT mode on clean views only; used as the frozen 'trained' segmenter."""
    torch.manual_seed(seed)
    model = SADM(num_classes, width=width)
    data = stack_samples(samples)
    # both views are independent training images
    images = torch.cat([data[f"{source}_left"], data[f"{source}_right"]])
    labels = torch.cat([data["labels_left"], data["labels_right"]])
    flat = {"rainy_left": images, "labels_left": labels, "ids": list(range(len(images)))}
    sampler = BatchSampler(flat, batch_size, crop_size, seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for _ in range(iterations):
        b = sampler.next()
        loss = loss_seg(model.segment(b["rainy_left"]), b["labels_left"])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    model.eval()
    return model


def save_segmenter(path, model):
    checkpoint.save_model(path, model, {"kind": "segmenter", "num_classes": model.num_classes,
                                        "width": model.width})

