"""Command-line front end: ``stereoderain {synth,train,infer,eval,ablation}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import benchmark, checkpoint
from .checkpoint import CheckpointError
from .config import resolve_config, write_resolved
from .dataset import DatasetError, read_dataset, to_uint8, write_dataset
from .eprrnet import EPRRNet
from .synth import CameraRig, ConfigError, RainConfig, SceneConfig, SynthConfig, generate_samples
from .train import (TrainingError, build_ablation_suite, load_inference_model, make_segmenter,
                    save_segmenter, train, train_segmenter)

log = logging.getLogger("stereoderain")

# fixed segmentation colour lookup; class c uses PALETTE[c % len(PALETTE)]
PALETTE = np.array([
    (128, 64, 128), (244, 35, 232), (70, 70, 70), (102, 102, 156), (190, 153, 153), (153, 153, 153),
    (250, 170, 30), (220, 220, 0), (107, 142, 35), (152, 251, 152), (70, 130, 180), (220, 20, 60),
    (255, 0, 0), (0, 0, 142), (0, 0, 70), (0, 60, 100), (0, 80, 100), (0, 0, 230), (119, 11, 32),
    (0, 0, 0), (255, 255, 255), (128, 0, 0), (0, 128, 0), (128, 128, 0), (0, 0, 128), (128, 0, 128),
    (0, 128, 128), (64, 0, 0), (192, 0, 0), (64, 128, 0),
], dtype=np.uint8)


def colorize(labels):
    return PALETTE[np.asarray(labels) % len(PALETTE)]


def set_deterministic(enabled):
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def synth_config_from(params):
    h, w = params.dims()
    lo, hi = params.streak_range()
    return SynthConfig(scene=SceneConfig(num_classes=params.classes),
                       rain=RainConfig(min_streaks=lo, max_streaks=hi),
                       rig=CameraRig(params.focal_length_px, params.baseline, w, h))


def cmd_synth(args):
    cfg = resolve_config(args.config, {
        "globals": {"deterministic": args.deterministic or None},
        "synth": {"out": args.out, "count": args.count, "seed": args.seed, "size": args.size,
                  "classes": args.classes, "streaks": args.streaks},
    }, command="synth")
    if not cfg.synth.out:
        raise ConfigError("synth needs --out")
    sc = synth_config_from(cfg.synth)
    samples = generate_samples(cfg.synth.count, cfg.synth.seed, sc)
    write_dataset(samples, cfg.synth.out, cfg.synth.classes, sc.rig)
    write_resolved(cfg, cfg.synth.out)
    print(f"wrote {len(samples)} samples to {cfg.synth.out}")


def train_overrides(args):
    return {"model": args.model, "mode": args.mode, "max_iterations": args.max_iterations,
            "seed": args.seed, "lambda1": args.lambda1, "lambda2": args.lambda2, "lambda3": args.lambda3,
            "segmenter": args.segmenter, "dataset": args.data, "crop_size": args.crop_size,
            "batch_size": args.batch_size}


def cmd_train(args):
    cfg = resolve_config(args.config, {"globals": {"out": args.out, "deterministic": args.deterministic or None},
                                       "train": train_overrides(args)}, command="train")
    set_deterministic(cfg.globals.deterministic)
    samples, info = read_dataset(cfg.train.dataset)
    tc = cfg.train
    if tc.num_classes != info["K"]:
        raise ConfigError(f"config num_classes={tc.num_classes} but dataset has K={info['K']}")
    out = cfg.out_dir()
    write_resolved(cfg, out)
    train(tc, samples, out_dir=out)
    print(f"trained {tc.model} for {tc.max_iterations} iterations; outputs in {out}")


def _load_model(path, segmenter_spec):
    if path == "identity":
        return benchmark.IdentityModel()
    seg = None
    if segmenter_spec:
        meta = checkpoint.load_tensors(path)[1]
        seg = make_segmenter(segmenter_spec, int(meta["num_classes"]))
    return load_inference_model(path, segmenter=seg)[0]


def cmd_eval(args):
    cfg = resolve_config(args.config, {"globals": {"out": args.out, "deterministic": args.deterministic or None},
                                       "eval": {"checkpoint": args.checkpoint, "data": args.data, "tag": args.tag,
                                                "segmenter": args.segmenter}}, command="eval")
    set_deterministic(cfg.globals.deterministic)
    samples, info = read_dataset(cfg.eval.data)
    model = _load_model(cfg.eval.checkpoint, cfg.eval.segmenter)
    report = benchmark.run_benchmark(model, samples, cfg.eval.tag, info["K"],
                                     model_id=cfg.eval.checkpoint, dataset_id=cfg.eval.data)
    out = cfg.out_dir()
    write_resolved(cfg, out)
    benchmark.write_report_csv(out / "report.csv", [report])
    benchmark.write_report_csv(out / "per_sample.csv", [report], per_sample=True)
    table = benchmark.format_table([report])
    (out / "report.txt").write_text(table + "\n")
    print(table)


def _read_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def _pad16(img):
    h, w = img.shape[:2]
    ph, pw = (-h) % 16, (-w) % 16
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect") if ph or pw else img, (h, w)


def cmd_infer(args):
    cfg = resolve_config(args.config, {"globals": {"out": args.out, "deterministic": args.deterministic or None},
                                       "infer": {"checkpoint": args.checkpoint, "left": args.left,
                                                 "right": args.right, "segmaps": args.segmaps or None,
                                                 "labels_left": args.labels_left, "labels_right": args.labels_right,
                                                 "segmenter": args.segmenter}}, command="infer")
    set_deterministic(cfg.globals.deterministic)
    p = cfg.infer
    if not p.left:
        raise ConfigError("infer needs --left")
    model = _load_model(p.checkpoint, p.segmenter)
    left, (h, w) = _pad16(_read_png(p.left))
    right = _pad16(_read_png(p.right))[0] if p.right else left
    if right.shape != left.shape:
        raise ConfigError("left and right images differ in size")

    def tens(a):
        return torch.from_numpy(np.ascontiguousarray(a)).permute(2, 0, 1)[None].float()

    batch = {"rainy_left": tens(left), "rainy_right": tens(right), "ids": ["input"]}
    for side, path in (("left", p.labels_left), ("right", p.labels_right or p.labels_left)):
        lab = None
        if path:
            with Image.open(path) as im:
                lab = np.asarray(im, dtype=np.int64)
            lab = np.pad(lab, ((0, left.shape[0] - h), (0, left.shape[1] - w)), mode="reflect")
        batch[f"labels_{side}"] = torch.from_numpy(lab)[None] if lab is not None else None
    runner = model if isinstance(model, benchmark.IdentityModel) else benchmark.ModelRunner(model)
    fl, fr, sl, sr = runner.predict(batch)
    if isinstance(model, EPRRNet) and p.segmaps:
        with torch.no_grad():
            out = model(batch["rainy_left"], batch["rainy_right"],
                        labels=(batch["labels_left"], batch["labels_right"]))
        sl, sr = out.seg_left, out.seg_right
    out_dir = cfg.out_dir()
    write_resolved(cfg, out_dir)
    views = [("left", fl, sl)] + ([("right", fr, sr)] if p.right else [])
    for side, img, seg in views:
        arr = img[0].permute(1, 2, 0).numpy()[:h, :w]
        Image.fromarray(to_uint8(arr)).save(out_dir / f"derained_{side}.png")
        if p.segmaps and seg is not None:
            Image.fromarray(colorize(seg[0].argmax(0).numpy()[:h, :w])).save(out_dir / f"segmap_{side}.png")
    print(f"wrote derained images to {out_dir}")


def run_ablation(base, train_samples, bench_samples, num_classes, out_dir, segmenter_iterations=0,
                 variants=None):
    """Train every table variant on ``train_samples`` and evaluate on ``bench_samples``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    suite = build_ablation_suite(base)
    if variants is not None:
        suite = [c for c in suite if c.variant in variants]
    seg = None
    if segmenter_iterations:
        seg_model = train_segmenter(train_samples, num_classes, iterations=segmenter_iterations, seed=base.seed)
        save_segmenter(out_dir / "segmenter.ckpt", seg_model)
        seg = str(out_dir / "segmenter.ckpt")
    reports = []
    for config in suite:
        if config.model == "eprrnet" and seg is not None:
            config = type(config)(**{**config.to_dict(), "segmenter": f"trained:{seg}"})
        slug = "".join(ch if ch.isalnum() else "_" for ch in config.variant).strip("_")
        trainer, _ = train(config, train_samples, out_dir=out_dir / slug, log_every=0)
        report = benchmark.run_benchmark(trainer.model, bench_samples, config.variant, num_classes,
                                         model_id=str(out_dir / slug / "model.ckpt"))
        reports.append(report)
        log.info("%s: PSNR %.3f SSIM %.4f", config.variant, report.psnr, report.ssim)
    baseline = benchmark.run_benchmark(benchmark.IdentityModel(), bench_samples, "no-op", num_classes)
    benchmark.write_report_csv(out_dir / "ablation_report.csv", reports)
    benchmark.write_report_csv(out_dir / "baseline.csv", [baseline])
    (out_dir / "ablation_report.txt").write_text(benchmark.format_table(reports, baseline) + "\n")
    return reports, baseline


def cmd_ablation(args):
    cfg = resolve_config(args.config, {"globals": {"out": args.out, "deterministic": args.deterministic or None},
                                       "train": train_overrides(args)}, command="train")
    set_deterministic(cfg.globals.deterministic)
    train_samples, info = read_dataset(cfg.train.dataset)
    bench_samples, binfo = read_dataset(args.bench)
    if binfo["K"] != info["K"] or cfg.train.num_classes != info["K"]:
        raise ConfigError(f"class counts disagree: train data K={info['K']}, bench K={binfo['K']}, "
                          f"config K={cfg.train.num_classes}")
    out = cfg.out_dir()
    write_resolved(cfg, out)
    reports, baseline = run_ablation(cfg.train, train_samples, bench_samples, info["K"], out,
                                     segmenter_iterations=args.fit_segmenter)
    print(benchmark.format_table(reports, baseline))


def build_parser():
    parser = argparse.ArgumentParser(prog="stereoderain", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, deterministic kernels")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic stereo rain dataset")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", help="HxW, e.g. 128x128")
    p.add_argument("--classes", type=int)
    p.add_argument("--streaks", help="A..B streaks per sample")
    p.set_defaults(func=cmd_synth)

    def add_train_flags(p):
        p.add_argument("--data", help="training dataset directory")
        p.add_argument("--model", choices=("prrnet", "eprrnet"))
        p.add_argument("--mode", choices=("monocular", "stereo"))
        p.add_argument("--max-iterations", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--lambda1", type=float)
        p.add_argument("--lambda2", type=float)
        p.add_argument("--lambda3", type=float)
        p.add_argument("--segmenter")
        p.add_argument("--crop-size", type=int)
        p.add_argument("--batch-size", type=int)

    p = sub.add_parser("train", parents=[common], help="train PRRNet or EPRRNet")
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="benchmark a checkpoint ('identity' for the no-op baseline)")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--tag")
    p.add_argument("--segmenter")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="derain PNG images with a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--left")
    p.add_argument("--right")
    p.add_argument("--labels-left")
    p.add_argument("--labels-right")
    p.add_argument("--segmenter")
    p.add_argument("--segmaps", action="store_true", help="also write segmentation colour maps")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablation", parents=[common], help="train and evaluate the six table variants")
    add_train_flags(p)
    p.add_argument("--bench", required=True, help="benchmark dataset directory")
    p.add_argument("--fit-segmenter", type=int, default=0, metavar="ITERS",
                   help="fit a segmenter on clean training views and use it for the EPRRNet variants")
    p.set_defaults(func=cmd_ablation)
    return parser


def dispatch(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, DatasetError, CheckpointError, TrainingError, FileNotFoundError, ValueError) as e:
        print(f"stereoderain {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
