"""On-disk stereo dataset: ``manifest`` plus one directory per sample.

Float arrays are stored as float32 ``.npy`` (bit-exact round trip) with
8-bit PNG previews; label maps are single-channel 8-bit PNGs.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .synth import CameraRig, StereoSample

FLOAT_FILES = {
    "rainy_L": "rainy_left", "rainy_R": "rainy_right",
    "clean_L": "clean_left", "clean_R": "clean_right",
    "rain_L": "rain_left", "rain_R": "rain_right",
    "disparity": "disparity",
}
LABEL_FILES = {"labels_L": "labels_left", "labels_R": "labels_right"}
PREVIEWS = ("rainy_L", "rainy_R", "clean_L", "clean_R")


class DatasetError(IOError):
    pass


def to_uint8(img):
    return (np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)


def write_manifest(path, entries):
    with open(path, "w") as f:
        for k, v in entries.items():
            f.write(f"{k}={v}\n")


def read_manifest(path):
    entries = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DatasetError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            entries[k.strip()] = v.strip()
    return entries


def write_dataset(samples, root, num_classes, rig):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if num_classes > 256:
        raise DatasetError("label PNGs hold at most 256 classes")
    ids = []
    for s in samples:
        d = root / s.sample_id
        d.mkdir(exist_ok=True)
        for fname, attr in FLOAT_FILES.items():
            np.save(d / f"{fname}.npy", np.asarray(getattr(s, attr), dtype=np.float32))
        for fname, attr in LABEL_FILES.items():
            Image.fromarray(np.asarray(getattr(s, attr)).astype(np.uint8)).save(d / f"{fname}.png")
        for fname in PREVIEWS:
            Image.fromarray(to_uint8(getattr(s, FLOAT_FILES[fname]))).save(d / f"{fname}.png")
        ids.append(s.sample_id)
    manifest = {
        "K": num_classes,
        "focal_length_px": repr(float(rig.focal_length_px)),
        "baseline": repr(float(rig.baseline)),
        "width": rig.image_width,
        "height": rig.image_height,
        "count": len(ids),
        "ids": ",".join(ids),
    }
    write_manifest(root / "manifest", manifest)
    return manifest


def _load_sample(d, sample_id, num_classes, shape):
    arrays = {}
    for fname, attr in FLOAT_FILES.items():
        path = d / f"{fname}.npy"
        try:
            arrays[attr] = np.load(path)
        except (OSError, ValueError) as e:
            raise DatasetError(f"sample {sample_id}: cannot read {path.name}: {e}") from e
    for fname, attr in LABEL_FILES.items():
        path = d / f"{fname}.png"
        try:
            with Image.open(path) as im:
                arrays[attr] = np.asarray(im, dtype=np.int64)
        except OSError as e:
            raise DatasetError(f"sample {sample_id}: cannot read {path.name}: {e}") from e
        if arrays[attr].max(initial=0) >= num_classes:
            raise DatasetError(
                f"sample {sample_id}: {path.name} contains class {arrays[attr].max()} >= K={num_classes}")
    H, W = shape
    for attr, arr in arrays.items():
        if arr.shape[:2] != (H, W):
            raise DatasetError(f"sample {sample_id}: {attr} has shape {arr.shape}, expected {H}x{W}")
    return StereoSample(sample_id=sample_id, **arrays)


def read_dataset(root):
    """Return ``(samples, info)`` where ``info`` holds K and the rig."""
    root = Path(root)
    mpath = root / "manifest"
    if not mpath.is_file():
        raise DatasetError(f"no manifest in {root}")
    m = read_manifest(mpath)
    try:
        num_classes = int(m["K"])
        rig = CameraRig(float(m["focal_length_px"]), float(m["baseline"]), int(m["width"]), int(m["height"]))
        count = int(m["count"])
        ids = [i for i in m.get("ids", "").split(",") if i]
    except KeyError as e:
        raise DatasetError(f"manifest missing key {e}") from e
    if len(ids) != count:
        raise DatasetError(f"manifest count={count} but lists {len(ids)} ids")
    samples = []
    for sid in ids:
        d = root / sid
        if not d.is_dir():
            raise DatasetError(f"sample {sid}: directory missing")
        samples.append(_load_sample(d, sid, num_classes, (rig.image_height, rig.image_width)))
    return samples, {"K": num_classes, "rig": rig}
