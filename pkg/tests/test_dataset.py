import numpy as np
import pytest
from PIL import Image

from stereoderain.dataset import DatasetError, read_dataset, write_dataset
from stereoderain.synth import CameraRig

RIG = CameraRig(image_width=32, image_height=32)


def test_round_trip(small_samples, tmp_path):
    manifest = write_dataset(small_samples, tmp_path, 8, RIG)
    assert manifest["count"] == 4
    samples, info = read_dataset(tmp_path)
    assert info["K"] == 8 and info["rig"] == RIG
    assert [s.sample_id for s in samples] == [s.sample_id for s in small_samples]
    for a, b in zip(samples, small_samples):
        for name in a.ARRAYS:
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
            assert getattr(a, name).shape == getattr(b, name).shape


def test_manifest_contents(small_samples, tmp_path):
    write_dataset(small_samples, tmp_path, 8, RIG)
    text = (tmp_path / "manifest").read_text()
    for key in ("K=8", "focal_length_px=100.0", "baseline=1.0", "width=32", "height=32", "count=4"):
        assert key in text
    assert (tmp_path / small_samples[0].sample_id / "rainy_L.png").is_file()


def test_empty_directory_is_an_error(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        read_dataset(tmp_path)


def test_label_out_of_range(small_samples, tmp_path):
    write_dataset(small_samples, tmp_path, 8, RIG)
    sid = small_samples[1].sample_id
    labels = np.zeros((32, 32), np.uint8)
    labels[3, 3] = 9
    Image.fromarray(labels).save(tmp_path / sid / "labels_R.png")
    with pytest.raises(DatasetError, match=sid):
        read_dataset(tmp_path)


def test_corrupt_array_names_sample(small_samples, tmp_path):
    write_dataset(small_samples, tmp_path, 8, RIG)
    sid = small_samples[2].sample_id
    (tmp_path / sid / "clean_L.npy").write_bytes(b"junk")
    with pytest.raises(DatasetError, match=sid):
        read_dataset(tmp_path)


def test_missing_sample_directory(small_samples, tmp_path):
    write_dataset(small_samples, tmp_path, 8, RIG)
    sid = small_samples[0].sample_id
    for f in (tmp_path / sid).iterdir():
        f.unlink()
    (tmp_path / sid).rmdir()
    with pytest.raises(DatasetError, match=sid):
        read_dataset(tmp_path)
