import pytest
import torch

from stereoderain.checkpoint import CheckpointError, load_model_state, load_tensors, save_model, save_tensors
from stereoderain.prrnet import PRRNet


def test_roundtrip_dtypes(tmp_path):
    t = {"w": torch.randn(3, 4), "step": torch.tensor([7], dtype=torch.int64),
         "mask": torch.tensor([1, 0, 255], dtype=torch.uint8), "scalar": torch.tensor(2.5)}
    save_tensors(tmp_path / "a.ckpt", t, {"note": "x", "n": 3})
    back, meta = load_tensors(tmp_path / "a.ckpt")
    assert meta == {"note": "x", "n": 3}
    for k, v in t.items():
        assert back[k].dtype == v.dtype and torch.equal(back[k], v)


def test_float64_stored_as_float32(tmp_path):
    save_tensors(tmp_path / "a.ckpt", {"w": torch.tensor([1 / 3], dtype=torch.float64)})
    assert load_tensors(tmp_path / "a.ckpt")[0]["w"].dtype == torch.float32


def test_deterministic_bytes(tmp_path):
    t = {"b": torch.arange(4.0), "a": torch.ones(2, 2)}
    save_tensors(tmp_path / "1.ckpt", t, {"z": 1, "a": 2})
    save_tensors(tmp_path / "3.ckpt", t, {"z": 1, "a": 2})
    assert (tmp_path / "1.ckpt").read_bytes() == (tmp_path / "3.ckpt").read_bytes()


def test_model_roundtrip(tmp_path):
    torch.manual_seed(0)
    a = PRRNet(4, sadm_width=0.125, vf_channels=16)
    save_model(tmp_path / "m.ckpt", a, {"num_classes": 4})
    torch.manual_seed(1)
    b = PRRNet(4, sadm_width=0.125, vf_channels=16)
    load_model_state(b, load_tensors(tmp_path / "m.ckpt")[0])
    for (n, p), (_, q) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(p, q), n


def test_missing_key_named(tmp_path):
    a = PRRNet(4, sadm_width=0.125, vf_channels=16)
    save_model(tmp_path / "m.ckpt", a)
    tensors = load_tensors(tmp_path / "m.ckpt")[0]
    victim = sorted(tensors)[0]
    del tensors[victim]
    with pytest.raises(CheckpointError, match=victim.removeprefix("model.")):
        load_model_state(a, tensors)


@pytest.mark.parametrize("payload", [b"", b"not an archive", b"SDTENSOR1\n"])
def test_corrupt(tmp_path, payload):
    (tmp_path / "bad.ckpt").write_bytes(payload)
    with pytest.raises(CheckpointError):
        load_tensors(tmp_path / "bad.ckpt")


def test_truncated(tmp_path):
    save_tensors(tmp_path / "a.ckpt", {"w": torch.randn(100)})
    data = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "a.ckpt").write_bytes(data[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_tensors(tmp_path / "a.ckpt")


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_tensors(tmp_path / "nope.ckpt")
