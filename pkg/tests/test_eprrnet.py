import numpy as np
import pytest
import torch
from PIL import Image

from stereoderain.blocks import DenseBlock
from stereoderain.eprrnet import CoarseDerainNet, EPRRNet, ESFNet, EVFNet, Segmenter
from stereoderain.sadm import SADM
from stereoderain.synth import ConfigError


def labels_like(n=1, h=32, w=32, k=4, seed=0):
    return torch.randint(0, k, (n, h, w), generator=torch.Generator().manual_seed(seed))


class TestCoarse:
    def test_zero_output_conv_identity(self):
        net = CoarseDerainNet()
        net.output_conv.zero_()
        x = torch.rand(2, 3, 24, 24)
        assert torch.equal(net(x), x)

    def test_shape_and_width(self):
        net = CoarseDerainNet()
        assert net(torch.rand(1, 3, 128, 128)).shape == (1, 3, 128, 128)
        assert all(b.channels == 16 for b in net.dense_blocks())

    def test_seven_dense_blocks(self):
        net = CoarseDerainNet()
        assert len(net.dense_blocks()) == 7
        assert sum(isinstance(m, DenseBlock) for m in net.pre) == 1
        assert len(net.backbone) == 5
        assert sum(isinstance(m, DenseBlock) for m in net.post) == 1


class TestSegmenter:
    def test_oracle_argmax_is_ground_truth(self):
        seg = Segmenter("oracle", 4)
        lab = labels_like()
        probs = seg(torch.rand(1, 3, 32, 32), lab)
        assert torch.equal(probs.argmax(1), lab)
        assert torch.equal(probs.sum(1), torch.ones(1, 32, 32))

    def test_oracle_without_labels(self):
        with pytest.raises(ConfigError, match="labels"):
            Segmenter("oracle", 4)(torch.rand(1, 3, 32, 32))

    def test_k_mismatch(self):
        with pytest.raises(ConfigError):
            EPRRNet(num_classes=8, segmenter=Segmenter("oracle", 4))
        with pytest.raises(ConfigError):
            Segmenter("trained", 8, model=SADM(4, width=0.125))

    def test_trained_is_frozen(self):
        torch.manual_seed(0)
        model = SADM(4, width=0.125)
        seg = Segmenter("trained", 4, model=model)
        x = torch.rand(1, 3, 32, 32, requires_grad=True)
        p = seg(x)
        assert p.shape == (1, 4, 32, 32) and not p.requires_grad
        assert not any(q.requires_grad for q in model.parameters())

    def test_external_reads_label_maps(self, tmp_path):
        lab = labels_like().numpy()[0].astype(np.uint8)
        (tmp_path / "s1").mkdir()
        Image.fromarray(lab).save(tmp_path / "s1" / "labels_L.png")
        seg = Segmenter("external", 4, label_dir=tmp_path)
        probs = seg(torch.rand(1, 3, 32, 32), keys=["s1/labels_L"])
        assert np.array_equal(probs.argmax(1)[0].numpy(), lab)
        with pytest.raises(FileNotFoundError):
            seg(torch.rand(1, 3, 32, 32), keys=["missing"])


class TestESFNet:
    def test_attention_is_simplex(self):
        torch.manual_seed(0)
        net = ESFNet(8)
        for _ in range(5):
            f = net.encode(torch.rand(1, 3, 16, 16))
            w = net.attention_weights(f, torch.softmax(torch.randn(1, 8, 16, 16), 1))
            assert w.shape == (1, 16, 16, 16)
            torch.testing.assert_close(w.sum(1), torch.ones(1, 16, 16), atol=1e-6, rtol=0)
            assert w.min() >= 0 and w.max() <= 1

    def test_constant_logits_uniform(self):
        net = ESFNet(8)
        last = net.attention[-1]
        last.zero_()
        with torch.no_grad():
            last.conv.bias.fill_(0.7)
        w = net.attention_weights(net.encode(torch.rand(1, 3, 8, 8)), torch.rand(1, 8, 8, 8))
        torch.testing.assert_close(w, torch.full_like(w, 1 / 16))

    def test_output_layout(self):
        torch.manual_seed(0)
        net = ESFNet(8)
        x, seg = torch.rand(1, 3, 16, 16), torch.softmax(torch.randn(1, 8, 16, 16), 1)
        out = net(x, seg)
        assert out.shape == (1, 32, 16, 16)
        f = net.encode(x)
        torch.testing.assert_close(out[:, 16:], f)
        torch.testing.assert_close(out[:, :16], net.attention_weights(f, seg) * f)

    def test_seven_attention_layers(self):
        net = ESFNet(8)
        assert len(net.attention.convs()) == 7
        assert net.attention.convs()[0].spec.in_channels == 16 + 8


class TestEVFNet:
    def setup_method(self):
        torch.manual_seed(0)
        self.net = EVFNet()
        with torch.no_grad():
            self.net.output_conv.conv.weight.normal_(0, 0.1)
        self.a, self.b = torch.randn(1, 32, 16, 16), torch.randn(1, 32, 16, 16)
        self.ca, self.cb = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)

    def test_swap_equivariance(self):
        l1, r1 = self.net(self.a, self.b, self.ca, self.cb)
        l2, r2 = self.net(self.b, self.a, self.cb, self.ca)
        torch.testing.assert_close(l1, r2, atol=1e-5, rtol=0)
        torch.testing.assert_close(r1, l2, atol=1e-5, rtol=0)

    def test_identical_inputs(self):
        l, r = self.net(self.a, self.a.clone(), self.ca, self.ca.clone())
        assert torch.equal(l, r)

    def test_five_exchange_points(self):
        assert self.net.exchange_points == 5 == len(self.net.stages)
        calls = []
        hooks = [f.register_forward_hook(lambda m, i, o: calls.append(i[0].shape[1])) for f in self.net.fuse]
        self.net(self.a, self.b, self.ca, self.cb)
        for h in hooks:
            h.remove()
        assert calls == [32] * 5

    def test_other_view_matters(self):
        l1, _ = self.net(self.a, self.b, self.ca, self.cb)
        l2, _ = self.net(self.a, torch.randn(1, 32, 16, 16), self.ca, self.cb)
        assert (l1 - l2).abs().max() > 0


class TestEPRRNet:
    def make(self, mode="stereo"):
        torch.manual_seed(0)
        net = EPRRNet(num_classes=8, mode=mode, zero_init=False)
        return net

    def test_zero_init_identity(self):
        net = EPRRNet(num_classes=4)
        x, y = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
        out = net(x, y, labels=(labels_like(h=16, w=16), labels_like(h=16, w=16, seed=1)))
        assert torch.equal(out.coarse_left, x) and torch.equal(out.final_left, x)
        assert torch.equal(out.coarse_right, y) and torch.equal(out.final_right, y)

    def test_shapes(self):
        net = self.make()
        lab = labels_like(h=128, w=128, k=8)
        out = net(torch.rand(1, 3, 128, 128), torch.rand(1, 3, 128, 128), labels=(lab, lab))
        assert out.final_left.shape == out.coarse_right.shape == (1, 3, 128, 128)
        assert out.seg_left.shape == (1, 8, 128, 128)
        assert out.fused_left.shape == (1, 32, 128, 128)

    def test_segmenter_sees_coarse_output(self):
        net = self.make()
        seen = []

        class Spy(Segmenter):
            def __call__(self, coarse, labels=None, keys=None):
                seen.append(coarse)
                return super().__call__(coarse, labels, keys)

        net.segmenter = Spy("oracle", 8)
        x, y = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
        lab = labels_like(h=16, w=16, k=8)
        out = net(x, y, labels=(lab, lab))
        assert torch.equal(seen[0], out.coarse_left) and torch.equal(seen[1], out.coarse_right)
        assert not torch.equal(seen[0], x)

    def test_swap_equivariance(self):
        net = self.make()
        x, y = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
        lx, ly = labels_like(h=16, w=16, k=8), labels_like(h=16, w=16, k=8, seed=3)
        a = net(x, y, labels=(lx, ly))
        b = net(y, x, labels=(ly, lx)).swapped()
        torch.testing.assert_close(a.final_left, b.final_left, atol=1e-5, rtol=0)
        torch.testing.assert_close(a.final_right, b.final_right, atol=1e-5, rtol=0)

    def test_monocular_ignores_other_view(self):
        net = self.make("monocular")
        x = torch.rand(1, 3, 16, 16)
        lab = labels_like(h=16, w=16, k=8)
        a = net(x, torch.rand(1, 3, 16, 16), labels=(lab, lab)).final_left
        b = net(x, torch.rand(1, 3, 16, 16), labels=(lab, lab)).final_left
        torch.testing.assert_close(a, b, atol=1e-6, rtol=0)
