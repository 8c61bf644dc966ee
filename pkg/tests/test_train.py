import dataclasses

import numpy as np
import pytest
import torch

from stereoderain.synth import ConfigError
from stereoderain.train import (BatchSampler, Trainer, TrainConfig, TrainingError, build_ablation_suite,
                                compute_losses, load_inference_model, stack_samples, train,
                                write_curve)


def tiny(**kw):
    base = dict(sadm_width=0.125, vf_channels=16, crop_size=32, max_iterations=6, seed=5)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.lr_initial, c.lr_final, c.batch_size) == (1e-4, 1e-5, 2)
        assert (c.lambda1, c.lambda2, c.lambda3) == (1.0, 0.2, 1.0)

    def test_loop_without_seg_task(self):
        with pytest.raises(ConfigError, match="segmentation task"):
            TrainConfig(enable_seg_task=False, enable_loop=True).validate()

    @pytest.mark.parametrize("kw", [dict(lr_final=1e-3), dict(batch_size=0), dict(crop_size=40),
                                    dict(lambda2=-1.0), dict(model="unet"), dict(mode="trinocular")])
    def test_invalid(self, kw):
        with pytest.raises((ConfigError, ValueError)):
            TrainConfig(**kw).validate()

    def test_lr_schedule(self):
        c = TrainConfig(max_iterations=100)
        assert c.lr_at(0) == 1e-4 and c.lr_at(79) == 1e-4
        assert c.lr_at(80) == 1e-5 and c.lr_at(99) == 1e-5


class TestAblationSuite:
    def test_rows(self):
        suite = build_ablation_suite(TrainConfig())
        assert [c.variant for c in suite] == ["PRRNet(D)", "PRRNet(D+S)", "PRRNet(D+S+L)",
                                              "EPRRNet(monocular)", "PRRNet(stereo)", "EPRRNet(stereo)"]
        for c in suite:
            c.validate()

    def test_controlled_differences(self):
        d, ds, dsl, _, st, _ = build_ablation_suite(TrainConfig(seed=3))
        assert (d.enable_seg_task, d.enable_loop, d.mode) == (False, False, "monocular")
        diff = {k for k, v in dsl.to_dict().items() if st.to_dict()[k] != v}
        assert diff == {"mode", "variant"}
        assert all(c.seed == 3 for c in (d, ds, dsl, st))


class TestSampler:
    def test_paired_crops(self, small_samples):
        data = stack_samples(small_samples)
        # plant a disparity-free marker: left and right identical so a shared crop must stay identical
        data["rainy_right"] = data["rainy_left"].clone()
        s = BatchSampler(data, 2, 16, seed=0)
        for _ in range(5):
            b = s.next()
            assert b["rainy_left"].shape == (2, 3, 16, 16)
            assert torch.equal(b["rainy_left"], b["rainy_right"])
            assert b["labels_left"].shape == (2, 16, 16)

    def test_epoch_covers_all(self, small_samples):
        s = BatchSampler(stack_samples(small_samples), 2, 0, seed=0)
        seen = s.next()["ids"] + s.next()["ids"]
        assert sorted(seen) == sorted(x.sample_id for x in small_samples)

    def test_state_roundtrip(self, small_samples):
        data = stack_samples(small_samples)
        a = BatchSampler(data, 2, 16, seed=1)
        a.next()
        st = a.state()
        b = BatchSampler(data, 2, 16, seed=99)
        b.set_state(st)
        assert torch.equal(a.next()["rainy_left"], b.next()["rainy_left"])


class TestRethinking:
    def test_loop_disabled_skips_stage_two(self, small_samples):
        t = Trainer(tiny(enable_loop=False), small_samples)
        assert t.frozen is None
        bundle, seg_ver = t.rethinking_step(t.sampler.next())
        assert seg_ver is None and float(bundle.l_con) == 0.0

    def test_frozen_gradients_zero(self, small_samples):
        t = Trainer(tiny(), small_samples)
        t.refresh_frozen()
        bundle, _, seg_ver = compute_losses(t.model, t.sampler.next(), t.config, t.frozen)
        bundle.l_total.backward()
        assert seg_ver is not None and bundle.l_con.item() > 0
        assert all(p.grad is None or not p.grad.any() for p in t.frozen.parameters())
        assert not any(p.requires_grad for p in t.frozen.parameters())

    def test_loss_con_reaches_derain_path(self, small_samples):
        t = Trainer(tiny(lambda1=0.0, lambda3=0.0), small_samples)
        t.refresh_frozen()
        batch = t.sampler.next()
        bundle, _, _ = compute_losses(t.model, batch, t.config, t.frozen)
        t.model.zero_grad()
        (bundle.l_con).backward()
        head = t.model.sadm.derain_head.conv.weight.grad
        assert head is not None and head.abs().sum() > 0

    def test_snapshot_immutability(self, small_samples):
        t = Trainer(tiny(), small_samples)
        batch = t.sampler.next()
        with torch.no_grad():
            out = t.model(batch["rainy_left"], batch["rainy_right"])
        coarse = torch.cat([out.coarse_left, out.coarse_right])
        _, seg_ver = t.rethinking_step(batch)
        # the update moved the live weights but left the stage II snapshot untouched
        assert any(not torch.equal(a, b) for a, b in zip(t.model.sadm.parameters(), t.frozen.parameters()))
        with torch.no_grad():
            assert torch.equal(t.frozen.segment(coarse), seg_ver.detach())

    def test_frozen_refreshes_every_step(self, small_samples):
        t = Trainer(tiny(), small_samples)
        t.step()
        t.refresh_frozen()
        assert all(torch.equal(a, b) for a, b in zip(t.model.sadm.parameters(), t.frozen.parameters()))

    def test_nan_aborts_with_name(self, small_samples):
        t = Trainer(tiny(), small_samples)
        batch = t.sampler.next()
        batch["clean_left"][0, 0, 0, 0] = float("nan")
        t.refresh_frozen()
        with pytest.raises(TrainingError, match="l_de"):
            compute_losses(t.model, batch, t.config, t.frozen)


class TestRuns:
    def test_curve_and_lr(self, small_samples):
        _, curve = train(tiny(max_iterations=5), small_samples)
        assert [r["iteration"] for r in curve] == list(range(5))
        assert [r["lr"] for r in curve] == [1e-4] * 4 + [1e-5]
        assert all(np.isfinite(r[k]) for r in curve for k in r)

    @pytest.mark.parametrize("model", ["prrnet", "eprrnet"])
    def test_deterministic(self, small_samples, model):
        kw = dict(model=model, enable_seg_task=model == "prrnet", enable_loop=model == "prrnet")
        _, a = train(tiny(**kw), small_samples)
        _, b = train(tiny(**kw), small_samples)
        assert a == b

    def test_seed_matters(self, small_samples):
        _, a = train(tiny(), small_samples)
        _, b = train(tiny(seed=6), small_samples)
        assert a != b

    def test_resume_matches_uninterrupted(self, small_samples, tmp_path):
        full = Trainer(tiny(), small_samples)
        full.run()
        part = Trainer(tiny(), small_samples)
        part.run(iterations=3)
        part.save(tmp_path / "state.ckpt")
        resumed = Trainer.resume(tmp_path / "state.ckpt", samples=small_samples)
        resumed.run()
        assert resumed.curve == full.curve
        for a, b in zip(resumed.model.parameters(), full.model.parameters()):
            assert torch.equal(a, b)

    def test_outputs_written(self, small_samples, tmp_path):
        cfg = tiny(max_iterations=2, checkpoint_every=1)
        trainer, curve = train(cfg, small_samples, out_dir=tmp_path)
        header = (tmp_path / "loss_curve.csv").read_text().splitlines()[0]
        assert header == "iteration,l_de,l_seg,l_con,l_view,l_total,lr"
        assert (tmp_path / "state_000001.ckpt").exists() and (tmp_path / "train_config.json").exists()
        model, config = load_inference_model(tmp_path / "model.ckpt")
        assert config == cfg
        for a, b in zip(model.parameters(), trainer.model.parameters()):
            assert torch.equal(a, b)

    def test_curve_csv_roundtrip_exact(self, tmp_path):
        row = {"iteration": 0, "l_de": 0.1 + 0.2, "l_seg": 1 / 3, "l_con": 0.0, "l_view": 2e-17,
               "l_total": 7.0, "lr": 1e-4}
        write_curve(tmp_path / "c.csv", [row])
        values = (tmp_path / "c.csv").read_text().splitlines()[1].split(",")
        assert float(values[1]) == row["l_de"] and float(values[2]) == row["l_seg"]

    def test_config_replace_preserves_validity(self):
        assert dataclasses.replace(TrainConfig(), seed=9).validate().seed == 9
