"""Training loop behavior: determinism, resume, checkpoints, inference."""

import numpy as np
import pytest

from codlab.data import load_map, synth_generate
from codlab.model import load_checkpoint, toy_config
from codlab.trainer import TrainConfig, toy_train_config, train, infer


@pytest.fixture(scope="module")
def train_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("traindata")
    return synth_generate(8, 64, seed=42, out_dir=root)


def small_cfg(out_dir, **overrides):
    base = dict(model=toy_config(input_size=64), epochs=2, batch=4,
                lr_min=3e-4, lr_max=3e-3, seed=0, hflip=False, crop=False,
                out_dir=out_dir)
    base.update(overrides)
    return TrainConfig(**base)


class TestTrain:
    def test_loss_log_columns_and_finite(self, tmp_path, train_data):
        res = train(small_cfg(tmp_path / "run"), train_data)
        header = res.log_path.read_text().splitlines()[0]
        assert header == "iteration,lr,wbce,wiou,mse,total"
        assert len(res.rows) == 4  # 8 images, batch 4, 2 epochs
        assert all(np.isfinite(r[5]) for r in res.rows)

    def test_zero_epochs_checkpoint_equals_initialization(self, tmp_path, train_data):
        from codlab.model import Model

        res = train(small_cfg(tmp_path / "run", epochs=0), train_data)
        _, tensors = load_checkpoint(res.checkpoint_path)
        fresh = Model(toy_config(input_size=64), seed=0)
        for name, p in fresh.params.items():
            np.testing.assert_array_equal(tensors[f"param.{name}"], p.data)

    def test_fixed_seed_training_is_bit_reproducible(self, tmp_path, train_data):
        r1 = train(small_cfg(tmp_path / "a"), train_data)
        r2 = train(small_cfg(tmp_path / "b"), train_data)
        assert r1.checkpoint_path.read_bytes() == r2.checkpoint_path.read_bytes()

    def test_reproducible_with_augmentation(self, tmp_path, train_data):
        r1 = train(small_cfg(tmp_path / "a", hflip=True, crop=True), train_data)
        r2 = train(small_cfg(tmp_path / "b", hflip=True, crop=True), train_data)
        assert r1.checkpoint_path.read_bytes() == r2.checkpoint_path.read_bytes()

    def test_resume_matches_uninterrupted_run(self, tmp_path, train_data):
        full = train(small_cfg(tmp_path / "full", epochs=3), train_data)
        part = train(small_cfg(tmp_path / "part", epochs=2), train_data)
        resumed = train(small_cfg(tmp_path / "part", epochs=3,
                                  resume=part.checkpoint_path), train_data)
        # the first resumed iteration reproduces the uninterrupted loss
        full_rows = {r[0]: r for r in full.rows}
        first_resumed = resumed.rows[0]
        assert first_resumed[1:] == pytest.approx(full_rows[first_resumed[0]][1:], abs=0)
        assert resumed.checkpoint_path.read_bytes() == full.checkpoint_path.read_bytes()

    def test_checkpoint_save_load_save_byte_identical(self, tmp_path, train_data):
        from codlab.model import save_checkpoint

        res = train(small_cfg(tmp_path / "run"), train_data)
        kv, tensors = load_checkpoint(res.checkpoint_path)
        clone = tmp_path / "clone.ckpt"
        save_checkpoint(clone, kv, tensors)
        assert clone.read_bytes() == res.checkpoint_path.read_bytes()

    def test_boundary_supervision_trains(self, tmp_path, train_data):
        cfg = small_cfg(tmp_path / "run", model=toy_config(input_size=64, supervision="boundary"))
        res = train(cfg, train_data)
        assert all(np.isfinite(r[5]) for r in res.rows)
        # boundary labels got cached beside the ground truth
        cached = list((train_data.root / "GT").glob("*_bound.png"))
        assert cached

    def test_base_ablation_trains_without_mse(self, tmp_path, train_data):
        cfg = small_cfg(tmp_path / "run", model=toy_config(input_size=64, texture_branch=False))
        res = train(cfg, train_data)
        assert all(r[4] == 0.0 for r in res.rows)

    def test_empty_manifest_rejected(self, tmp_path, train_data):
        import dataclasses

        empty = dataclasses.replace(train_data, pairs=[])
        with pytest.raises(ValueError):
            train(small_cfg(tmp_path / "run"), empty)


class TestInfer:
    def test_deterministic_bytes(self, tmp_path, train_data):
        res = train(small_cfg(tmp_path / "run"), train_data)
        out1 = tmp_path / "pred1"
        out2 = tmp_path / "pred2"
        infer(res.checkpoint_path, train_data.root / "Imgs", out1)
        infer(res.checkpoint_path, train_data.root / "Imgs", out2)
        for p in sorted(out1.iterdir()):
            assert p.read_bytes() == (out2 / p.name).read_bytes()

    def test_base_checkpoint_infers(self, tmp_path, train_data):
        cfg = small_cfg(tmp_path / "run", model=toy_config(input_size=64, texture_branch=False))
        res = train(cfg, train_data)
        out = tmp_path / "pred"
        written = infer(res.checkpoint_path, train_data.root / "Imgs", out)
        assert len(written) == 8
        assert all(p.exists() for p in written)

    def test_toy_profile_beats_all_zeros_baseline(self, tmp_path):
        data = synth_generate(64, 96, seed=5, out_dir=tmp_path / "data")
        held = synth_generate(12, 96, seed=900, out_dir=tmp_path / "held")
        cfg = toy_train_config(tmp_path / "run", seed=0, epochs=13,
                               hflip=False, crop=False)
        res = train(cfg, data)
        assert res.final_total < res.initial_total
        out = tmp_path / "pred"
        infer(res.checkpoint_path, tmp_path / "held" / "Imgs", out)
        maes, zeros = [], []
        for _, gt in held.pairs:
            g = (load_map(gt) >= 128 / 255.0).astype(np.float64)
            p = load_map(out / gt.name)
            maes.append(np.abs(p - g).mean())
            zeros.append(g.mean())
        assert np.mean(maes) < np.mean(zeros)
