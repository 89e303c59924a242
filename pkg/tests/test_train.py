import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afami import autodiff as ad
from afami.phantom import OrganSpec, PhantomConfig, generate_dataset
from afami.rng import stream
from afami.segnet import load_checkpoint
from afami.train import (
    AdamState,
    Batch,
    TrainConfig,
    mixup,
    one_hot,
    optimizer_step,
    read_log,
    sample_patches,
    train,
)
from afami.volume import LabelVolume, Volume


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    cfg = PhantomConfig(
        dims=(8, 16, 16),
        spacing_mm=(2.0, 2.0, 3.0),
        organ_specs=[OrganSpec(1, (0.2, 0.3), ((2, 3), (3, 4), (3, 4)))],
        seed=1,
    )
    generate_dataset(cfg, 5, root)
    return root / "manifest.json"


def tiny_cfg(manifest, out, **kw):
    base = dict(
        manifest=str(manifest),
        output_dir=str(out),
        patch_size=(8, 8, 8),
        patches_per_scan=2,
        iterations=3,
        net={"depth": 2, "base_channels": 2},
        checkpoint_interval=2,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestSamplePatches:
    vol = Volume(np.arange(6 * 7 * 8, dtype=np.float32).reshape(6, 7, 8), (1, 1, 1))
    labels = LabelVolume(np.zeros((6, 7, 8), np.uint8), (1, 1, 1), 2)

    def test_whole_volume(self):
        [(patch, target)], corners = sample_patches(self.vol, self.labels, 1, (6, 7, 8), np.random.default_rng(0))
        assert corners == [(0, 0, 0)]
        np.testing.assert_array_equal(patch[0], self.vol.data)
        assert target.shape == (2, 6, 7, 8)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6), st.tuples(st.integers(1, 6), st.integers(1, 7), st.integers(1, 8)))
    def test_corners_in_bounds(self, seed, ps):
        patches, corners = sample_patches(self.vol, self.labels, 4, ps, np.random.default_rng(seed))
        for c in corners:
            assert all(0 <= a <= d - p for a, d, p in zip(c, self.vol.dims, ps))
        for (patch, _), c in zip(patches, corners):
            assert patch[0, 0, 0, 0] == self.vol.data[c]

    def test_same_seed_same_corners(self):
        a = sample_patches(self.vol, self.labels, 4, (2, 3, 4), stream(3, "x"))[1]
        b = sample_patches(self.vol, self.labels, 4, (2, 3, 4), stream(3, "x"))[1]
        assert a == b

    def test_too_small(self):
        with pytest.raises(ValueError):
            sample_patches(self.vol, self.labels, 1, (7, 7, 8), np.random.default_rng(0))


class TestMixup:
    def batches(self, seed=0):
        rng = np.random.default_rng(seed)
        imgs = rng.uniform(-1, 1, (2, 2, 1, 2, 2, 2)).astype(np.float32)
        targets = one_hot(rng.integers(0, 3, (2, 2, 2, 2, 2)), 3)
        return Batch(imgs[0], targets[0]), Batch(imgs[1], targets[1])

    def test_coef_one(self):
        a, b = self.batches()
        out = mixup(a, b, 0.2, coef=1.0)
        np.testing.assert_array_equal(out.images, a.images)
        np.testing.assert_array_equal(out.targets, a.targets)

    def test_coef_half(self):
        a, b = self.batches()
        out = mixup(a, b, 0.2, coef=0.5)
        np.testing.assert_allclose(out.images, (a.images + b.images) / 2, atol=1e-7)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6))
    def test_simplex_and_range(self, seed):
        a, b = self.batches(seed)
        out = mixup(a, b, 0.2, rng=np.random.default_rng(seed))
        np.testing.assert_allclose(out.targets.sum(axis=1), 1.0, atol=1e-6)
        assert out.images.min() >= -1 and out.images.max() <= 1

    def test_shape_mismatch(self):
        a, b = self.batches()
        with pytest.raises(ValueError):
            mixup(a, b.take([0]), 0.2, coef=0.5)


class TestAdam:
    def test_first_step_is_lr_sign(self):
        p = {"w": ad.param(np.array([1.0, 1.0, 1.0]))}
        g = {"w": np.array([0.5, -3.0, 1e-3])}
        optimizer_step(p, g, AdamState(), lr=1e-3)
        np.testing.assert_allclose(p["w"].value, 1.0 - 1e-3 * np.sign(g["w"]), atol=1e-8)

    def test_zero_grad_no_move(self):
        p = {"w": ad.param(np.array([2.0]))}
        optimizer_step(p, {"w": np.zeros(1)}, AdamState(), lr=1e-3)
        assert p["w"].value[0] == 2.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            optimizer_step({"w": ad.param(np.zeros(2))}, {"w": np.zeros(3)}, AdamState(), 1e-3)

    def test_deterministic_trajectory(self):
        def run():
            p = {"w": ad.param(np.array([0.3, -0.2]))}
            st_ = AdamState()
            for k in range(5):
                optimizer_step(p, {"w": p["w"].value * (k + 1)}, st_, 1e-2)
            return p["w"].value

        assert run().tobytes() == run().tobytes()


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.patches_per_scan == 4 and cfg.mixup_alpha == 0.2
        assert cfg.betas == (0.9, 0.999) and cfg.adam_eps == 1e-8
        assert cfg.patch_size == (16, 32, 32)

    @pytest.mark.parametrize("kw", [{"patch_size": (10, 32, 32)}, {"mixup_alpha": -0.1}, {"iterations": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_nested_dicts(self):
        cfg = TrainConfig(afa={"epsilon": 0.01}, loss={"gamma": 0.3})
        assert cfg.afa.epsilon == 0.01 and cfg.loss.gamma == 0.3


class TestTrain:
    def test_single_iteration(self, small_dataset, tmp_path):
        res = train(tiny_cfg(small_dataset, tmp_path, iterations=1))
        assert len(read_log(res.log_path)) == 1
        assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["checkpoint_final.ckpt"]

    def test_checkpoints_and_log(self, small_dataset, tmp_path):
        res = train(tiny_cfg(small_dataset, tmp_path, iterations=5))
        assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == [
            "checkpoint_000002.ckpt", "checkpoint_000004.ckpt", "checkpoint_final.ckpt",
        ]
        recs = read_log(res.log_path)
        assert [r["step"] for r in recs] == [1, 2, 3, 4, 5]
        assert set(recs[0]) == {"step", "total_loss", "L_clean", "wall_ms"}
        net, header = load_checkpoint(res.checkpoint)
        assert header["step"] == 5 and net.cfg.num_classes == 2

    def test_afa_log_fields(self, small_dataset, tmp_path):
        res = train(tiny_cfg(small_dataset, tmp_path, iterations=2, afa={}))
        rec = read_log(res.log_path)[0]
        assert set(rec["L_k"]) == {"0.1", "0.05", "0.025", "0.0125"}
        assert rec["grad_l1_norm"] > 0
        assert rec["total_loss"] == pytest.approx(rec["L_clean"] + np.mean(list(rec["L_k"].values())), rel=1e-5)

    @pytest.mark.parametrize("afa", [None, {}])
    def test_deterministic(self, small_dataset, tmp_path, afa):
        a = train(tiny_cfg(small_dataset, tmp_path / "a", afa=afa))
        b = train(tiny_cfg(small_dataset, tmp_path / "b", afa=afa))
        assert a.losses == b.losses
        assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()

    def test_seed_changes_run(self, small_dataset, tmp_path):
        a = train(tiny_cfg(small_dataset, tmp_path / "a", seed=0))
        b = train(tiny_cfg(small_dataset, tmp_path / "b", seed=1))
        assert a.losses != b.losses

    def test_log_is_json_lines(self, small_dataset, tmp_path):
        res = train(tiny_cfg(small_dataset, tmp_path))
        for line in res.log_path.read_text().splitlines():
            json.loads(line)
