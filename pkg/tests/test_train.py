import math

import numpy as np
import pytest

from gendds import tensor as T
from gendds.checkpoint import Checkpoint
from gendds.codec import IdentityCodec
from gendds.control import controlled_forward
from gendds.diffusion import SamplerConfig
from gendds.errors import ConfigurationError, NumericError, PlanError
from gendds.pipeline import TextConfig, generate
from gendds.scenes import build_corpus
from gendds.tensor import Tensor
from gendds.train import (MetricsLog, TrainPlan, apply_dropout, fit, load_base, load_codec, load_control,
                          load_lora, load_video, read_metrics, run_base, run_codec, run_control, run_lora,
                          run_temporal)
from gendds.unet import UNetConfig

TEXT = TextConfig(dim=8, layers=1, heads=2, max_len=16)


def tiny_unet():
    return UNetConfig.tiny(latent_channels=4)


def plan(stage, **kw):
    kw.setdefault("epochs", 1)
    kw.setdefault("batch_size", 4)
    kw.setdefault("lr_unet", 1e-3)
    return TrainPlan(stage, frames=2, heads=2, **kw)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    manifest = build_corpus(8, root / "data", 0.75, master_seed=3, frames=2, resolution=16)
    run_codec(plan("codec", epochs=1, lr_unet=2e-3), manifest, root / "codec")
    run_base(plan("base"), manifest, root / "codec" / "codec.gdds", root / "base", tiny_unet(), TEXT)
    return root, manifest


def paths(root):
    return root / "codec" / "codec.gdds", root / "base" / "base.gdds"


class TestPlan:
    def test_text_rate_defaults_to_half(self):
        assert TrainPlan("base", lr_unet=2e-4).lr_text == pytest.approx(1e-4)

    @pytest.mark.parametrize("kw", [{"stage": "pretrain"}, {"lr_unet": 0.0}, {"prompt_dropout": 1.5},
                                    {"batch_size": 0}])
    def test_invalid(self, kw):
        kw = {"stage": "base", **kw}
        with pytest.raises(ConfigurationError):
            TrainPlan(**kw)

    def test_dropout_extremes(self):
        ids = np.full((50, 4), 7)
        rng = np.random.default_rng(0)
        assert np.array_equal(apply_dropout(ids, 0.0, rng), ids)
        assert np.all(apply_dropout(ids, 1.0, rng)[:, 0] == 1)


class TestFit:
    def _setup(self, tmp_path, values):
        w = Tensor(np.ones(3), requires_grad=True)
        calls = iter(values)

        def loss_fn(idx, rng):
            v = next(calls)
            return T.mul(w.sum(), Tensor(np.array(v)))

        def snapshot():
            return Checkpoint({"w": w.data.copy()}, {"type": "TEST"})

        log = MetricsLog(tmp_path / "m.csv", "base")
        return w, loss_fn, snapshot, log

    def test_nan_aborts_and_keeps_last_good(self, tmp_path):
        w, loss_fn, snapshot, log = self._setup(tmp_path, [1.0, 1.0, math.nan])
        p = TrainPlan("base", epochs=3, batch_size=1, lr_unet=0.1, warmup=0.0)
        with pytest.raises(NumericError, match="last good"):
            fit(p, {"unet": [("w", w)]}, {"unet": 0.1}, 1, loss_fn, log, snapshot=snapshot,
                last_good_path=tmp_path / "good.gdds")
        kept = Checkpoint.load(tmp_path / "good.gdds")
        np.testing.assert_array_equal(kept.tensors["w"], w.data)
        assert not np.array_equal(w.data, np.ones(3))

    def test_empty_dataset(self, tmp_path):
        w, loss_fn, _, log = self._setup(tmp_path, [])
        with pytest.raises(PlanError):
            fit(TrainPlan("base"), {"unet": [("w", w)]}, {"unet": 0.1}, 0, loss_fn, log)

    def test_step_count_and_metrics(self, tmp_path):
        w, loss_fn, _, log = self._setup(tmp_path, [1.0] * 20)
        p = TrainPlan("base", epochs=2, batch_size=3, lr_unet=0.1)
        assert fit(p, {"unet": [("w", w)]}, {"unet": 0.1}, 7, loss_fn, log) == 6
        log.close()
        rows = read_metrics(tmp_path / "m.csv")
        assert [int(r["step"]) for r in rows] == list(range(6))
        assert set(rows[0]) == {"step", "stage", "loss", "lr_unet", "lr_text", "wall_ms"}


class TestStages:
    def test_missing_dependencies(self, tmp_path, run):
        root, manifest = run
        codec, base = paths(root)
        with pytest.raises(PlanError):
            load_codec(tmp_path / "none.gdds")
        with pytest.raises(PlanError):
            run_base(plan("base"), manifest, tmp_path / "none.gdds", tmp_path / "b", tiny_unet(), TEXT)
        with pytest.raises(PlanError):
            run_lora(plan("lora"), manifest, codec, tmp_path / "none.gdds", tmp_path / "l")

    def test_pixel_space_codec(self):
        assert isinstance(load_codec("ignored", pixel_space=True), IdentityCodec)

    def test_base_is_deterministic(self, tmp_path, run):
        root, manifest = run
        codec, _ = paths(root)
        run_base(plan("base"), manifest, codec, tmp_path / "again", tiny_unet(), TEXT)
        assert (tmp_path / "again" / "base.gdds").read_bytes() == (root / "base" / "base.gdds").read_bytes()

        def strip(path):
            return [{k: v for k, v in r.items() if k != "wall_ms"} for r in read_metrics(path)]

        assert strip(tmp_path / "again" / "metrics.csv") == strip(root / "base" / "metrics.csv")

    def test_base_summary(self, run):
        import json
        summary = json.loads((run[0] / "base" / "summary.json").read_text())
        assert len(summary["val_loss"]) == 1 and math.isfinite(summary["smoothed_val_loss"])

    def test_lora_freezes_base(self, tmp_path, run):
        root, manifest = run
        codec, base = paths(root)
        before = base.read_bytes()
        result = run_lora(plan("lora", rank=2, alpha=2.0), manifest, codec, base, tmp_path / "lora")
        assert base.read_bytes() == before
        assert result.summary["base_hash"] == load_base(base)[0].base_hash()
        adapters = load_lora(result.checkpoint, load_base(base)[0])
        assert len(adapters) > 0
        assert not any(k.startswith("text_encoder.") for k in Checkpoint.load(result.checkpoint).tensors)

    def test_lora_with_text_encoder(self, tmp_path, run):
        root, manifest = run
        codec, base = paths(root)
        result = run_lora(plan("lora", rank=2, train_text=True), manifest, codec, base, tmp_path / "lora")
        assert any(k.startswith("text_encoder.") for k in Checkpoint.load(result.checkpoint).tensors)

    def test_lora_filter_without_matches(self, tmp_path, run):
        root, manifest = run
        codec, base = paths(root)
        with pytest.raises(PlanError):
            run_lora(plan("lora", filter_tags=["no such tag"]), manifest, codec, base, tmp_path / "lora")

    def test_control_training_makes_depth_matter(self, tmp_path, run):
        root, manifest = run
        codec, base = paths(root)
        result = run_control(plan("control", lr_unet=1e-2), manifest, codec, base, tmp_path / "control")
        model, _ = load_base(base)
        branch = load_control(result.checkpoint, model)
        rng = np.random.default_rng(0)
        z = rng.normal(size=(1, 4, 4, 4)).astype(np.float32)
        depth = rng.random((1, 1, 16, 16)).astype(np.float32)
        cond = model.encode_prompts(["sunny, road"])
        with T.no_grad():
            a = controlled_forward(model.unet, branch, z, 300, cond, depth).data
            b = controlled_forward(model.unet, branch, z, 300, cond, depth[:, :, ::-1].copy()).data
        assert not np.array_equal(a, b)

    def test_temporal_frame_mismatch(self, tmp_path, run):
        root, manifest = run
        codec, base = paths(root)
        with pytest.raises(PlanError):
            run_temporal(TrainPlan("temporal", epochs=1, frames=4), manifest, codec, base, tmp_path / "t")

    def test_temporal_trains_gates_only(self, tmp_path, run):
        root, manifest = run
        codec, base = paths(root)
        result = run_temporal(plan("temporal", lr_unet=1e-2), manifest, codec, base, tmp_path / "t")
        assert any(g != 0.0 for g in result.summary["gamma"].values())
        model, _ = load_base(base)
        video = load_video(result.checkpoint, model, 2)
        assert video.frames == 2

    def test_full_dropout_gives_unconditional_model(self, tmp_path, run):
        root, manifest = run
        codec, _ = paths(root)
        run_base(plan("base", prompt_dropout=1.0), manifest, codec, tmp_path / "u", tiny_unet(), TEXT)
        model, _ = load_base(tmp_path / "u" / "base.gdds")
        assert model.unconditional_only
        c = load_codec(codec)
        outs = [generate(model, c, ["sunny, road"], SamplerConfig("ddim", 4, w, seed=1), resolution=16)
                for w in (1.0, 7.5)]
        np.testing.assert_array_equal(outs[0], outs[1])
