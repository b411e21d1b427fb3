import numpy as np
import pytest

from gendds import tensor as T
from gendds.checkpoint import content_hash
from gendds.errors import ConfigurationError, ContractError
from gendds.temporal import TemporalBlock, VideoModel, attach_temporal
from gendds.tensor import Tensor
from gendds.text import ConditioningMatrix
from gendds.unet import UNet, UNetConfig

F = 4


def setup(frames=F, sites=None, dtype=np.float32):
    unet = UNet(UNetConfig.tiny(), np.random.default_rng(0), dtype=dtype)
    return unet, attach_temporal(unet, sites, frames, np.random.default_rng(1), heads=2)


def clip_inputs(rng, b=1, frames=F, dtype=np.float32):
    z = rng.normal(size=(b, frames, 4, 8, 8)).astype(dtype)
    cond = ConditioningMatrix(Tensor(rng.normal(size=(b, 3, 8)).astype(dtype)), np.ones((b, 3), bool))
    return z, rng.integers(0, 1000, b), cond


def open_gates(video, rng):
    for block in video.blocks.values():
        block.gamma.data[:] = 1.0
        block.attn.to_out.weight.data += rng.normal(size=block.attn.to_out.weight.shape).astype(np.float32)


class TestAttach:
    def test_default_sites_and_count(self):
        unet, video = setup()
        assert video.sites == unet.config.temporal_sites()
        assert len(video.blocks) == len(video.sites)

    def test_all_sites(self):
        unet, video = setup(sites="all")
        assert video.sites == unet.config.all_sites()
        assert set(unet.config.temporal_sites()) < set(video.sites)

    def test_invalid_and_duplicate_sites(self):
        unet = UNet(UNetConfig.tiny(), np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            attach_temporal(unet, "mid.res0")
        with pytest.raises(ConfigurationError):
            attach_temporal(unet, ["down.7.res.0"])
        with pytest.raises(ConfigurationError):
            attach_temporal(unet, ["mid.res0", "mid.res0"])

    def test_spatial_weights_untouched_and_frozen(self):
        unet = UNet(UNetConfig.tiny(), np.random.default_rng(0))
        before = content_hash(unet.state_dict())
        video = attach_temporal(unet, frames=F)
        assert content_hash(unet.state_dict()) == before
        assert unet.trainable_parameters() == []
        expected = 0
        for s in video.sites:
            c = unet.config.site_channels(s)
            attn = 4 * c * c + c
            ff = (c * 2 * c + 2 * c) + (2 * c * c + c)
            expected += 16 * c + 2 * (2 * c) + attn + ff + 1
        assert sum(p.data.size for p in video.trainable_parameters()) == expected

    def test_gates_start_closed(self):
        _, video = setup()
        assert all(b.gamma.data.tolist() == [0.0] for b in video.blocks.values())


class TestForward:
    def test_identity_per_frame(self):
        unet, video = setup()
        rng = np.random.default_rng(2)
        z, t, cond = clip_inputs(rng, b=2)
        out = video(z, t, cond).data
        for b in range(2):
            for f in range(F):
                cb = ConditioningMatrix(Tensor(cond.matrix.data[b:b + 1]), cond.mask[b:b + 1])
                np.testing.assert_array_equal(out[b, f], unet(z[b, f:f + 1], t[b:b + 1], cb).data[0])

    def test_closed_gate_permutation_equivariant(self):
        _, video = setup()
        z, t, cond = clip_inputs(np.random.default_rng(3))
        perm = [2, 0, 3, 1]
        np.testing.assert_array_equal(video(z[:, perm], t, cond).data, video(z, t, cond).data[:, perm])

    def test_open_gate_breaks_equivariance(self):
        _, video = setup()
        rng = np.random.default_rng(4)
        open_gates(video, rng)
        z, t, cond = clip_inputs(rng)
        perm = [2, 0, 3, 1]
        diff = np.abs(video(z[:, perm], t, cond).data - video(z, t, cond).data[:, perm])
        assert diff.mean() > 0

    def test_frame_count_mismatch(self):
        _, video = setup()
        z, t, cond = clip_inputs(np.random.default_rng(0), frames=F + 1)
        with pytest.raises(ContractError):
            video(z, t, cond)

    def test_attention_over_frames_sums_to_one(self):
        block = TemporalBlock(8, np.random.default_rng(0), heads=2)
        h = Tensor(np.random.default_rng(1).normal(size=(2 * F, 8, 3, 3)).astype(np.float32))
        w = block.attention_weights(h, F)
        assert w.shape[-2:] == (F, F)
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_gradients_only_in_temporal_blocks(self):
        unet, video = setup(dtype=np.float64)
        for b in video.blocks.values():
            b.gamma.data[:] = 0.5
        z, t, cond = clip_inputs(np.random.default_rng(5), dtype=np.float64)
        T.square(video(z, t, cond)).sum().backward()
        assert all(p.grad is None for p in unet.parameters())
        assert all(b.gamma.grad is not None for b in video.blocks.values())

    def test_checkpoint_roundtrip(self):
        unet, video = setup()
        rng = np.random.default_rng(6)
        open_gates(video, rng)
        back = VideoModel.from_checkpoint(video.to_checkpoint(), UNet(UNetConfig.tiny(), np.random.default_rng(0)))
        z, t, cond = clip_inputs(rng)
        np.testing.assert_array_equal(back(z, t, cond).data, video(z, t, cond).data)
