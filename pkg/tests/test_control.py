import numpy as np
import pytest

from gendds import tensor as T
from gendds.checkpoint import content_hash
from gendds.control import ControlBranch, HintNetwork, build_control, controlled_forward, feature_channels
from gendds.errors import CompatibilityError, ContractError
from gendds.scenes import SceneSpec, depth_from_scene, render_scene
from gendds.tensor import Tensor
from gendds.text import ConditioningMatrix
from gendds.unet import UNet, UNetConfig


def setup(seed=0, dtype=np.float32):
    unet = UNet(UNetConfig.tiny(), np.random.default_rng(seed), dtype=dtype)
    return unet, build_control(unet, 4, np.random.default_rng(seed + 1))


def inputs(rng, n=2, dtype=np.float32):
    z = rng.normal(size=(n, 4, 8, 8)).astype(dtype)
    cond = ConditioningMatrix(Tensor(rng.normal(size=(n, 3, 8)).astype(dtype)), np.ones((n, 3), bool))
    depth = rng.uniform(size=(n, 1, 32, 32)).astype(dtype)
    return z, rng.integers(0, 1000, n), cond, depth


class TestBuild:
    def test_copy_is_bit_identical(self):
        unet, branch = setup()
        base = unet.state_dict()
        for name, value in branch.state_dict().items():
            if name.split(".")[0] in ("time_embed", "conv_in", "down", "mid"):
                np.testing.assert_array_equal(value, base[name])

    def test_zero_projections(self):
        _, branch = setup()
        for zc in branch.zero_convs:
            assert not zc.weight.data.any() and not zc.bias.data.any()
        assert len(branch.zero_convs) == len(feature_channels(branch.config))

    def test_trainable_count_from_arithmetic(self):
        unet, branch = setup()
        c = unet.config
        encoder = sum(p.data.size for n, p in unet.named_parameters() if n.split(".")[0] in ("time_embed", "conv_in", "down", "mid"))
        hint_hidden, ch0 = 16, c.channels(0)
        hint = (1 * hint_hidden * 9 + hint_hidden) + 2 * (hint_hidden * hint_hidden * 9 + hint_hidden) \
            + (hint_hidden * ch0 * 9 + ch0)
        zero = sum(ch * ch + ch for ch in feature_channels(c))
        assert sum(p.data.size for p in branch.trainable_parameters()) == encoder + hint + zero
        assert unet.trainable_parameters() == []

    def test_hint_network_shape(self):
        hint = HintNetwork(8, 4, np.random.default_rng(0))
        assert hint(Tensor(np.zeros((2, 1, 32, 32), np.float32))).shape == (2, 8, 8, 8)


class TestForward:
    def test_identity_at_init(self):
        unet, branch = setup()
        rng = np.random.default_rng(5)
        for _ in range(10):
            z, t, cond, depth = inputs(rng)
            np.testing.assert_array_equal(controlled_forward(unet, branch, z, t, cond, depth).data,
                                          unet(z, t, cond).data)

    def test_untrained_branch_ignores_depth(self):
        unet, branch = setup()
        z, t, cond, depth = inputs(np.random.default_rng(6))
        a = controlled_forward(unet, branch, z, t, cond, depth).data
        b = controlled_forward(unet, branch, z, t, cond, depth[:, :, ::-1].copy()).data
        np.testing.assert_array_equal(a, b)

    def test_live_projections_make_depth_matter(self):
        unet, branch = setup()
        rng = np.random.default_rng(7)
        for zc in branch.zero_convs:
            zc.weight.data = rng.normal(size=zc.weight.shape).astype(np.float32) * 0.1
        branch.hint.out.weight.data = rng.normal(size=branch.hint.out.weight.shape).astype(np.float32) * 0.1
        z, t, cond, depth = inputs(rng)
        a = controlled_forward(unet, branch, z, t, cond, depth).data
        b = controlled_forward(unet, branch, z, t, cond, depth[:, :, ::-1].copy()).data
        assert np.mean(np.abs(a - b)) > 0

    def test_gradients_skip_frozen_base(self):
        unet, branch = setup(dtype=np.float64)
        z, t, cond, depth = inputs(np.random.default_rng(8), dtype=np.float64)
        T.square(controlled_forward(unet, branch, z, t, cond, depth)).sum().backward()
        assert all(p.grad is None for p in unet.parameters())
        assert np.abs(branch.zero_convs[0].weight.grad).sum() > 0

    @pytest.mark.parametrize("bad", [np.zeros((2, 1, 16, 16)), np.full((2, 1, 32, 32), 1.5),
                                     np.full((2, 1, 32, 32), np.nan)])
    def test_depth_contract(self, bad):
        unet, branch = setup()
        z, t, cond, _ = inputs(np.random.default_rng(0))
        with pytest.raises(ContractError):
            controlled_forward(unet, branch, z, t, cond, bad.astype(np.float32))

    def test_checkpoint_binds_base(self, tmp_path):
        unet, branch = setup()
        base_hash = content_hash(unet.state_dict())
        ckpt = branch.to_checkpoint({"base_hash": base_hash})
        back = ControlBranch.from_checkpoint(ckpt, unet, base_hash)
        z, t, cond, depth = inputs(np.random.default_rng(0))
        np.testing.assert_array_equal(back(z, t, cond, depth)[0].data, branch(z, t, cond, depth)[0].data)
        with pytest.raises(CompatibilityError):
            ControlBranch.from_checkpoint(ckpt, unet, "0" * 64)


class TestDepth:
    def test_empty_road_is_plane_gradient(self):
        for street in ("field", "city", "highway"):
            clip = next(c for c in (render_scene(SceneSpec("sunny", "light", street, seed=s, frames=1))
                                    for s in range(50)) if not c.vehicles)
            hz = clip.layout["horizon"]
            ground = clip.depths[0][hz:]
            assert np.all(np.diff(ground, axis=0) > 0)
            assert np.all(ground == ground[:, :1])
            np.testing.assert_array_equal(ground, depth_from_scene(clip.spec)[0][hz:])

    def test_heavy_traffic_dominates_near_mass(self):
        def values(level):
            return np.concatenate([depth_from_scene(SceneSpec("cloudy", level, "city", seed=s, frames=2)).ravel()
                                   for s in range(30)])

        heavy, light = values("heavy"), values("light")
        for thr in np.linspace(0.05, 0.95, 19):
            assert np.mean(heavy > thr) >= np.mean(light > thr)
        assert heavy.mean() > light.mean()
