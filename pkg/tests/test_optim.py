import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gendds.errors import NumericError
from gendds.nn import Parameter
from gendds.optim import AdamW, OptimizerState, adamw_step, warmup_constant


def reference_adamw(p, grads, lr, wd=0.0, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar AdamW written from the update rule."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        p = p * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return p


class TestAdamW:
    def test_first_step_moves_by_lr(self):
        p = np.array([1.0, -2.0])
        adamw_step([p], [np.array([0.3, -5.0])], OptimizerState(), lr=0.1)
        np.testing.assert_allclose(p, [0.9, -1.9], atol=1e-7)

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(0, 0.1))
    def test_matches_scalar_reference(self, grads, wd):
        p = np.array([0.7])
        state = OptimizerState(weight_decay=wd)
        for g in grads:
            adamw_step([p], [np.array([g])], state, lr=0.01)
        assert p[0] == pytest.approx(reference_adamw(0.7, grads, 0.01, wd), rel=1e-9, abs=1e-12)

    def test_missing_gradient_is_zero(self):
        p = np.array([1.0])
        adamw_step([p], [None], OptimizerState(), lr=0.1)
        assert p[0] == 1.0

    def test_non_finite_gradient_named(self):
        with pytest.raises(NumericError, match="w1"):
            adamw_step([np.zeros(2)], [np.array([np.nan, 0])], OptimizerState(), 0.1, names=["w1"])

    def test_groups_take_their_own_rates(self):
        a, b = Parameter(np.ones(1)), Parameter(np.ones(1))
        a.grad, b.grad = np.ones(1), np.ones(1)
        opt = AdamW({"unet": [("a", a)], "text": [("b", b)]})
        opt.step({"unet": 0.1, "text": 0.05})
        assert a.data[0] == pytest.approx(0.9) and b.data[0] == pytest.approx(0.95)
        opt.zero_grad()
        assert a.grad is None and opt.step_count == 1

    def test_float32_stays_float32(self):
        p = np.ones(3, np.float32)
        adamw_step([p], [np.ones(3, np.float32)], OptimizerState(), 1e-3)
        assert p.dtype == np.float32


class TestWarmup:
    def test_ramp_then_constant(self):
        lrs = [warmup_constant(1.0, s, 100, 0.05) for s in range(100)]
        assert lrs[:5] == [0.2, 0.4, 0.6, 0.8, 1.0]
        assert set(lrs[5:]) == {1.0}

    @given(st.integers(1, 10_000), st.floats(0, 1))
    def test_bounded_and_monotone(self, total, frac):
        lrs = [warmup_constant(2.0, s, total, frac) for s in range(0, total, max(1, total // 50))]
        assert all(0 < x <= 2.0 for x in lrs)
        assert all(b >= a for a, b in zip(lrs, lrs[1:]))
