import numpy as np
import pytest

from xlpretrain.autograd import Tensor
from xlpretrain.optim import AdamState, adam_step, global_norm, lr_schedule


def make_state(**kw):
    defaults = dict(
        lr_base=0.1,
        weight_decay=0.0,
        clip_norm=np.inf,
        warmup_steps=10,
        total_steps=100,
    )
    defaults.update(kw)
    return AdamState(**defaults)


class TestSchedule:
    def test_zero_before_start(self):
        assert lr_schedule(0, 0.1, 10, 100) == 0.0
        assert lr_schedule(-3, 0.1, 10, 100) == 0.0

    def test_peak_exactly_at_warmup(self):
        assert lr_schedule(10, 0.1, 10, 100) == pytest.approx(0.1)

    def test_linear_during_warmup(self):
        for s in range(1, 10):
            assert lr_schedule(s, 0.1, 10, 100) == pytest.approx(0.1 * s / 10)

    def test_zero_at_and_after_total(self):
        assert lr_schedule(100, 0.1, 10, 100) == 0.0
        assert lr_schedule(250, 0.1, 10, 100) == 0.0

    def test_linear_decay_midpoint(self):
        # halfway between warmup and total -> half of lr_base
        assert lr_schedule(55, 0.1, 10, 100) == pytest.approx(0.05)

    def test_continuity_around_warmup(self):
        lo = lr_schedule(9_999, 1e-4, 10_000, 200_000)
        hi = lr_schedule(10_001, 1e-4, 10_000, 200_000)
        peak = lr_schedule(10_000, 1e-4, 10_000, 200_000)
        assert lo < peak and hi < peak
        assert peak - lo < 2e-8 and peak - hi < 2e-8


class TestAdamStep:
    def test_first_step_hand_computed(self):
        # scalar oracle worked by hand:
        #   g=0.5, b1=0.9, b2=0.98 -> m=0.05, v=0.005
        #   mhat=0.5, vhat=0.25, lr(1)=0.1*1/10=0.01
        #   update = 0.01 * 0.5 / (0.5 + 1e-6)
        p = {"w": Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)}
        st = make_state()
        assert adam_step(p, {"w": np.array([0.5])}, st)
        expect = 1.0 - 0.01 * 0.5 / (0.5 + 1e-6)
        np.testing.assert_allclose(p["w"].data, [expect], rtol=1e-12)
        assert st.step == 1

    def test_first_step_with_weight_decay(self):
        p = {"w": Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)}
        st = make_state(weight_decay=0.01)
        adam_step(p, {"w": np.array([0.5])}, st)
        expect = 1.0 - 0.01 * 0.5 / (0.5 + 1e-6) - 0.01 * 0.01 * 1.0
        np.testing.assert_allclose(p["w"].data, [expect], rtol=1e-12)

    def test_decay_uses_pre_update_parameter(self):
        # with g=0 the Adam term is 0, so the update is exactly lr*wd*p
        p = {"w": Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)}
        st = make_state(weight_decay=0.1)
        adam_step(p, {"w": np.array([0.0])}, st)
        np.testing.assert_allclose(p["w"].data, [2.0 - 0.01 * 0.1 * 2.0], rtol=1e-12)

    def test_zero_grad_zero_decay_is_noop(self):
        p = {"w": Tensor(np.array([3.0, -1.0]), requires_grad=True, dtype=np.float64)}
        st = make_state()
        adam_step(p, {"w": np.zeros(2)}, st)
        np.testing.assert_array_equal(p["w"].data, [3.0, -1.0])

    def test_clipping_matches_manual_scale(self):
        g = np.array([1.2, 1.6])  # norm 2.0
        p1 = {"w": Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)}
        p2 = {"w": Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)}
        adam_step(p1, {"w": g.copy()}, make_state(clip_norm=1.0))
        adam_step(p2, {"w": g * 0.5}, make_state(clip_norm=np.inf))
        np.testing.assert_allclose(p1["w"].data, p2["w"].data, rtol=1e-12)

    def test_no_clip_below_threshold(self):
        g = np.array([0.3, 0.4])  # norm 0.5
        p1 = {"w": Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)}
        p2 = {"w": Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)}
        adam_step(p1, {"w": g.copy()}, make_state(clip_norm=1.0))
        adam_step(p2, {"w": g.copy()}, make_state(clip_norm=np.inf))
        np.testing.assert_allclose(p1["w"].data, p2["w"].data, rtol=1e-12)

    def test_frozen_params_untouched_and_outside_clip_norm(self):
        pa = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
        pb = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
        params = {"a": pa, "b": pb}
        grads = {"a": np.array([0.3]), "b": np.array([1e6])}
        st = make_state(clip_norm=1.0)
        adam_step(params, grads, st, updatable={"a"})
        # b frozen
        np.testing.assert_array_equal(pb.data, [1.0])
        # a saw no clipping: its lone grad has norm 0.3 < 1.0
        ref = {"a": Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)}
        adam_step(ref, {"a": np.array([0.3])}, make_state(clip_norm=1.0))
        np.testing.assert_allclose(pa.data, ref["a"].data, rtol=1e-12)

    def test_nonfinite_grad_skips_whole_step(self):
        pa = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
        pb = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
        st = make_state()
        ok = adam_step({"a": pa, "b": pb}, {"a": np.array([0.5]), "b": np.array([np.nan])}, st)
        assert not ok
        assert st.skipped_steps == 1
        assert st.step == 0
        np.testing.assert_array_equal(pa.data, [1.0])
        np.testing.assert_array_equal(pb.data, [2.0])

    def test_nonfinite_grad_on_frozen_param_is_ignored(self):
        pa = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
        pb = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
        st = make_state()
        ok = adam_step(
            {"a": pa, "b": pb},
            {"a": np.array([0.5]), "b": np.array([np.inf])},
            st,
            updatable={"a"},
        )
        assert ok and st.skipped_steps == 0

    def test_deterministic_across_runs(self):
        def run():
            rng = np.random.default_rng(42)
            p = {"w": Tensor(rng.normal(size=(4, 3)), requires_grad=True, dtype=np.float64)}
            st = make_state(weight_decay=0.01, clip_norm=1.0)
            for _ in range(25):
                adam_step(p, {"w": rng.normal(size=(4, 3))}, st)
            return p["w"].data.copy()

        np.testing.assert_array_equal(run(), run())

    def test_descends_on_quadratic(self):
        # minimize (w - 5)^2 by feeding its analytic gradient
        p = {"w": Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)}
        st = make_state(lr_base=0.5, warmup_steps=5, total_steps=4000)
        for _ in range(600):
            g = 2.0 * (p["w"].data - 5.0)
            adam_step(p, {"w": g}, st)
        assert abs(float(p["w"].data[0]) - 5.0) < 0.2

    def test_validation(self):
        with pytest.raises(ValueError):
            AdamState(beta1=1.0)
        with pytest.raises(ValueError):
            AdamState(eps=0.0)


def test_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert global_norm(grads) == pytest.approx(5.0)
