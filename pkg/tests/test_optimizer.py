import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cvet.optimizer import AdamConfig, AdamState, adam_step, bias_corrected_step_size


def reference_adam(theta, grads, alpha, b1, b2, eps):
    """Scalar Adam written out longhand, efficient form of the step size."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= alpha * math.sqrt(1 - b2 ** t) / (1 - b1 ** t) * m / (math.sqrt(v) + eps)
    return theta


def scalar_step(theta, g, config, state=None):
    state = state or AdamState.zeros_like({"w": np.array([theta])})
    params, state = adam_step(state, {"w": np.array([theta])}, {"w": np.array([g])}, config)
    return float(params["w"][0]), state


class TestStepSize:
    def test_first_step(self):
        cfg = AdamConfig(alpha=0.1)
        assert bias_corrected_step_size(cfg, 1) == pytest.approx(0.1 * math.sqrt(0.001) / 0.1, abs=1e-15)
        assert bias_corrected_step_size(cfg, 1) == pytest.approx(0.0316228, abs=1e-7)

    def test_large_t_limit(self):
        cfg = AdamConfig(alpha=0.1)
        assert abs(bias_corrected_step_size(cfg, 10**6) / 0.1 - 1) < 1e-6

    @given(st.integers(1, 10**7))
    def test_switch_off(self, t):
        assert bias_corrected_step_size(AdamConfig(alpha=0.3, bias_correction=False), t) == 0.3

    def test_t_zero(self):
        with pytest.raises(ValueError):
            bias_corrected_step_size(AdamConfig(), 0)

    def test_as_printed_form(self):
        cfg = AdamConfig(alpha=0.1, correction_form="as-printed")
        # at t=1 the radicand 1 - 0.999/0.1 is negative
        with pytest.raises(ValueError, match="undefined"):
            bias_corrected_step_size(cfg, 1)
        t = 10**4
        expected = 0.1 * math.sqrt(1 - 0.999 ** t / (1 - 0.9 ** t))
        assert bias_corrected_step_size(cfg, t) == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("kwargs", [dict(alpha=0), dict(beta1=1.0), dict(beta2=-0.1), dict(epsilon=0),
                                        dict(correction_form="nested")])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            AdamConfig(**kwargs)


class TestAdamStep:
    def test_hand_example(self):
        theta, state = scalar_step(1.0, 0.5, AdamConfig(alpha=0.1))
        assert theta == pytest.approx(0.9, abs=1e-6)
        assert state.t == 1
        assert state.m["w"][0] == pytest.approx(0.05, abs=1e-15)
        assert state.v["w"][0] == pytest.approx(2.5e-4, abs=1e-15)

    def test_matches_reference_over_many_steps(self):
        rng = np.random.default_rng(0)
        grads = rng.normal(size=40)
        cfg = AdamConfig(alpha=0.01)
        theta, state = 0.7, None
        for g in grads:
            theta, state = scalar_step(theta, g, cfg, state)
        assert theta == pytest.approx(reference_adam(0.7, grads, 0.01, 0.9, 0.999, 1e-8), abs=1e-13)

    def test_zero_gradient_fresh_state(self):
        params = {"a": np.arange(6.0).reshape(2, 3)}
        new, _ = adam_step(AdamState.zeros_like(params), params, {"a": np.zeros((2, 3))}, AdamConfig())
        np.testing.assert_array_equal(new["a"], params["a"])

    def test_identical_histories(self):
        params = {"a": np.array([1.0, 1.0]), "b": np.array([1.0])}
        state = AdamState.zeros_like(params)
        for g in (0.3, -1.2, 0.8):
            params, state = adam_step(state, params, {"a": np.array([g, g]), "b": np.array([g])}, AdamConfig())
        assert params["a"][0] == params["a"][1] == params["b"][0]

    def test_order_independent(self):
        rng = np.random.default_rng(1)
        params = {k: rng.normal(size=3) for k in "xyz"}
        grads = {k: rng.normal(size=3) for k in "xyz"}
        a, _ = adam_step(AdamState.zeros_like(params), params, grads, AdamConfig())
        rev = dict(reversed(params.items()))
        b, _ = adam_step(AdamState.zeros_like(rev), rev, dict(reversed(grads.items())), AdamConfig())
        for k in params:
            np.testing.assert_array_equal(a[k], b[k])

    def test_inputs_untouched(self):
        params = {"a": np.ones(3)}
        state = AdamState.zeros_like(params)
        adam_step(state, params, {"a": np.ones(3)}, AdamConfig())
        assert state.t == 0 and not state.m["a"].any()
        np.testing.assert_array_equal(params["a"], np.ones(3))

    def test_non_finite_gradient_names_parameter(self):
        params = {"good": np.ones(2), "layer0.wq": np.ones(2)}
        with pytest.raises(FloatingPointError, match="layer0.wq"):
            adam_step(AdamState.zeros_like(params), params,
                      {"good": np.ones(2), "layer0.wq": np.array([1.0, np.nan])}, AdamConfig())

    def test_shape_mismatch(self):
        params = {"a": np.ones(2)}
        with pytest.raises(ValueError):
            adam_step(AdamState.zeros_like(params), params, {"a": np.ones(3)}, AdamConfig())

    @given(st.floats(1e-3, 1e3), st.booleans(), st.floats(1e-4, 1.0))
    def test_first_step_magnitude(self, mag, negative, alpha):
        g = -mag if negative else mag
        theta, _ = scalar_step(0.0, g, AdamConfig(alpha=alpha))
        assert 0.99 * alpha <= abs(theta) <= alpha
        assert math.copysign(1, -theta) == math.copysign(1, g)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
    def test_bias_correction_only_scales(self, grads):
        on, off = AdamConfig(alpha=0.01), AdamConfig(alpha=0.01, bias_correction=False)
        state = AdamState.zeros_like({"w": np.zeros(1)})
        for g in grads:
            before = {"w": np.zeros(1)}
            a, next_state = adam_step(state, before, {"w": np.array([g])}, on)
            b, _ = adam_step(state, before, {"w": np.array([g])}, off)
            t = next_state.t
            factor = math.sqrt(1 - 0.999 ** t) / (1 - 0.9 ** t)
            assert a["w"][0] == pytest.approx(b["w"][0] * factor, rel=1e-12, abs=1e-300)
            assert next_state.v["w"][0] >= 0
            state = next_state
