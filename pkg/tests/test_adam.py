import numpy as np
import pytest

from lsw.adam import AdamState, NonFiniteGradient, adam_step
from lsw.tensor import Tensor


def param(v):
    return Tensor(np.array(v, dtype=np.float64), dtype=np.float64, name="w")


def test_single_step_hand_value():
    p = param([1.0])
    adam_step([p], [np.array([0.5])], AdamState())
    expected = 1.0 - 0.001 * (0.5 / (0.5 + 1e-8))
    assert p.data[0] == pytest.approx(expected, abs=1e-15)
    assert p.data[0] == pytest.approx(0.999, abs=1e-8)


def test_two_steps_constant_gradient_move_alpha_each():
    p = param([0.0])
    st = AdamState()
    adam_step([p], [np.array([1.0])], st)
    first = p.data[0]
    adam_step([p], [np.array([1.0])], st)
    assert first == pytest.approx(-0.001, rel=1e-6)
    assert p.data[0] - first == pytest.approx(-0.001, rel=1e-6)
    assert st.step_count == 2


def test_zero_gradient_forever_is_identity():
    rng = np.random.default_rng(0)
    init = rng.standard_normal((3, 4))
    p = param(init.copy())
    st = AdamState()
    for _ in range(50):
        adam_step([p], [np.zeros((3, 4))], st)
    assert np.array_equal(p.data, init)


def test_non_finite_gradient_names_parameter():
    p = param([1.0, 2.0])
    with pytest.raises(NonFiniteGradient, match="w"):
        adam_step([p], [np.array([np.nan, 0.0])], AdamState())
    assert np.array_equal(p.data, [1.0, 2.0])


def test_shape_mismatch():
    with pytest.raises(ValueError, match="does not match"):
        adam_step([param([1.0, 2.0])], [np.zeros(3)], AdamState())


def test_float32_parameters_stay_float32():
    p = Tensor(np.ones(4, dtype=np.float32))
    adam_step([p], [np.ones(4)], AdamState())
    assert p.dtype == np.float32
