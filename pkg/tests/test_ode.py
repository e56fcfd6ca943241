import math

import numpy as np
import pytest

from homokin.ode import rk4_step


def _oscillator(dt):
    # x'' = -x, first row starts at (1, 0), second at (0, 0.5)
    def rhs(t, x, v):
        return v, -x

    y = (np.array([1.0, 0.0]), np.array([0.0, 0.5]))
    for k in range(int(round(1.0 / dt))):
        y = rk4_step(rhs, k * dt, y, dt)
    return y


def test_rk4_is_fourth_order():
    def error(dt):
        x, v = _oscillator(dt)
        return max(abs(x[0] - math.cos(1.0)), abs(v[0] + math.sin(1.0)), abs(x[1] - 0.5 * math.sin(1.0)))

    assert error(0.05) < 1e-6
    assert error(0.1) / error(0.05) == pytest.approx(16.0, rel=0.15)


def test_rk4_keeps_scalar_components():
    y = (0.0, np.zeros(2))
    for k in range(10):
        y = rk4_step(lambda t, a, b: (2.0 * t, np.ones(2)), 0.1 * k, y, 0.1)
    assert isinstance(y[0], float)
    assert y[0] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(y[1], 1.0, atol=1e-12)
