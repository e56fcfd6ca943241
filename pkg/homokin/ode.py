from typing import Callable, Tuple

State = Tuple


def _shift(y: State, k: State, h: float) -> State:
    return tuple(a + h * b for a, b in zip(y, k))


def rk4_step(rhs: Callable[..., State], t: float, y: State, dt: float) -> State:
    """经典四阶 Runge-Kutta 单步。

    y 是若干分量（标量或 numpy 数组）组成的元组，rhs(t, *y) 返回同结构的导数元组。
    """
    k1 = rhs(t, *y)
    k2 = rhs(t + 0.5 * dt, *_shift(y, k1, 0.5 * dt))
    k3 = rhs(t + 0.5 * dt, *_shift(y, k2, 0.5 * dt))
    k4 = rhs(t + dt, *_shift(y, k3, dt))
    return tuple(
        a + dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
        for a, b1, b2, b3, b4 in zip(y, k1, k2, k3, k4)
    )
