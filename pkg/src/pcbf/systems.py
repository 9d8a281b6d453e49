"""Control-affine benchmark systems and shared state-space utilities.

Dynamics are xdot = f(x) + g(x) u with box-bounded states and inputs.
``drift``, ``actuation`` and ``safe_margin`` all accept a single state
``(n,)`` or a batch ``(N, n)`` and vectorize over the batch.  The safe
margin h is the scenario's scalar safety function: h(x) >= 0 on the
safe set, and its gradient is returned alongside the value.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np


class NonFiniteStateError(RuntimeError):
    """An integration step produced NaN or infinity."""


@dataclass(frozen=True)
class ControlAffineSystem:
    name: str
    state_box: np.ndarray   # (n, 2) rows (low, high)
    input_box: np.ndarray   # (m, 2)
    drift: Callable[[np.ndarray], np.ndarray]
    actuation: Callable[[np.ndarray], np.ndarray]
    safe_margin: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]

    @property
    def n(self) -> int:
        return self.state_box.shape[0]

    @property
    def m(self) -> int:
        return self.input_box.shape[0]


def _as_box(box) -> np.ndarray:
    b = np.asarray(box, dtype=np.float64)
    if b.ndim != 2 or b.shape[1] != 2:
        raise ValueError(f"a box must have shape (k, 2), got {b.shape}")
    if np.any(b[:, 0] > b[:, 1]):
        raise ValueError("box lower bounds must not exceed upper bounds")
    return b


def vertices(box) -> np.ndarray:
    """All corners of a box, lexicographic with the low endpoint first.

    [[-1, 1]] -> [[-1], [1]]; the unit square gives (0,0), (0,1),
    (1,0), (1,1) in that order.
    """
    b = _as_box(box)
    if not np.all(np.isfinite(b)):
        raise ValueError("cannot enumerate vertices of an unbounded box")
    return np.array(list(itertools.product(*b)), dtype=np.float64)


def dynamics_eval(system: ControlAffineSystem, x, u) -> np.ndarray:
    """xdot = f(x) + g(x) u, batched over leading axes of x (and u)."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    return system.drift(x) + np.einsum("...ij,...j->...i", system.actuation(x), u)


def rk4_step(system: ControlAffineSystem, x, u, dt: float) -> np.ndarray:
    """Classical fourth-order step with the input held constant."""
    x = np.asarray(x, dtype=np.float64)
    k1 = dynamics_eval(system, x, u)
    k2 = dynamics_eval(system, x + 0.5 * dt * k1, u)
    k3 = dynamics_eval(system, x + 0.5 * dt * k2, u)
    k4 = dynamics_eval(system, x + dt * k3, u)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise NonFiniteStateError("integration produced a non-finite state")
    return out


# pendulum ------------------------------------------------------------

PENDULUM_SAFE_ANGLE = np.pi / 3.0


def make_pendulum(theta_max: float = np.pi / 2.0, omega_max: float = 2.0,
                  u_max: float = 1.0) -> ControlAffineSystem:
    """Torque-limited pendulum: thetadot = omega, omegadot = sin(theta) + u.

    Safety asks |theta| <= pi/3, encoded by the smooth surrogate
    h = (pi/3)^2 - theta^2 so the margin is differentiable everywhere.
    """

    def drift(x):
        x = np.asarray(x, dtype=np.float64)
        return np.stack([x[..., 1], np.sin(x[..., 0])], axis=-1)

    def actuation(x):
        x = np.asarray(x, dtype=np.float64)
        g = np.zeros(x.shape[:-1] + (2, 1))
        g[..., 1, 0] = 1.0
        return g

    def safe_margin(x):
        x = np.asarray(x, dtype=np.float64)
        th = x[..., 0]
        val = PENDULUM_SAFE_ANGLE ** 2 - th ** 2
        grad = np.zeros_like(x)
        grad[..., 0] = -2.0 * th
        return val, grad

    return ControlAffineSystem(
        name="pendulum",
        state_box=_as_box([[-theta_max, theta_max], [-omega_max, omega_max]]),
        input_box=_as_box([[-u_max, u_max]]),
        drift=drift,
        actuation=actuation,
        safe_margin=safe_margin,
    )


# quadrotor -----------------------------------------------------------

@dataclass(frozen=True)
class QuadrotorParams:
    mass: float = 0.5
    inertia: tuple[float, float, float] = (2.3e-3, 2.3e-3, 4.0e-3)
    gravity: float = 9.81
    torque_max: float = 0.1
    rho: float = 10.0   # log-sum-exp sharpness of the obstacle margin


_QUAD_STATE_BOX = [
    [-3.0, 3.0], [-3.0, 3.0], [-2.0, 2.0],            # position
    [-2.0, 2.0], [-2.0, 2.0], [-2.0, 2.0],            # velocity
    [-np.pi / 4, np.pi / 4], [-np.pi / 4, np.pi / 4],  # roll, pitch
    [-np.pi, np.pi],                                   # yaw
    [-2.0, 2.0], [-2.0, 2.0], [-2.0, 2.0],            # body rates
]


def make_quadrotor(params: QuadrotorParams = QuadrotorParams(),
                   state_box=None) -> ControlAffineSystem:
    """12-state quadrotor with thrust plus three body torques.

    State (x, y, z, vx, vy, vz, roll, pitch, yaw, wx, wy, wz); the input
    is (F, tau_x, tau_y, tau_z) with F in [0, 2 m g] and |tau_i| bounded.
    Safety excludes the infinite vertical column over the rectangle
    x in [-1.5, -0.75], y in [-0.375, 0.375]; the margin is a smoothed
    (log-sum-exp) maximum of the four signed face distances, shifted so
    h >= 0 implies the true max is nonnegative.
    """
    m = float(params.mass)
    jx, jy, jz = (float(v) for v in params.inertia)
    grav = float(params.gravity)
    rho = float(params.rho)
    if m <= 0 or min(jx, jy, jz) <= 0 or rho <= 0:
        raise ValueError("quadrotor parameters must be positive")

    def drift(x):
        x = np.asarray(x, dtype=np.float64)
        v = x[..., 3:6]
        phi, th = x[..., 6], x[..., 7]
        wx, wy, wz = x[..., 9], x[..., 10], x[..., 11]
        sp, cp = np.sin(phi), np.cos(phi)
        tt = np.tan(th)
        ct = np.cos(th)
        out = np.zeros_like(x)
        out[..., 0:3] = v
        out[..., 5] = -grav
        # Euler-angle kinematics for the ZYX convention
        out[..., 6] = wx + sp * tt * wy + cp * tt * wz
        out[..., 7] = cp * wy - sp * wz
        out[..., 8] = (sp * wy + cp * wz) / ct
        # J wdot = tau - w x (J w), torque part lives in actuation
        out[..., 9] = -(jz - jy) * wy * wz / jx
        out[..., 10] = -(jx - jz) * wz * wx / jy
        out[..., 11] = -(jy - jx) * wx * wy / jz
        return out

    def actuation(x):
        x = np.asarray(x, dtype=np.float64)
        phi, th, psi = x[..., 6], x[..., 7], x[..., 8]
        sp, cp = np.sin(phi), np.cos(phi)
        st, ct = np.sin(th), np.cos(th)
        ss, cs = np.sin(psi), np.cos(psi)
        g = np.zeros(x.shape[:-1] + (12, 4))
        # thrust direction: third column of R_z(psi) R_y(theta) R_x(phi)
        g[..., 3, 0] = (cp * st * cs + sp * ss) / m
        g[..., 4, 0] = (cp * st * ss - sp * cs) / m
        g[..., 5, 0] = (cp * ct) / m
        g[..., 9, 1] = 1.0 / jx
        g[..., 10, 2] = 1.0 / jy
        g[..., 11, 3] = 1.0 / jz
        return g

    def safe_margin(x):
        x = np.asarray(x, dtype=np.float64)
        px, py = x[..., 0], x[..., 1]
        margins = np.stack([-1.5 - px, px + 0.75, -0.375 - py, py - 0.375],
                           axis=-1)
        top = np.max(rho * margins, axis=-1, keepdims=True)
        expd = np.exp(rho * margins - top)
        ssum = expd.sum(axis=-1)
        val = (top[..., 0] + np.log(ssum)) / rho - np.log(4.0) / rho
        w = expd / ssum[..., None]
        grad = np.zeros_like(x)
        grad[..., 0] = w[..., 1] - w[..., 0]
        grad[..., 1] = w[..., 3] - w[..., 2]
        return val, grad

    box = _as_box(_QUAD_STATE_BOX if state_box is None else state_box)
    input_box = _as_box([[0.0, 2.0 * m * grav],
                         [-params.torque_max, params.torque_max],
                         [-params.torque_max, params.torque_max],
                         [-params.torque_max, params.torque_max]])
    return ControlAffineSystem(
        name="quadrotor",
        state_box=box,
        input_box=input_box,
        drift=drift,
        actuation=actuation,
        safe_margin=safe_margin,
    )


def make_system(name: str, **kwargs) -> ControlAffineSystem:
    factories = {"pendulum": make_pendulum, "quadrotor": make_quadrotor}
    if name not in factories:
        raise ValueError(f"unknown scenario {name!r}, know {sorted(factories)}")
    return factories[name](**kwargs)
