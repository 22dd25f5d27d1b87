"""Differential-drive robot model.

The robot state is the 7-vector

    [x, y, phi, theta_r, theta_l, v_r, v_l]

with planar position (x, y) in meters, heading phi in radians, wheel
angles theta_r/theta_l in radians, and wheel angular velocities
v_r/v_l in rad/s.  Two independently driven wheels of radius
``wheel_radius`` sit on an axle of half-length ``body_radius``; the
rolling-without-slipping constraint couples body motion to the wheel
rates:

    x_dot   = (r/2) cos(phi) (v_r + v_l)
    y_dot   = (r/2) sin(phi) (v_r + v_l)
    phi_dot = (r/2b) (v_r - v_l)

The wheel-velocity dynamics are feedback-linearized: the control input
is the pair of wheel angular accelerations u = (u_r, u_l), and the
motor torques that realize it are recovered by the inverse map

    tau = inertia @ u + coriolis @ nu

with nu = (v_r, v_l).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STATE_DIM = 7

# state vector indices
IX, IY, IPHI, ITH_R, ITH_L, IV_R, IV_L = range(STATE_DIM)

_DEFAULT_INERTIA = ((0.3, 0.05), (0.05, 0.3))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


def _require_finite(name: str, value) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries: {arr!r}")
    return arr


@dataclass(frozen=True)
class RobotParams:
    """Physical parameters of the robot.

    wheel_radius and body_radius are in meters; ``inertia`` is the
    symmetric positive definite 2x2 wheel-space inertia matrix
    (kg m^2) and ``coriolis`` the constant 2x2 velocity-coupling
    matrix (N m s/rad).  The shipped defaults are implementer-chosen
    placeholders, not measurements of any particular platform.
    """

    wheel_radius: float = 0.1
    body_radius: float = 0.25
    inertia: np.ndarray = field(default_factory=lambda: np.array(_DEFAULT_INERTIA))
    coriolis: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    sym_tol: float = 1e-12

    def __post_init__(self):
        if not (self.wheel_radius > 0.0):
            raise ValueError(f"wheel_radius must be positive, got {self.wheel_radius}")
        if not (self.body_radius > 0.0):
            raise ValueError(f"body_radius must be positive, got {self.body_radius}")
        m = _require_finite("inertia", self.inertia)
        v = _require_finite("coriolis", self.coriolis)
        if m.shape != (2, 2) or v.shape != (2, 2):
            raise ValueError("inertia and coriolis must be 2x2 matrices")
        if np.max(np.abs(m - m.T)) > self.sym_tol:
            raise ValueError("inertia matrix must be symmetric")
        eigvals = np.linalg.eigvalsh(m)
        if np.min(eigvals) <= 0.0:
            raise ValueError(f"inertia matrix must be positive definite, eigenvalues {eigvals}")
        object.__setattr__(self, "inertia", _readonly(m))
        object.__setattr__(self, "coriolis", _readonly(v))


def continuous_dynamics(state, accel, params: RobotParams) -> np.ndarray:
    """Time derivative of the 7-vector state under wheel accelerations.

    ``accel`` is (u_r, u_l) in rad/s^2.  The last two entries of the
    result equal ``accel`` exactly; the first five depend only on phi
    and the wheel velocities.
    """
    s = _require_finite("state", state)
    u = _require_finite("accel", accel)
    if s.shape != (STATE_DIM,):
        raise ValueError(f"state must have shape ({STATE_DIM},), got {s.shape}")
    if u.shape != (2,):
        raise ValueError(f"accel must have shape (2,), got {u.shape}")
    r = params.wheel_radius
    b = params.body_radius
    phi = s[IPHI]
    v_sum = s[IV_R] + s[IV_L]
    out = np.empty(STATE_DIM)
    out[IX] = 0.5 * r * np.cos(phi) * v_sum
    out[IY] = 0.5 * r * np.sin(phi) * v_sum
    out[IPHI] = (0.5 * r / b) * (s[IV_R] - s[IV_L])
    out[ITH_R] = s[IV_R]
    out[ITH_L] = s[IV_L]
    out[IV_R] = u[0]
    out[IV_L] = u[1]
    return out


def torque_from_accel(accel, wheel_vel, params: RobotParams) -> np.ndarray:
    """Motor torques (tau_r, tau_l) realizing the given wheel accelerations.

    Inverse of the feedback linearization: tau = inertia @ u + coriolis @ nu.
    """
    u = _require_finite("accel", accel)
    nu = _require_finite("wheel_vel", wheel_vel)
    return params.inertia @ u + params.coriolis @ nu


def body_from_wheel(wheel_vel, params: RobotParams) -> np.ndarray:
    """Body velocities (v, omega) from wheel velocities (v_r, v_l).

    Uses the closed-form inverse of the geometric wheel map; no matrix
    is inverted numerically.
    """
    nu = np.asarray(wheel_vel, dtype=float)
    r = params.wheel_radius
    b = params.body_radius
    return np.array([
        0.5 * r * (nu[0] + nu[1]),
        (0.5 * r / b) * (nu[0] - nu[1]),
    ])


def wheel_from_body(body_vel, params: RobotParams) -> np.ndarray:
    """Wheel velocities (v_r, v_l) from body velocities (v, omega)."""
    bv = np.asarray(body_vel, dtype=float)
    r = params.wheel_radius
    b = params.body_radius
    return np.array([
        (bv[0] + b * bv[1]) / r,
        (bv[0] - b * bv[1]) / r,
    ])


def body_from_wheel_matrix(params: RobotParams) -> np.ndarray:
    """The 2x2 matrix mapping (v_r, v_l) to (v, omega)."""
    r = params.wheel_radius
    b = params.body_radius
    return np.array([[0.5 * r, 0.5 * r], [0.5 * r / b, -0.5 * r / b]])
