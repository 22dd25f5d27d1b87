"""Discrete-time propagation of the robot model.

Each step applies a constant wheel-acceleration input over a step-owned
sampling period T and advances the state by the truncated Taylor series
of the resulting flow,

    next = state + sum_{l=1..ell_max} d_l(state, accel) * T^l / l!

where d_l is the l-th time derivative of the state along the flow
(``lie_term``).  The default truncation order is 2.  A fixed-substep
classical 4th-order integrator (``oracle_step``) serves as the
independent reference for accuracy tests: the truncated step has local
error O(T^(ell_max+1)) against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .robot import (
    IPHI,
    ITH_L,
    ITH_R,
    IV_L,
    IV_R,
    IX,
    IY,
    STATE_DIM,
    RobotParams,
    _require_finite,
    continuous_dynamics,
)


class PropagationDivergedError(RuntimeError):
    """A propagated state exceeded the configured magnitude bound."""


@dataclass(frozen=True)
class DiscretizationConfig:
    """Truncation order and oracle resolution.

    ``ell_max`` is the Taylor truncation order (>= 1, default 2).
    ``oracle_substeps`` is the number of fixed 4th-order substeps the
    reference integrator takes per interval.  ``divergence_bound`` is
    the state-magnitude guard used by ``propagate``.
    """

    ell_max: int = 2
    oracle_substeps: int = 64
    divergence_bound: float = 1e9

    def __post_init__(self):
        if self.ell_max < 1:
            raise ValueError(f"ell_max must be >= 1, got {self.ell_max}")
        if self.oracle_substeps < 1:
            raise ValueError(f"oracle_substeps must be >= 1, got {self.oracle_substeps}")
        if not (self.divergence_bound > 0.0):
            raise ValueError("divergence_bound must be positive")


@dataclass(frozen=True)
class Trajectory:
    """A rollout: N+1 states (rows of 7) and N controls (rows of u_r, u_l, T)."""

    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        states = np.ascontiguousarray(self.states, dtype=float)
        controls = np.ascontiguousarray(self.controls, dtype=float)
        if controls.ndim != 2 or controls.shape[1] != 3:
            raise ValueError(f"controls must have shape (N, 3), got {controls.shape}")
        if states.shape != (controls.shape[0] + 1, STATE_DIM):
            raise ValueError(
                f"states must have shape (N+1, {STATE_DIM}) = "
                f"({controls.shape[0] + 1}, {STATE_DIM}), got {states.shape}"
            )
        states.flags.writeable = False
        controls.flags.writeable = False
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "controls", controls)

    @property
    def n_steps(self) -> int:
        return self.controls.shape[0]


def _flow_series(state, accel, params: RobotParams, order: int) -> np.ndarray:
    """Taylor coefficients of the flow, rows = orders 0..order, columns = state.

    The wheel velocities are linear in time and the heading quadratic, so
    their series terminate; the position series follows from the product
    of the heading's sine/cosine series with the linear wheel-sum series.
    Coefficient l equals the l-th state derivative divided by l!.
    """
    r = params.wheel_radius
    b = params.body_radius
    k_lin = 0.5 * r
    k_ang = 0.5 * r / b
    u_r, u_l = accel

    coeff = np.zeros((order + 1, STATE_DIM))
    coeff[0] = state

    # wheel velocities: v(t) = v0 + u t
    coeff[1, IV_R] = u_r
    coeff[1, IV_L] = u_l
    # wheel angles: integrals of the velocities
    coeff[1, ITH_R] = state[IV_R]
    coeff[1, ITH_L] = state[IV_L]
    if order >= 2:
        coeff[2, ITH_R] = 0.5 * u_r
        coeff[2, ITH_L] = 0.5 * u_l
    # heading: phi(t) = phi0 + omega0 t + (k_ang/2)(u_r - u_l) t^2
    coeff[1, IPHI] = k_ang * (state[IV_R] - state[IV_L])
    if order >= 2:
        coeff[2, IPHI] = 0.5 * k_ang * (u_r - u_l)

    # series of phi'(t), cos(phi(t)), sin(phi(t))
    dphi = np.zeros(order + 1)
    dphi[0] = coeff[1, IPHI]
    if order >= 1:
        dphi[1] = k_ang * (u_r - u_l)
    cosp = np.zeros(order + 1)
    sinp = np.zeros(order + 1)
    cosp[0] = np.cos(state[IPHI])
    sinp[0] = np.sin(state[IPHI])
    for n in range(order):
        # (cos phi)' = -phi' sin phi, (sin phi)' = phi' cos phi
        cosp[n + 1] = -sum(dphi[j] * sinp[n - j] for j in range(n + 1)) / (n + 1)
        sinp[n + 1] = sum(dphi[j] * cosp[n - j] for j in range(n + 1)) / (n + 1)

    # wheel-velocity sum: sigma(t) = sigma0 + (u_r + u_l) t
    sigma = np.zeros(order + 1)
    sigma[0] = state[IV_R] + state[IV_L]
    if order >= 1:
        sigma[1] = u_r + u_l

    # x' = k_lin cos(phi) sigma, y' = k_lin sin(phi) sigma
    for n in range(order):
        conv_c = sum(cosp[j] * sigma[n - j] for j in range(n + 1))
        conv_s = sum(sinp[j] * sigma[n - j] for j in range(n + 1))
        coeff[n + 1, IX] = k_lin * conv_c / (n + 1)
        coeff[n + 1, IY] = k_lin * conv_s / (n + 1)

    return coeff


def _second_order_term(state, accel, params: RobotParams) -> np.ndarray:
    """Second time derivative of the state along the flow, closed form."""
    r = params.wheel_radius
    b = params.body_radius
    k_lin = 0.5 * r
    k_ang = 0.5 * r / b
    phi = state[IPHI]
    c, s = np.cos(phi), np.sin(phi)
    v_sum = state[IV_R] + state[IV_L]
    omega = k_ang * (state[IV_R] - state[IV_L])
    u_sum = accel[0] + accel[1]
    out = np.zeros(STATE_DIM)
    out[IX] = -k_lin * s * v_sum * omega + k_lin * c * u_sum
    out[IY] = k_lin * c * v_sum * omega + k_lin * s * u_sum
    out[IPHI] = k_ang * (accel[0] - accel[1])
    out[ITH_R] = accel[0]
    out[ITH_L] = accel[1]
    return out


def lie_term(state, accel, ell: int, params: RobotParams) -> np.ndarray:
    """The ell-th time derivative of the state along the constant-input flow.

    Order 1 is the continuous dynamics; order 2 is closed form; higher
    orders are recovered exactly from the truncated power series of the
    flow (the velocity rows vanish there).
    """
    if ell < 1:
        raise ValueError(f"derivative order must be >= 1, got {ell}")
    if ell == 1:
        return continuous_dynamics(state, accel, params)
    s = _require_finite("state", state)
    u = _require_finite("accel", accel)
    if ell == 2:
        return _second_order_term(s, u, params)
    coeff = _flow_series(s, u, params, ell)
    return coeff[ell] * math.factorial(ell)


def taylor_step(state, control, params: RobotParams, cfg: DiscretizationConfig) -> np.ndarray:
    """Advance the state by one truncated-Taylor step.

    ``control`` is (u_r, u_l, T).  The wheel-velocity rows update exactly
    as v + T u for any truncation order >= 1.
    """
    s = _require_finite("state", state)
    c = _require_finite("control", control)
    u = c[:2]
    t = c[2]
    if t < 0.0:
        raise ValueError(f"sampling period must be nonnegative, got {t}")
    if cfg.ell_max == 1:
        return s + t * continuous_dynamics(s, u, params)
    if cfg.ell_max == 2:
        d1 = continuous_dynamics(s, u, params)
        d2 = _second_order_term(s, u, params)
        return s + t * d1 + (0.5 * t * t) * d2
    coeff = _flow_series(s, u, params, cfg.ell_max)
    powers = t ** np.arange(cfg.ell_max + 1)
    return powers @ coeff


def oracle_step(state, control, params: RobotParams, cfg: DiscretizationConfig) -> np.ndarray:
    """Reference step: classical 4th-order integration with fixed substeps.

    Integrates the continuous dynamics over [0, T] holding the wheel
    accelerations constant.  Used as the independent accuracy oracle for
    ``taylor_step``.
    """
    s = _require_finite("state", state).copy()
    c = _require_finite("control", control)
    u = c[:2]
    t = c[2]
    if t < 0.0:
        raise ValueError(f"sampling period must be nonnegative, got {t}")
    if t == 0.0:
        return s
    h = t / cfg.oracle_substeps
    for _ in range(cfg.oracle_substeps):
        k1 = continuous_dynamics(s, u, params)
        k2 = continuous_dynamics(s + 0.5 * h * k1, u, params)
        k3 = continuous_dynamics(s + 0.5 * h * k2, u, params)
        k4 = continuous_dynamics(s + h * k3, u, params)
        s = s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return s


def propagate(x0, controls, params: RobotParams, cfg: DiscretizationConfig) -> Trajectory:
    """Roll the truncated-Taylor step forward over a control sequence.

    Raises PropagationDivergedError if any state entry exceeds the
    configured magnitude bound, which signals a pathological decision
    vector to the solver's line search.
    """
    start = _require_finite("x0", x0)
    ctrl = np.atleast_2d(np.asarray(controls, dtype=float))
    if ctrl.size == 0:
        ctrl = ctrl.reshape(0, 3)
    if ctrl.shape[1] != 3:
        raise ValueError(f"controls must have shape (N, 3), got {ctrl.shape}")
    n = ctrl.shape[0]
    states = np.empty((n + 1, STATE_DIM))
    states[0] = start
    bound = cfg.divergence_bound
    for k in range(n):
        nxt = taylor_step(states[k], ctrl[k], params, cfg)
        if not np.all(np.isfinite(nxt)) or np.max(np.abs(nxt)) > bound:
            raise PropagationDivergedError(
                f"state magnitude exceeded {bound:g} at step {k + 1}"
            )
        states[k + 1] = nxt
    return Trajectory(states=states, controls=ctrl)
