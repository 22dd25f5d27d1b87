"""Nonlinear program assembly for time-energy trajectory optimization.

Decision vector
---------------
The N steps contribute 3 variables each, laid out flat as

    q = [u_r(1), u_l(1), T(1), u_r(2), u_l(2), T(2), ..., u_r(N), u_l(N), T(N)]

so the decision dimension is 3N (``pack``/``unpack`` convert between
this vector and the (N, 3) control table).

Objective
---------
The running cost rate is

    L = tau' R tau + KE + beta

with tau the motor torques, R the input-energy weight, beta the time
weight, and KE either nu' P nu on wheel velocities or v' P v on body
velocities.  The objective is the rectangle-rule accumulation
z(N) = sum_k T(k) L(x(k), u(k)) evaluated at left-endpoint states.

Constraint ordering (stable contract)
-------------------------------------
``eval_constraints`` returns, in this fixed order (feasible iff <= 0):

    [0,   N)    T(k) - t_max                      (sampling upper)
    [N,  2N)    t_min - T(k)                      (sampling lower)
    [2N, 4N)    tau_r(k) - tau_max, tau_l(k) - tau_max   per step
    [4N, 6N)    tau_min - tau_r(k), tau_min - tau_l(k)   per step
    6N + 0,1    +-(x(N) - x_F) - eps_xy
    6N + 2,3    +-(y(N) - y_F) - eps_xy
    6N + 4,5    +-wrap(phi(N) - phi_F) - eps_phi
    6N + 6,7    +-v(N) - eps_v       (terminal body linear velocity)
    6N + 8,9    +-omega(N) - eps_v   (terminal body angular velocity)

for a total of 6N + 10 smooth scalars realizing 4N + 4 logical
constraints (each absolute value becomes a +- pair; the torque bounds
are per wheel).  When the optional acceleration or wheel-velocity boxes
are enabled, their rows are appended after the terminal block:

    u_r(k) - u_max, u_l(k) - u_max        per step (2N rows)
    u_min - u_r(k), u_min - u_l(k)        per step (2N rows)
    v_r(k+1) - nu_max, v_l(k+1) - nu_max  per step (2N rows)
    nu_min - v_r(k+1), nu_min - v_l(k+1)  per step (2N rows)

(the velocity box is applied at end-of-step states, since the initial
state is fixed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .discretize import (
    DiscretizationConfig,
    PropagationDivergedError,
    Trajectory,
    taylor_step,
)
from .robot import (
    IPHI,
    IV_L,
    IV_R,
    IX,
    IY,
    STATE_DIM,
    RobotParams,
    _require_finite,
    body_from_wheel_matrix,
    continuous_dynamics,
)

TERMINAL_ROWS = 10


@dataclass(frozen=True)
class Weights:
    """Cost weights: input-energy matrix, kinetic-energy matrix, time weight.

    Both weight matrices are 2x2 diagonal with nonnegative entries.
    ``ke_form`` selects whether the kinetic term quadratically weights
    wheel velocities ("wheel") or body velocities ("body", default; the
    post-hoc energy metric uses body velocities too).
    """

    input_weight: np.ndarray
    kinetic_weight: np.ndarray
    time_weight: float
    ke_form: str = "body"

    def __post_init__(self):
        r = _require_finite("input_weight", self.input_weight)
        p = _require_finite("kinetic_weight", self.kinetic_weight)
        if r.shape != (2, 2) or p.shape != (2, 2):
            raise ValueError("weight matrices must be 2x2")
        for name, m in (("input_weight", r), ("kinetic_weight", p)):
            if m[0, 1] != 0.0 or m[1, 0] != 0.0:
                raise ValueError(f"{name} must be diagonal")
            if m[0, 0] < 0.0 or m[1, 1] < 0.0:
                raise ValueError(f"{name} diagonal entries must be nonnegative")
        if self.time_weight < 0.0:
            raise ValueError(f"time_weight must be nonnegative, got {self.time_weight}")
        if self.ke_form not in ("wheel", "body"):
            raise ValueError(f"ke_form must be 'wheel' or 'body', got {self.ke_form!r}")
        if self.time_weight == 0.0 and np.all(r == 0.0) and np.all(p == 0.0):
            raise ValueError("all-zero weights make every feasible point optimal")
        r = np.ascontiguousarray(r)
        p = np.ascontiguousarray(p)
        r.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "input_weight", r)
        object.__setattr__(self, "kinetic_weight", p)

    @classmethod
    def from_alpha(cls, alpha: float, time_weight: float, ke_form: str = "body") -> "Weights":
        """Identical scalar weight on input and kinetic energy."""
        return cls(
            input_weight=alpha * np.eye(2),
            kinetic_weight=alpha * np.eye(2),
            time_weight=time_weight,
            ke_form=ke_form,
        )


@dataclass(frozen=True)
class ConstraintConfig:
    """Bounds, terminal target, and tolerances.

    The default tolerance profile is the desk-scale one (eps_phi 1e-4,
    eps_v 1e-6); the strict profile (1e-7 / 1e-9) is selected by the CLI
    flag --strict-tolerances.  ``u_min``/``u_max`` and ``nu_min``/``nu_max``
    enable the optional acceleration and wheel-velocity boxes.
    """

    target: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t_min: float = 0.01
    t_max: float = 2.0
    tau_min: float = -1.0
    tau_max: float = 1.0
    eps_xy: float = 1e-3
    eps_phi: float = 1e-4
    eps_v: float = 1e-6
    wrap_angle: bool = True
    u_min: float | None = None
    u_max: float | None = None
    nu_min: float | None = None
    nu_max: float | None = None

    def __post_init__(self):
        tgt = _require_finite("target", self.target)
        if tgt.shape != (3,):
            raise ValueError(f"target must be (x, y, phi), got shape {tgt.shape}")
        if not (0.0 < self.t_min < self.t_max):
            raise ValueError(f"need 0 < t_min < t_max, got [{self.t_min}, {self.t_max}]")
        if not (self.tau_min < self.tau_max):
            raise ValueError(f"need tau_min < tau_max, got [{self.tau_min}, {self.tau_max}]")
        for name in ("eps_xy", "eps_phi", "eps_v"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")
        if (self.u_min is None) != (self.u_max is None):
            raise ValueError("u_min and u_max must be set together")
        if (self.nu_min is None) != (self.nu_max is None):
            raise ValueError("nu_min and nu_max must be set together")
        if self.u_min is not None and not (self.u_min < self.u_max):
            raise ValueError("need u_min < u_max")
        if self.nu_min is not None and not (self.nu_min < self.nu_max):
            raise ValueError("need nu_min < nu_max")
        tgt = np.ascontiguousarray(tgt)
        tgt.flags.writeable = False
        object.__setattr__(self, "target", tgt)

    @property
    def has_accel_box(self) -> bool:
        return self.u_min is not None

    @property
    def has_velocity_box(self) -> bool:
        return self.nu_min is not None


@dataclass(frozen=True)
class MetricGains:
    """Gains for the post-hoc energy metric."""

    k_tau: float = 1.0
    k_m: float = 1.0

    def __post_init__(self):
        if self.k_tau < 0.0 or self.k_m < 0.0:
            raise ValueError("metric gains must be nonnegative")


@dataclass(frozen=True)
class NlpProblem:
    """Immutable bundle of everything needed to evaluate the NLP."""

    x0: np.ndarray
    n_steps: int
    params: RobotParams
    weights: Weights
    constraints: ConstraintConfig
    disc: DiscretizationConfig = field(default_factory=DiscretizationConfig)

    def __post_init__(self):
        x0 = _require_finite("x0", self.x0)
        if x0.shape != (STATE_DIM,):
            raise ValueError(f"x0 must have shape ({STATE_DIM},), got {x0.shape}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        x0 = np.ascontiguousarray(x0)
        x0.flags.writeable = False
        object.__setattr__(self, "x0", x0)

    @property
    def decision_dim(self) -> int:
        return 3 * self.n_steps


def pack(controls) -> np.ndarray:
    """Flatten an (N, 3) control table into the 3N decision vector."""
    c = np.asarray(controls, dtype=float)
    if c.ndim != 2 or c.shape[1] != 3:
        raise ValueError(f"controls must have shape (N, 3), got {c.shape}")
    return c.reshape(-1).copy()


def unpack(q, n_steps: int) -> np.ndarray:
    """Reshape a 3N decision vector into the (N, 3) control table."""
    v = np.asarray(q, dtype=float)
    if v.shape != (3 * n_steps,):
        raise ValueError(f"decision vector must have length {3 * n_steps}, got {v.shape}")
    return v.reshape(n_steps, 3).copy()


def wrap_to_pi(angle: float) -> float:
    """Wrap an angle difference to (-pi, pi]."""
    w = (angle + np.pi) % (2.0 * np.pi) - np.pi
    if w == -np.pi:
        w = np.pi
    return w


def logical_constraint_count(n_steps: int) -> int:
    """Count of logical inequality constraints (absolute values unsplit)."""
    return 4 * n_steps + 4


def smooth_constraint_count(n_steps: int, cc: ConstraintConfig) -> int:
    """Length of the smooth constraint vector ``eval_constraints`` emits."""
    n = 6 * n_steps + TERMINAL_ROWS
    if cc.has_accel_box:
        n += 4 * n_steps
    if cc.has_velocity_box:
        n += 4 * n_steps
    return n


def _lagrangian_terms(state, accel, w: Weights, p: RobotParams):
    """Cost rate and its partials w.r.t. the accelerations and wheel velocities."""
    nu = state[IV_R:IV_L + 1]
    m = p.inertia
    tau = m @ accel + p.coriolis @ nu
    r_tau = w.input_weight @ tau
    e_in = tau @ r_tau
    if w.ke_form == "wheel":
        p_nu = w.kinetic_weight @ nu
        e_ke = nu @ p_nu
        dke_dnu = 2.0 * p_nu
    else:
        o_inv = body_from_wheel_matrix(p)
        v = o_inv @ nu
        p_v = w.kinetic_weight @ v
        e_ke = v @ p_v
        dke_dnu = 2.0 * (o_inv.T @ p_v)
    rate = e_in + e_ke + w.time_weight
    d_du = 2.0 * (m.T @ r_tau)
    d_dnu = 2.0 * (p.coriolis.T @ r_tau) + dke_dnu
    return rate, d_du, d_dnu


def lagrangian(state, accel, w: Weights, p: RobotParams) -> float:
    """Running cost rate at one state/control pair (time-independent)."""
    s = _require_finite("state", state)
    u = _require_finite("accel", accel)
    rate, _, _ = _lagrangian_terms(s, u, w, p)
    return float(rate)


def accumulate_cost(traj: Trajectory, w: Weights, p: RobotParams) -> float:
    """Rectangle-rule cost: sum of T(k) * L at left-endpoint states."""
    total = 0.0
    for k in range(traj.n_steps):
        rate, _, _ = _lagrangian_terms(traj.states[k], traj.controls[k, :2], w, p)
        total += traj.controls[k, 2] * rate
    return total


def _constraint_vector(states, controls, cc: ConstraintConfig, p: RobotParams) -> np.ndarray:
    n = controls.shape[0]
    out = np.empty(smooth_constraint_count(n, cc))
    t_col = controls[:, 2]
    out[0:n] = t_col - cc.t_max
    out[n:2 * n] = cc.t_min - t_col
    taus = controls[:, :2] @ p.inertia.T + states[:-1, IV_R:IV_L + 1] @ p.coriolis.T
    out[2 * n:4 * n] = (taus - cc.tau_max).reshape(-1)
    out[4 * n:6 * n] = (cc.tau_min - taus).reshape(-1)

    base = 6 * n
    xf, yf, phif = cc.target
    dx = states[-1, IX] - xf
    dy = states[-1, IY] - yf
    dphi = states[-1, IPHI] - phif
    if cc.wrap_angle:
        dphi = wrap_to_pi(dphi)
    nu_n = states[-1, IV_R:IV_L + 1]
    v_n, omega_n = body_from_wheel_matrix(p) @ nu_n
    out[base + 0] = dx - cc.eps_xy
    out[base + 1] = -dx - cc.eps_xy
    out[base + 2] = dy - cc.eps_xy
    out[base + 3] = -dy - cc.eps_xy
    out[base + 4] = dphi - cc.eps_phi
    out[base + 5] = -dphi - cc.eps_phi
    out[base + 6] = v_n - cc.eps_v
    out[base + 7] = -v_n - cc.eps_v
    out[base + 8] = omega_n - cc.eps_v
    out[base + 9] = -omega_n - cc.eps_v

    pos = base + TERMINAL_ROWS
    if cc.has_accel_box:
        u_cols = controls[:, :2]
        out[pos:pos + 2 * n] = (u_cols - cc.u_max).reshape(-1)
        out[pos + 2 * n:pos + 4 * n] = (cc.u_min - u_cols).reshape(-1)
        pos += 4 * n
    if cc.has_velocity_box:
        nu_states = states[1:, IV_R:IV_L + 1]
        out[pos:pos + 2 * n] = (nu_states - cc.nu_max).reshape(-1)
        out[pos + 2 * n:pos + 4 * n] = (cc.nu_min - nu_states).reshape(-1)
    return out


def eval_constraints(traj: Trajectory, cc: ConstraintConfig, p: RobotParams) -> np.ndarray:
    """Smooth inequality constraint vector (feasible iff every entry <= 0).

    See the module docstring for the fixed row ordering.
    """
    return _constraint_vector(traj.states, traj.controls, cc, p)


def _step_partials(state, accel, t: float, p: RobotParams, ell_max: int):
    """One truncated-Taylor step plus its Jacobians.

    Returns (next_state, d(next)/d(state), d(next)/d(accel), d(next)/dT).
    Closed forms exist for truncation orders 1 and 2; the gradient path
    does not support higher orders.
    """
    if ell_max > 2:
        raise ValueError(
            f"analytic step Jacobians support truncation order <= 2, got {ell_max}"
        )
    r = p.wheel_radius
    b = p.body_radius
    k_lin = 0.5 * r
    k_ang = 0.5 * r / b
    phi = state[IPHI]
    c, s = np.cos(phi), np.sin(phi)
    v_sum = state[IV_R] + state[IV_L]
    omega = k_ang * (state[IV_R] - state[IV_L])
    u_sum = accel[0] + accel[1]

    d1 = continuous_dynamics(state, accel, p)
    j1 = np.zeros((STATE_DIM, STATE_DIM))
    j1[IX, IPHI] = -k_lin * s * v_sum
    j1[IX, IV_R] = k_lin * c
    j1[IX, IV_L] = k_lin * c
    j1[IY, IPHI] = k_lin * c * v_sum
    j1[IY, IV_R] = k_lin * s
    j1[IY, IV_L] = k_lin * s
    j1[IPHI, IV_R] = k_ang
    j1[IPHI, IV_L] = -k_ang
    j1[IPHI + 1, IV_R] = 1.0  # theta_r
    j1[IPHI + 2, IV_L] = 1.0  # theta_l
    g1 = np.zeros((STATE_DIM, 2))
    g1[IV_R, 0] = 1.0
    g1[IV_L, 1] = 1.0

    if ell_max == 1:
        nxt = state + t * d1
        a_mat = np.eye(STATE_DIM) + t * j1
        b_mat = t * g1
        return nxt, a_mat, b_mat, d1.copy()

    d2 = np.zeros(STATE_DIM)
    d2[IX] = -k_lin * s * v_sum * omega + k_lin * c * u_sum
    d2[IY] = k_lin * c * v_sum * omega + k_lin * s * u_sum
    d2[IPHI] = k_ang * (accel[0] - accel[1])
    d2[IPHI + 1] = accel[0]
    d2[IPHI + 2] = accel[1]

    j2 = np.zeros((STATE_DIM, STATE_DIM))
    j2[IX, IPHI] = -k_lin * (c * v_sum * omega + s * u_sum)
    j2[IX, IV_R] = -k_lin * s * (omega + v_sum * k_ang)
    j2[IX, IV_L] = -k_lin * s * (omega - v_sum * k_ang)
    j2[IY, IPHI] = -k_lin * s * v_sum * omega + k_lin * c * u_sum
    j2[IY, IV_R] = k_lin * c * (omega + v_sum * k_ang)
    j2[IY, IV_L] = k_lin * c * (omega - v_sum * k_ang)
    g2 = np.zeros((STATE_DIM, 2))
    g2[IX] = k_lin * c
    g2[IY] = k_lin * s
    g2[IPHI, 0] = k_ang
    g2[IPHI, 1] = -k_ang
    g2[IPHI + 1, 0] = 1.0
    g2[IPHI + 2, 1] = 1.0

    half_t2 = 0.5 * t * t
    nxt = state + t * d1 + half_t2 * d2
    a_mat = np.eye(STATE_DIM) + t * j1 + half_t2 * j2
    b_mat = t * g1 + half_t2 * g2
    dt_vec = d1 + t * d2
    return nxt, a_mat, b_mat, dt_vec


def objective_and_gradient(q, prob: NlpProblem):
    """Objective, gradient, constraint vector, and constraint Jacobian.

    Derivatives are propagated by forward sensitivities through the
    discrete step chain, differentiating the truncated Taylor series
    itself (including the sampling-period direction), so they are exact
    for the discrete problem.  Raises PropagationDivergedError when the
    rollout leaves the magnitude guard.
    """
    n = prob.n_steps
    controls = unpack(q, n)
    cc = prob.constraints
    p = prob.params
    w = prob.weights
    dim = 3 * n
    m_total = smooth_constraint_count(n, cc)

    states = np.empty((n + 1, STATE_DIM))
    states[0] = prob.x0
    sens = np.zeros((STATE_DIM, dim))
    objective = 0.0
    grad = np.zeros(dim)
    jac = np.zeros((m_total, dim))

    vel_box_base = 6 * n + TERMINAL_ROWS + (4 * n if cc.has_accel_box else 0)
    bound = prob.disc.divergence_bound

    for k in range(n):
        u = controls[k, :2]
        t = controls[k, 2]
        if t < 0.0:
            raise ValueError(f"sampling period {t} at step {k} is negative")
        col = 3 * k

        rate, d_du, d_dnu = _lagrangian_terms(states[k], u, w, p)
        objective += t * rate
        grad += t * (d_dnu @ sens[IV_R:IV_L + 1])
        grad[col:col + 2] += t * d_du
        grad[col + 2] += rate

        # sampling-period rows are linear in the decision variables
        jac[k, col + 2] = 1.0
        jac[n + k, col + 2] = -1.0

        # torque rows: tau = inertia @ u + coriolis @ nu(state k)
        dtau = p.coriolis @ sens[IV_R:IV_L + 1]
        for i in range(2):
            row = 2 * n + 2 * k + i
            jac[row] = dtau[i]
            jac[row, col:col + 2] += p.inertia[i]
            jac[4 * n + 2 * k + i] = -jac[row]

        if cc.has_accel_box:
            abase = 6 * n + TERMINAL_ROWS
            jac[abase + 2 * k, col] = 1.0
            jac[abase + 2 * k + 1, col + 1] = 1.0
            jac[abase + 2 * n + 2 * k, col] = -1.0
            jac[abase + 2 * n + 2 * k + 1, col + 1] = -1.0

        nxt, a_mat, b_mat, dt_vec = _step_partials(states[k], u, t, p, prob.disc.ell_max)
        if not np.all(np.isfinite(nxt)) or np.max(np.abs(nxt)) > bound:
            raise PropagationDivergedError(
                f"state magnitude exceeded {bound:g} at step {k + 1}"
            )
        states[k + 1] = nxt
        sens = a_mat @ sens
        sens[:, col:col + 2] += b_mat
        sens[:, col + 2] += dt_vec

        if cc.has_velocity_box:
            jac[vel_box_base + 2 * k] = sens[IV_R]
            jac[vel_box_base + 2 * k + 1] = sens[IV_L]
            jac[vel_box_base + 2 * n + 2 * k] = -sens[IV_R]
            jac[vel_box_base + 2 * n + 2 * k + 1] = -sens[IV_L]

    base = 6 * n
    o_inv = body_from_wheel_matrix(p)
    v_rows = o_inv @ sens[IV_R:IV_L + 1]
    jac[base + 0] = sens[IX]
    jac[base + 1] = -sens[IX]
    jac[base + 2] = sens[IY]
    jac[base + 3] = -sens[IY]
    jac[base + 4] = sens[IPHI]
    jac[base + 5] = -sens[IPHI]
    jac[base + 6] = v_rows[0]
    jac[base + 7] = -v_rows[0]
    jac[base + 8] = v_rows[1]
    jac[base + 9] = -v_rows[1]

    cons = _constraint_vector(states, controls, cc, p)
    return objective, grad, cons, jac


def objective_and_constraints(q, prob: NlpProblem):
    """Values-only evaluation (no sensitivity propagation); used by line search."""
    n = prob.n_steps
    controls = unpack(q, n)
    states = np.empty((n + 1, STATE_DIM))
    states[0] = prob.x0
    objective = 0.0
    bound = prob.disc.divergence_bound
    for k in range(n):
        u = controls[k, :2]
        t = controls[k, 2]
        rate, _, _ = _lagrangian_terms(states[k], u, prob.weights, prob.params)
        objective += t * rate
        nxt = taylor_step(states[k], controls[k], prob.params, prob.disc)
        if not np.all(np.isfinite(nxt)) or np.max(np.abs(nxt)) > bound:
            raise PropagationDivergedError(
                f"state magnitude exceeded {bound:g} at step {k + 1}"
            )
        states[k + 1] = nxt
    cons = _constraint_vector(states, controls, prob.constraints, prob.params)
    return objective, cons


def metrics(traj: Trajectory, gains: MetricGains, p: RobotParams):
    """Post-hoc performance measures: (total energy, total time).

    Energy sums T(k) * (k_tau |tau(k)|^2 + k_m |v(k)|^2) over steps with
    torques and body velocities taken at left-endpoint states; total
    time is the sum of the sampling periods.
    """
    o_inv = body_from_wheel_matrix(p)
    energy = 0.0
    for k in range(traj.n_steps):
        nu = traj.states[k, IV_R:IV_L + 1]
        tau = p.inertia @ traj.controls[k, :2] + p.coriolis @ nu
        v = o_inv @ nu
        energy += traj.controls[k, 2] * (gains.k_tau * (tau @ tau) + gains.k_m * (v @ v))
    t_f = float(np.sum(traj.controls[:, 2]))
    return float(energy), t_f
