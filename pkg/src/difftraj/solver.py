"""SQP solver with damped BFGS and an l1-merit line search.

The core routine ``minimize`` handles a generic smooth inequality-
constrained problem

    min f(x)    s.t.    c(x) <= 0,   lb <= x <= ub

given a callback returning (f, grad f, c, Jacobian of c).  Each
iteration solves a strictly convex QP on the linearized constraints
(falling back to a jointly relaxed QP when the linearization is
infeasible), globalizes with an Armijo backtracking search on the
exact l1 penalty function, applies one second-order correction when
the full step is rejected for constraint growth, and maintains a
positive definite Hessian approximation with Powell-damped BFGS
updates.  Variable bounds are imposed inside the QP, so every iterate
satisfies them exactly.

``solve`` adapts the trajectory NLP to this interface: sampling-period
bounds become variable bounds (their rows are stripped from the
constraint vector handed to the QP), and the remaining rows are
linearized from the forward-sensitivity Jacobian.

Convergence is declared when

    max(c)_+ <= sqrt(kkt_tol)                       (feasibility)
    max(||grad L||_inf, complementarity) / max(1, ||grad f||_inf) <= kkt_tol

where grad L = grad f + J' lam + bound-multiplier terms, and the
complementarity measure is max_i |lam_i c_i|.  The reported
``kkt_residual`` is the left side of the second test.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .discretize import PropagationDivergedError, Trajectory, propagate
from .qp import solve_qp, solve_qp_elastic
from .problem import (
    NlpProblem,
    accumulate_cost,
    eval_constraints,
    objective_and_constraints,
    objective_and_gradient,
    pack,
    unpack,
    wrap_to_pi,
)
from .robot import IPHI, IV_L, IV_R, IX, IY, wheel_from_body

CONVERGED = "converged"
MAX_ITERATIONS = "max-iterations"
INFEASIBLE_STALL = "infeasible-stall"
LINE_SEARCH_FAILURE = "line-search-failure"
DIVERGED = "diverged"


@dataclass(frozen=True)
class SolverOptions:
    kkt_tol: float = 1e-9
    max_iter: int = 500
    merit_penalty_init: float = 1.0
    merit_penalty_growth: float = 10.0
    merit_penalty_cap: float = 1e8
    ls_backtrack_factor: float = 0.5
    ls_max_steps: int = 30
    bfgs_damping_threshold: float = 0.2
    fd_check: bool = False
    soc: bool = True
    debug: bool = False
    armijo_c1: float = 1e-4
    stall_iters: int = 20
    stall_tol: float = 1e-12

    def __post_init__(self):
        if not (self.kkt_tol > 0.0):
            raise ValueError("kkt_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not (0.0 < self.ls_backtrack_factor < 1.0):
            raise ValueError("ls_backtrack_factor must be in (0, 1)")
        if not (0.0 < self.bfgs_damping_threshold < 1.0):
            raise ValueError("bfgs_damping_threshold must be in (0, 1)")


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    merit: float
    merit_accepted: float
    step_length: float
    max_violation: float
    penalty: float
    kkt_residual: float


@dataclass
class MinimizeResult:
    status: str
    x: np.ndarray
    objective: float
    multipliers: np.ndarray
    kkt_residual: float
    max_violation: float
    iterations: int
    history: list[IterationRecord]
    wall_time: float
    message: str = ""


@dataclass
class SolveReport:
    """Outcome of one trajectory solve.

    ``t_f`` and ``e_optimal`` are left for the caller to fill from
    ``metrics`` with its preferred gains.
    """

    status: str
    controls: np.ndarray
    trajectory: Trajectory
    objective: float
    kkt_residual: float
    max_constraint_violation: float
    iterations: int
    history: list[IterationRecord]
    wall_time: float
    t_f: float | None = None
    e_optimal: float | None = None


def _bound_rows(lb, ub, n):
    rows = []
    rhs_idx = []  # (variable index, sign)
    for i in range(n):
        if np.isfinite(ub[i]):
            e = np.zeros(n)
            e[i] = 1.0
            rows.append(e)
            rhs_idx.append((i, 1.0))
        if np.isfinite(lb[i]):
            e = np.zeros(n)
            e[i] = -1.0
            rows.append(e)
            rhs_idx.append((i, -1.0))
    c_b = np.array(rows) if rows else np.zeros((0, n))
    return c_b, rhs_idx


def _fd_gradient(value_fn, x, rel_step=1e-6):
    n = x.size
    grad = np.zeros(n)
    for i in range(n):
        h = rel_step * max(abs(x[i]), 1.0)
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        fp, _ = value_fn(xp)
        fm, _ = value_fn(xm)
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def minimize(fun, x0, lb=None, ub=None, options: SolverOptions | None = None,
             fun_value=None) -> MinimizeResult:
    """Solve min f(x) s.t. c(x) <= 0, lb <= x <= ub.

    ``fun(x)`` returns (f, grad, c, jac); ``fun_value(x)``, if given,
    returns just (f, c) and is used for line-search trials.  Either may
    raise PropagationDivergedError to mark a point as unusable; the
    line search treats such points as infinitely bad.
    """
    opts = options or SolverOptions()
    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float)
    ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float)
    if np.any(lb > ub):
        raise ValueError("lower bounds exceed upper bounds")
    x = np.clip(x, lb, ub)
    if fun_value is None:
        def fun_value(z, _fun=fun):
            f, _, c, _ = _fun(z)
            return f, c

    start = time.perf_counter()
    history: list[IterationRecord] = []

    def finish(status, f, lam, kkt, viol, it, message=""):
        return MinimizeResult(
            status=status, x=x, objective=f, multipliers=lam,
            kkt_residual=kkt, max_violation=viol, iterations=it,
            history=history, wall_time=time.perf_counter() - start,
            message=message,
        )

    try:
        f, g, c, jac = fun(x)
    except PropagationDivergedError as exc:
        return finish(DIVERGED, np.nan, np.zeros(0), np.inf, np.inf, 0, str(exc))
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        return finish(DIVERGED, f, np.zeros(0), np.inf, np.inf, 0,
                      "non-finite objective or gradient at the initial point")
    m = c.size

    if opts.fd_check:
        fd = _fd_gradient(fun_value, x)
        denom = np.maximum(np.abs(fd), 1e-8)
        err = float(np.max(np.abs(fd - g) / denom))
        if err > 1e-4:
            raise RuntimeError(
                f"gradient self-check failed at the initial point: relative error {err:.3e}"
            )

    c_bnd, bnd_meta = _bound_rows(lb, ub, n)
    n_bnd = c_bnd.shape[0]
    relax_mask = np.concatenate([np.ones(m, dtype=bool), np.zeros(n_bnd, dtype=bool)])

    hess = np.eye(n)
    rescaled = False
    rho = opts.merit_penalty_init
    feas_tol = float(np.sqrt(opts.kkt_tol))
    stall_best = np.inf
    stall_count = 0
    lam = np.zeros(m)
    kkt_res = np.inf

    def violation_inf(cv):
        return float(max(0.0, np.max(cv))) if cv.size else 0.0

    def violation_l1(cv):
        return float(np.sum(np.maximum(cv, 0.0))) if cv.size else 0.0

    for it in range(1, opts.max_iter + 1):
        d_bnd = np.array([ub[i] - x[i] if s > 0 else x[i] - lb[i] for i, s in bnd_meta])
        c_qp = np.vstack([jac, c_bnd]) if n_bnd else jac
        d_qp = np.concatenate([-c, d_bnd]) if n_bnd else -c

        qp = solve_qp(hess, g, c_qp, d_qp)
        if qp.status != "optimal":
            qp = solve_qp_elastic(
                hess, g, c_qp, d_qp, relax_mask,
                penalty=max(1e4, 100.0 * rho),
            )
            if qp.status != "optimal":
                return finish(INFEASIBLE_STALL, f, lam, kkt_res, violation_inf(c), it,
                              f"relaxed QP subproblem failed ({qp.status})")
        p = qp.p
        lam = qp.multipliers[:m]
        mu_bnd = qp.multipliers[m:]

        # KKT measures at the current point with the QP multipliers
        grad_lag = g + jac.T @ lam
        if n_bnd:
            grad_lag = grad_lag + c_bnd.T @ mu_bnd
        comp = float(np.max(np.abs(lam * c))) if m else 0.0
        if n_bnd:
            comp = max(comp, float(np.max(np.abs(mu_bnd * d_bnd))))
        scale = max(1.0, float(np.max(np.abs(g))))
        kkt_res = max(float(np.max(np.abs(grad_lag))), comp) / scale
        viol = violation_inf(c)
        if viol <= feas_tol and kkt_res <= opts.kkt_tol:
            return finish(CONVERGED, f, lam, kkt_res, viol, it - 1)

        # infeasibility stall bookkeeping
        if viol > feas_tol and rho >= 0.999 * opts.merit_penalty_cap:
            if viol > stall_best - opts.stall_tol:
                stall_count += 1
            else:
                stall_count = 0
            stall_best = min(stall_best, viol)
            if stall_count >= opts.stall_iters:
                return finish(INFEASIBLE_STALL, f, lam, kkt_res, viol, it,
                              "constraint violation stopped decreasing at the penalty cap")
        else:
            stall_count = 0
            stall_best = min(stall_best, viol)

        # exact-penalty weight large enough to make p a descent direction
        v_cur = violation_l1(c)
        v_lin = violation_l1(c + jac @ p) if m else 0.0
        decrease_lin = v_cur - v_lin
        rho_req = 0.0
        if decrease_lin > 1e-14:
            rho_req = (g @ p + 0.5 * (p @ hess @ p)) / (0.5 * decrease_lin)
        lam_inf = float(np.max(lam)) if m else 0.0
        rho_new = max(rho, 1.5 * lam_inf + 1e-4, rho_req)
        if v_cur > feas_tol and decrease_lin <= 1e-14 and np.linalg.norm(p) <= 1e-12:
            rho_new = max(rho_new, opts.merit_penalty_growth * rho)
        rho = min(rho_new, opts.merit_penalty_cap)

        merit0 = f + rho * v_cur
        deriv = g @ p - rho * decrease_lin
        if deriv > -1e-16:
            deriv = min(deriv, 0.0)

        def merit_at(z):
            try:
                fz, cz = fun_value(z)
            except PropagationDivergedError:
                return np.inf, np.nan, None
            if not np.isfinite(fz):
                return np.inf, fz, cz
            return fz + rho * violation_l1(cz), fz, cz

        alpha = 1.0
        accepted = False
        trial = x
        merit_trial = merit0
        soc_tried = not opts.soc
        for _ in range(opts.ls_max_steps):
            cand = np.clip(x + alpha * p, lb, ub)
            merit_cand, _, c_cand = merit_at(cand)
            if merit_cand <= merit0 + opts.armijo_c1 * alpha * deriv:
                trial, merit_trial, accepted = cand, merit_cand, True
                break
            if (not soc_tried and alpha == 1.0 and c_cand is not None
                    and violation_l1(c_cand) >= v_cur):
                soc_tried = True
                viol_rows = np.where(c_cand > 0.0)[0]
                if viol_rows.size:
                    a_rows = jac[viol_rows]
                    gram = a_rows @ a_rows.T
                    gram[np.diag_indices_from(gram)] += 1e-10
                    try:
                        corr = -a_rows.T @ np.linalg.solve(gram, c_cand[viol_rows])
                    except np.linalg.LinAlgError:
                        corr = None
                    if corr is not None:
                        cand2 = np.clip(x + p + corr, lb, ub)
                        merit_cand2, _, _ = merit_at(cand2)
                        if merit_cand2 <= merit0 + opts.armijo_c1 * deriv:
                            trial, merit_trial, accepted = cand2, merit_cand2, True
                            break
            alpha *= opts.ls_backtrack_factor
        if not accepted:
            return finish(LINE_SEARCH_FAILURE, f, lam, kkt_res, viol, it,
                          "backtracking exhausted without sufficient merit decrease")

        try:
            f_new, g_new, c_new, jac_new = fun(trial)
        except PropagationDivergedError as exc:
            return finish(DIVERGED, f, lam, kkt_res, viol, it, str(exc))
        if not np.isfinite(f_new) or not np.all(np.isfinite(g_new)):
            return finish(DIVERGED, f_new, lam, kkt_res, viol, it,
                          "non-finite objective or gradient at an accepted point")

        history.append(IterationRecord(
            iteration=it, objective=f, merit=merit0, merit_accepted=merit_trial,
            step_length=alpha, max_violation=viol, penalty=rho, kkt_residual=kkt_res,
        ))

        # Powell-damped BFGS update on the Lagrangian gradient difference
        step = trial - x
        y_vec = (g_new + jac_new.T @ lam) - (g + jac.T @ lam) if m else g_new - g
        step_norm = float(np.max(np.abs(step)))
        if step_norm > 1e-14 * (1.0 + float(np.max(np.abs(x)))):
            sy = float(step @ y_vec)
            if not rescaled and sy > 1e-12:
                hess = (float(y_vec @ y_vec) / sy) * np.eye(n)
                rescaled = True
            h_s = hess @ step
            s_h_s = float(step @ h_s)
            if s_h_s > 1e-16:
                thresh = opts.bfgs_damping_threshold
                if sy < thresh * s_h_s:
                    theta = (1.0 - thresh) * s_h_s / (s_h_s - sy)
                    y_used = theta * y_vec + (1.0 - theta) * h_s
                else:
                    y_used = y_vec
                s_y_used = float(step @ y_used)
                if s_y_used > 1e-16:
                    hess = hess - np.outer(h_s, h_s) / s_h_s + np.outer(y_used, y_used) / s_y_used
                    hess = 0.5 * (hess + hess.T)
                    if opts.debug:
                        min_eig = float(np.min(np.linalg.eigvalsh(hess)))
                        assert min_eig > 0.0, f"BFGS matrix lost definiteness: {min_eig}"

        x, f, g, c, jac = trial, f_new, g_new, c_new, jac_new

    return finish(MAX_ITERATIONS, f, lam, kkt_res, violation_inf(c), opts.max_iter)


def _nlp_callbacks(prob: NlpProblem):
    """Adapt the trajectory NLP: strip sampling-period rows (handled as bounds)."""
    skip = 2 * prob.n_steps

    def full(q):
        f, g, c, jac = objective_and_gradient(q, prob)
        return f, g, c[skip:], jac[skip:]

    def value(q):
        f, c = objective_and_constraints(q, prob)
        return f, c[skip:]

    return full, value


def solve(prob: NlpProblem, guess, opts: SolverOptions | None = None) -> SolveReport:
    """Solve the trajectory NLP from an initial control sequence.

    The guess must have one (u_r, u_l, T) row per step with every
    sampling period already inside its bounds.  The result is
    deterministic for identical inputs.
    """
    opts = opts or SolverOptions()
    guess = np.asarray(guess, dtype=float)
    if guess.shape != (prob.n_steps, 3):
        raise ValueError(f"guess must have shape ({prob.n_steps}, 3), got {guess.shape}")
    cc = prob.constraints
    t_col = guess[:, 2]
    if np.any(t_col < cc.t_min) or np.any(t_col > cc.t_max):
        raise ValueError("guess sampling periods must lie within [t_min, t_max]")

    n_var = prob.decision_dim
    lb = np.full(n_var, -np.inf)
    ub = np.full(n_var, np.inf)
    lb[2::3] = cc.t_min
    ub[2::3] = cc.t_max

    full, value = _nlp_callbacks(prob)
    res = minimize(full, pack(guess), lb=lb, ub=ub, options=opts, fun_value=value)

    controls = unpack(res.x, prob.n_steps)
    trajectory = propagate(prob.x0, controls, prob.params, prob.disc)
    objective = accumulate_cost(trajectory, prob.weights, prob.params)
    cons = eval_constraints(trajectory, cc, prob.params)
    max_viol = float(max(0.0, np.max(cons)))
    return SolveReport(
        status=res.status,
        controls=controls,
        trajectory=trajectory,
        objective=objective,
        kkt_residual=res.kkt_residual,
        max_constraint_violation=max_viol,
        iterations=res.iterations,
        history=res.history,
        wall_time=res.wall_time,
    )


def make_initial_guess(prob: NlpProblem, v_ref: float = 1.0) -> np.ndarray:
    """Heuristic starting controls: turn toward the goal, drive, turn to the
    final heading.

    Sampling periods are uniform at clamp(t_guess / N, t_min, t_max)
    with t_guess = 2 * straight-line distance / v_ref, so the period
    bounds hold exactly.  Wheel accelerations are finite differences of
    a wheel-velocity profile built from a triangular turn rate and a
    trapezoidal forward speed, which starts and ends at rest.
    """
    if not (v_ref > 0.0):
        raise ValueError("v_ref must be positive")
    n = prob.n_steps
    cc = prob.constraints
    x0 = prob.x0
    dx = cc.target[0] - x0[IX]
    dy = cc.target[1] - x0[IY]
    dist = float(np.hypot(dx, dy))
    t_guess = 2.0 * dist / v_ref
    t_step = float(np.clip(t_guess / n, cc.t_min, cc.t_max))
    total = n * t_step

    if dist > 1e-12:
        bearing = float(np.arctan2(dy, dx))
    else:
        bearing = float(x0[IPHI])
    turn1 = wrap_to_pi(bearing - x0[IPHI])
    turn2 = wrap_to_pi(float(cc.target[2]) - bearing)
    t_turn1 = 0.2 * total if abs(turn1) > 1e-12 else 0.0
    t_turn2 = 0.2 * total if abs(turn2) > 1e-12 else 0.0
    window = total - t_turn1 - t_turn2

    def omega_profile(t):
        if t_turn1 > 0.0 and t < t_turn1:
            peak = 2.0 * turn1 / t_turn1
            frac = t / t_turn1
            return peak * (2.0 * frac if frac < 0.5 else 2.0 - 2.0 * frac)
        if t_turn2 > 0.0 and t > total - t_turn2:
            peak = 2.0 * turn2 / t_turn2
            frac = (t - (total - t_turn2)) / t_turn2
            return peak * (2.0 * frac if frac < 0.5 else 2.0 - 2.0 * frac)
        return 0.0

    def speed_profile(t):
        if dist <= 1e-12 or window <= 0.0:
            return 0.0
        s = t - t_turn1
        if s <= 0.0 or s >= window:
            return 0.0
        ramp = 0.25 * window
        peak = dist / (0.75 * window)
        if s < ramp:
            return peak * s / ramp
        if s > window - ramp:
            return peak * (window - s) / ramp
        return peak

    knots = np.empty((n + 1, 2))
    knots[0] = x0[IV_R:IV_L + 1]
    for j in range(1, n + 1):
        t = j * t_step
        knots[j] = wheel_from_body((speed_profile(t), omega_profile(t)), prob.params)

    controls = np.empty((n, 3))
    controls[:, :2] = (knots[1:] - knots[:-1]) / t_step
    controls[:, 2] = t_step
    return controls
