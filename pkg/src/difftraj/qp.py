"""Dense active-set solver for strictly convex quadratic programs.

Solves

    min  1/2 p' H p + g' p    s.t.    C p <= d

with H symmetric positive definite, by the dual active-set strategy:
start at the unconstrained minimizer, repeatedly pick the most violated
constraint and take the minimum H-metric step that activates it,
dropping active constraints whose multipliers would cross zero on the
way.  Every intermediate point is optimal for its active subset, no
phase-1 problem is needed, and primal infeasibility is detected exactly
(the primal step direction vanishes while no multiplier blocks).

The factorizations are refreshed from scratch on every active-set
change: problem sizes here (~100 variables, a few hundred constraints)
make incremental updates an unnecessary complication.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular


@dataclass
class QpSolution:
    status: str  # "optimal" | "infeasible" | "iteration-limit"
    p: np.ndarray
    multipliers: np.ndarray
    iterations: int


def solve_qp(hess, grad, c_mat=None, c_rhs=None, *, feas_tol=1e-10, max_updates=None) -> QpSolution:
    """Minimize 1/2 p'Hp + g'p subject to C p <= d.

    Returns the minimizer together with the KKT multipliers of the
    inequality rows (zero for inactive rows).  H must be positive
    definite; np.linalg.LinAlgError propagates if it is not.
    """
    g = np.asarray(grad, dtype=float)
    n = g.size
    hess = np.asarray(hess, dtype=float)
    lower = np.linalg.cholesky(hess)
    p = -cho_solve((lower, True), g)

    if c_mat is None or np.size(c_mat) == 0:
        return QpSolution("optimal", p, np.zeros(0), 0)

    c_full = np.asarray(c_mat, dtype=float)
    d_full = np.asarray(c_rhs, dtype=float)
    m = c_full.shape[0]
    norms = np.linalg.norm(c_full, axis=1)
    usable = norms > 0.0
    # a zero row is vacuous unless its right-hand side is negative
    if np.any(~usable & (d_full < -feas_tol)):
        return QpSolution("infeasible", p, np.zeros(m), 0)
    scale = np.where(usable, norms, 1.0)
    cn = c_full / scale[:, None]
    dn = d_full / scale

    lam = np.zeros(m)  # multipliers in the row-normalized metric
    active: list[int] = []
    q1 = np.empty((n, 0))
    rfac = np.empty((0, 0))

    def refactor():
        nonlocal q1, rfac
        if active:
            bmat = solve_triangular(lower, -cn[active].T, lower=True)
            q1, rfac = np.linalg.qr(bmat, mode="reduced")
        else:
            q1 = np.empty((n, 0))
            rfac = np.empty((0, 0))

    if max_updates is None:
        max_updates = 50 * (m + n) + 200

    def result(status):
        mult = np.where(usable, lam / scale, 0.0)
        return QpSolution(status, p, mult, updates)

    updates = 0
    while True:
        viol = cn @ p - dn
        viol[~usable] = -np.inf
        s = int(np.argmax(viol))
        if viol[s] <= feas_tol:
            return result("optimal")
        ns = -cn[s]  # normal in >= orientation
        bs = -dn[s]
        lam_s = 0.0
        while True:
            updates += 1
            if updates > max_updates:
                return result("iteration-limit")
            w = solve_triangular(lower, ns, lower=True)
            if active:
                u1 = q1.T @ w
                z = solve_triangular(lower.T, w - q1 @ u1, lower=False)
                rvec = solve_triangular(rfac, u1, lower=False)
            else:
                z = solve_triangular(lower.T, w, lower=False)
                rvec = np.zeros(0)
            denom = ns @ z

            t_dual = np.inf
            k_drop = -1
            for j, idx in enumerate(active):
                if rvec[j] > 1e-12:
                    cand = lam[idx] / rvec[j]
                    if cand < t_dual:
                        t_dual = cand
                        k_drop = j

            if denom <= 1e-12 * max(w @ w, 1e-300):
                # s is linearly dependent on the active normals
                if not np.isfinite(t_dual):
                    return result("infeasible")
                if active:
                    lam[active] -= t_dual * rvec
                lam_s += t_dual
                dropped = active.pop(k_drop)
                lam[dropped] = 0.0
                refactor()
                continue

            t_full = (bs - ns @ p) / denom
            t = min(t_dual, t_full)
            p = p + t * z
            if active:
                lam[active] -= t * rvec
            lam_s += t
            if t_full <= t_dual:
                active.append(s)
                lam[s] = lam_s
                refactor()
                break
            dropped = active.pop(k_drop)
            lam[dropped] = 0.0
            refactor()


def solve_qp_elastic(hess, grad, c_mat, c_rhs, relax_mask, *, penalty, curvature=None,
                     feas_tol=1e-10) -> QpSolution:
    """Solve the QP with the rows marked in ``relax_mask`` jointly relaxed.

    A single slack e >= 0 is added: relaxable rows become C_i p - e <= d_i
    and the objective gains penalty * e + (curvature/2) * e^2, keeping the
    problem strictly convex and always feasible.  The returned solution is
    restricted to the original variables and rows.
    """
    g = np.asarray(grad, dtype=float)
    n = g.size
    c_full = np.asarray(c_mat, dtype=float)
    d_full = np.asarray(c_rhs, dtype=float)
    m = c_full.shape[0]
    if curvature is None:
        curvature = 1e-6 * max(1.0, np.trace(hess) / n)

    h_ext = np.zeros((n + 1, n + 1))
    h_ext[:n, :n] = hess
    h_ext[n, n] = curvature
    g_ext = np.concatenate([g, [penalty]])
    c_ext = np.zeros((m + 1, n + 1))
    c_ext[:m, :n] = c_full
    c_ext[:m, n] = np.where(relax_mask, -1.0, 0.0)
    c_ext[m, n] = -1.0  # e >= 0
    d_ext = np.concatenate([d_full, [0.0]])

    sol = solve_qp(h_ext, g_ext, c_ext, d_ext, feas_tol=feas_tol)
    return QpSolution(sol.status, sol.p[:n], sol.multipliers[:m], sol.iterations)
