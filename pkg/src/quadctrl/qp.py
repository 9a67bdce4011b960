"""Dense convex QP solvers behind a pluggable interface.

Problems have the form

    min 0.5 x'Px + q'x   s.t.  Ax = b,  Gx <= h

with P symmetric positive (semi)definite. Two methods are provided and share
the interface used by the MPC, the whole-body controller and the benchmark
harness: a primal-dual interior-point method ("ipm") and an active-set method
("active_set"). Both are deterministic: identical inputs produce identical
iterates and solutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SolverFailure(Exception):
    """QP solver did not reach the requested accuracy."""


@dataclass
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    A: np.ndarray = None  # equalities Ax = b
    b: np.ndarray = None
    G: np.ndarray = None  # inequalities Gx <= h
    h: np.ndarray = None

    def __post_init__(self):
        n = self.q.shape[0]
        if self.A is None:
            self.A = np.zeros((0, n))
            self.b = np.zeros(0)
        if self.G is None:
            self.G = np.zeros((0, n))
            self.h = np.zeros(0)

    @property
    def n(self):
        return self.q.shape[0]

    def objective(self, x):
        return 0.5 * x @ self.P @ x + self.q @ x


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray          # equality multipliers
    z: np.ndarray          # inequality multipliers (>= 0)
    iterations: int
    objective: float
    active_set: tuple = field(default_factory=tuple)


def kkt_residual(prob: QpProblem, sol: QpSolution) -> float:
    """Max-norm KKT residual: stationarity, primal feasibility, complementarity."""
    r_d = prob.P @ sol.x + prob.q
    if prob.A.shape[0]:
        r_d = r_d + prob.A.T @ sol.y
    if prob.G.shape[0]:
        r_d = r_d + prob.G.T @ sol.z
    res = float(np.max(np.abs(r_d))) if r_d.size else 0.0
    if prob.A.shape[0]:
        res = max(res, float(np.max(np.abs(prob.A @ sol.x - prob.b))))
    if prob.G.shape[0]:
        slack = prob.G @ sol.x - prob.h
        res = max(res, float(np.max(np.maximum(slack, 0.0))))
        res = max(res, float(np.max(np.abs(sol.z * slack))))
    return res


def constraint_violation(prob: QpProblem, x: np.ndarray) -> float:
    v = 0.0
    if prob.A.shape[0]:
        v = float(np.max(np.abs(prob.A @ x - prob.b)))
    if prob.G.shape[0]:
        v = max(v, float(np.max(np.maximum(prob.G @ x - prob.h, 0.0))))
    return v


def _solve_eqp(P, q, C, d):
    """Equality-constrained QP via the dense KKT system. Returns (x, lam)."""
    n = P.shape[0]
    m = C.shape[0]
    K = np.zeros((n + m, n + m))
    K[:n, :n] = P
    if m:
        K[:n, n:] = C.T
        K[n:, :n] = C
    rhs = np.concatenate([-q, d])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def solve_active_set(prob: QpProblem, warm_active: tuple = (),
                     max_iter: int = 400, tol: float = 1e-10) -> QpSolution:
    """Active-set method: iterate equality-constrained subproblems.

    Starts from the equality-constrained optimum (optionally seeded with a
    warm active set), adds the most violated inequality, and drops constraints
    whose multiplier turns negative. Requires P positive definite on the null
    space of the active constraints; our problem builders regularize
    accordingly.
    """
    n = prob.n
    me = prob.A.shape[0]
    mi = prob.G.shape[0]
    scale = max(1.0, float(np.max(np.abs(prob.P))))
    active = [i for i in warm_active if 0 <= i < mi]
    seen = set()

    for it in range(max_iter):
        key = frozenset(active)
        if key in seen:
            raise SolverFailure("active-set method cycled (infeasible or "
                                "degenerate problem)")
        seen.add(key)
        C = np.vstack([prob.A, prob.G[active]]) if (me or active) else \
            np.zeros((0, n))
        d = np.concatenate([prob.b, prob.h[active]])
        x, lam = _solve_eqp(prob.P, prob.q, C, d)
        # verify the KKT solve actually holds (guards against a rank-deficient
        # active set silently producing garbage)
        if C.shape[0]:
            kkt_err = max(
                float(np.max(np.abs(prob.P @ x + prob.q + C.T @ lam))),
                float(np.max(np.abs(C @ x - d))))
        else:
            kkt_err = float(np.max(np.abs(prob.P @ x + prob.q))) if n else 0.0
        if not np.isfinite(kkt_err) or kkt_err > 1e-6 * scale:
            # the newest constraint is linearly dependent on the active set:
            # drop the active inequality most aligned with it instead of the
            # newcomer, otherwise add/drop ping-pongs on degenerate vertices
            if active:
                j_new = active[-1]
                rest = active[:-1]
                C_rest = np.vstack([prob.A, prob.G[rest]]) if (me or rest) \
                    else np.zeros((0, n))
                coef, *_ = np.linalg.lstsq(C_rest.T, prob.G[j_new],
                                           rcond=None)
                w = coef[me:]
                if w.size and np.max(w) > tol:
                    active.pop(int(np.argmax(w)))
                else:
                    active.pop()
                continue
            raise SolverFailure("singular KKT system in active-set method")
        lam_ineq = lam[me:]
        # drop the most negative multiplier, if any
        if lam_ineq.size:
            k = int(np.argmin(lam_ineq))
            if lam_ineq[k] < -tol * scale:
                active.pop(k)
                continue
        # otherwise add the most violated inequality
        if mi:
            slack = prob.G @ x - prob.h
            slack[active] = -np.inf
            j = int(np.argmax(slack))
            if slack[j] > tol * max(1.0, float(np.max(np.abs(prob.h)))):
                active.append(j)
                continue
        z = np.zeros(mi)
        for idx, a in enumerate(active):
            z[a] = max(lam_ineq[idx], 0.0)
        return QpSolution(x=x, y=lam[:me], z=z, iterations=it + 1,
                          objective=prob.objective(x),
                          active_set=tuple(sorted(active)))
    raise SolverFailure(f"active-set method exceeded {max_iter} iterations")


def solve_ipm(prob: QpProblem, warm_active: tuple = (), max_iter: int = 60,
              tol: float = 1e-10) -> QpSolution:
    """Mehrotra-style predictor-corrector primal-dual interior-point method."""
    n = prob.n
    me = prob.A.shape[0]
    mi = prob.G.shape[0]
    if mi == 0:
        x, lam = _solve_eqp(prob.P, prob.q, prob.A, prob.b)
        return QpSolution(x=x, y=lam, z=np.zeros(0), iterations=1,
                          objective=prob.objective(x))
    P, q, A, b, G, h = prob.P, prob.q, prob.A, prob.b, prob.G, prob.h
    # start from the equality-constrained optimum with matched slacks so the
    # first Newton steps are not blocked by wildly inconsistent residuals
    x, y0 = _solve_eqp(P, q, A, b)
    if not np.all(np.isfinite(x)):
        x = np.zeros(n)
        y0 = np.zeros(me)
    y = y0
    s = np.maximum(h - G @ x, 1.0)
    z = np.ones(mi)
    scale = max(1.0, float(np.max(np.abs(P))), float(np.max(np.abs(q))))

    def residuals(x, y, s, z):
        r_d = P @ x + q + G.T @ z
        if me:
            r_d = r_d + A.T @ y
        r_p = A @ x - b if me else np.zeros(0)
        r_g = G @ x + s - h
        return r_d, r_p, r_g

    for it in range(max_iter):
        r_d, r_p, r_g = residuals(x, y, s, z)
        mu = float(s @ z) / mi
        err = max(float(np.max(np.abs(r_d))),
                  float(np.max(np.abs(r_p))) if me else 0.0,
                  float(np.max(np.abs(r_g))), mu)
        if err < tol * scale:
            return QpSolution(x=x, y=y, z=z, iterations=it,
                              objective=prob.objective(x))
        W = z / s  # diagonal scaling
        Pbar = P + G.T @ (W[:, None] * G)
        K = np.zeros((n + me, n + me))
        K[:n, :n] = Pbar
        if me:
            K[:n, n:] = A.T
            K[n:, :n] = A

        def newton(rd, rp, rg, rs):
            # eliminate ds, dz; rs is the complementarity target S z - sigma mu
            rhs_x = -(rd + G.T @ (W * rg) - G.T @ (rs / s))
            rhs = np.concatenate([rhs_x, -rp])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError as e:
                raise SolverFailure(f"singular IPM KKT system: {e}")
            dx = sol[:n]
            dy = sol[n:]
            dz = W * (G @ dx + rg) - rs / s
            ds = -(rs + s * dz) / z
            return dx, dy, ds, dz

        # affine (predictor) direction
        rs_aff = s * z
        dxa, dya, dsa, dza = newton(r_d, r_p, r_g, rs_aff)
        alpha_p = _max_step(s, dsa)
        alpha_d = _max_step(z, dza)
        mu_aff = float((s + alpha_p * dsa) @ (z + alpha_d * dza)) / mi
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # corrector
        rs = s * z + dsa * dza - sigma * mu
        dx, dy, ds, dz = newton(r_d, r_p, r_g, rs)
        alpha = 0.99 * min(_max_step(s, ds), _max_step(z, dz))
        x = x + alpha * dx
        y = y + alpha * dy
        s = s + alpha * ds
        z = z + alpha * dz
    r_d, r_p, r_g = residuals(x, y, s, z)
    err = max(float(np.max(np.abs(r_d))),
              float(np.max(np.abs(r_p))) if me else 0.0,
              float(np.max(np.abs(r_g))), float(s @ z) / mi)
    if err < 1e-7 * scale:
        return QpSolution(x=x, y=y, z=z, iterations=max_iter,
                          objective=prob.objective(x))
    raise SolverFailure(
        f"IPM did not converge in {max_iter} iterations (residual {err:.2e})")


def _max_step(v, dv):
    """Largest alpha in (0,1] keeping v + alpha*dv >= 0."""
    alpha = 1.0
    for i in range(v.shape[0]):
        if dv[i] < 0:
            a = -v[i] / dv[i]
            if a < alpha:
                alpha = a
    return alpha


SOLVERS = {
    "ipm": solve_ipm,
    "active_set": solve_active_set,
}


def get_solver(name: str):
    try:
        return SOLVERS[name]
    except KeyError:
        raise KeyError(
            f"unknown QP solver '{name}'; available: {sorted(SOLVERS)}")
