"""Convex model-predictive control on single-rigid-body dynamics.

The body is modeled as one rigid mass with yaw-linearized attitude dynamics;
stance-foot forces over the horizon are the decision variables of a condensed
QP. Swing feet are excluded from the variable set, so their forces are zero
by construction.

State layout (13): [roll, pitch, yaw, p(3), omega_w(3), v_w(3), gravity].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import qp
from .gait import ContactPlan


class InfeasibleReference(Exception):
    """Contact plan cannot support the requested tracking objective."""


@dataclass
class MpcConfig:
    horizon: int = 10
    dt: float = 0.025
    solver: str = "ipm"
    fz_min: float = 1.0
    fz_max: float = 500.0
    force_reg: float = 1e-6
    weights: np.ndarray = field(default_factory=lambda: np.array(
        [150.0, 150.0, 80.0,      # roll, pitch, yaw
         0.0, 0.0, 600.0,         # x, y, z (velocity-tracked laterally)
         4.0, 4.0, 2.0,           # omega
         15.0, 15.0, 40.0,        # v
         0.0]))                   # gravity state


@dataclass
class SrbdParams:
    """Rigid-body parameters taken from the current model snapshot."""
    mass: float
    inertia_body: np.ndarray   # (3,3) about the COM, base frame
    mu: float
    gravity: float = 9.81


@dataclass
class MpcProblem:
    qp_problem: qp.QpProblem
    var_map: list            # per step: list of (leg, offset) pairs
    A_qp: np.ndarray
    B_qp: np.ndarray
    x0: np.ndarray
    horizon: int


@dataclass
class MpcSolution:
    forces: np.ndarray        # (N,4,3) world frame, zeros for swing feet
    states: np.ndarray        # (N,13) predicted trajectory
    objective: float
    iterations: int
    solve_info: dict = field(default_factory=dict)


def _rz(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def srbd_matrices(params: SrbdParams, yaw: float, r_feet, dt: float):
    """Exact ZOH discretization of the yaw-linearized SRBD model.

    r_feet: list of (leg, lever arm from COM, world frame). The continuous
    A is nilpotent (A^3 = 0), so the matrix exponential truncates exactly.
    """
    n_f = len(r_feet)
    A = np.zeros((13, 13))
    Rz = _rz(yaw)
    A[0:3, 6:9] = Rz.T
    A[3:6, 9:12] = np.eye(3)
    A[11, 12] = -params.gravity
    B = np.zeros((13, 3 * n_f))
    Iw = Rz @ params.inertia_body @ Rz.T
    Iw_inv = np.linalg.inv(Iw)
    for j, (_, r) in enumerate(r_feet):
        rx = np.array([[0, -r[2], r[1]], [r[2], 0, -r[0]],
                       [-r[1], r[0], 0.0]])
        B[6:9, 3 * j:3 * j + 3] = Iw_inv @ rx
        B[9:12, 3 * j:3 * j + 3] = np.eye(3) / params.mass
    A2 = A @ A
    Ad = np.eye(13) + A * dt + A2 * (dt * dt / 2.0)
    Bd = (np.eye(13) * dt + A * (dt * dt / 2.0) + A2 * (dt ** 3 / 6.0)) @ B
    return Ad, Bd


def reference_trajectory(plan: ContactPlan, com_height: float) -> np.ndarray:
    """Per-step reference states from the contact plan's base references."""
    N = plan.contact.shape[0]
    X = np.zeros((N, 13))
    for k in range(N):
        X[k, 2] = plan.base_yaw[k]
        X[k, 3:5] = plan.base_pos[k, 0:2]
        X[k, 5] = com_height
        X[k, 8] = plan.yaw_rate[k]
        X[k, 9:12] = plan.base_vel[k]
        X[k, 12] = 1.0
    return X


def build_qp(params: SrbdParams, plan: ContactPlan, x0: np.ndarray,
             foot_pos_w: np.ndarray, x_ref: np.ndarray,
             cfg: MpcConfig = None) -> MpcProblem:
    """Condensed force QP over the horizon.

    foot_pos_w holds the world foot positions used for the lever arms; feet
    that are in swing at step k carry no decision variables at that step.
    """
    cfg = cfg or MpcConfig()
    N = plan.contact.shape[0]
    L = np.asarray(cfg.weights, dtype=float)
    tracking = np.any(L[:12] > 0)
    var_map = []
    n_u = 0
    for k in range(N):
        stance = [leg for leg in range(4) if plan.contact[k, leg]]
        if not stance and tracking:
            raise InfeasibleReference(
                f"horizon step {k} has no stance feet but tracking weights "
                "are nonzero")
        var_map.append([(leg, n_u + 3 * i) for i, leg in enumerate(stance)])
        n_u += 3 * len(stance)

    A_qp = np.zeros((13 * N, 13))
    B_qp = np.zeros((13 * N, n_u))
    A_running = np.eye(13)
    for k in range(N):
        r_feet = [(leg, foot_pos_w[leg] - x_ref[k, 3:6])
                  for leg, _ in var_map[k]]
        Ad, Bd = srbd_matrices(params, x_ref[k, 2], r_feet, plan.dt)
        if k == 0:
            A_running = Ad
            if r_feet:
                B_qp[0:13, var_map[k][0][1]:var_map[k][0][1]
                     + 3 * len(r_feet)] = Bd
        else:
            A_running = Ad @ A_running
            B_qp[13 * k:13 * (k + 1), :] = Ad @ B_qp[13 * (k - 1):13 * k, :]
            if r_feet:
                off = var_map[k][0][1]
                B_qp[13 * k:13 * (k + 1), off:off + 3 * len(r_feet)] = Bd
        A_qp[13 * k:13 * (k + 1), :] = A_running

    Lbar = np.tile(L, N)
    P = 2.0 * (B_qp.T * Lbar) @ B_qp
    P[np.diag_indices_from(P)] += 2.0 * cfg.force_reg
    resid = A_qp @ x0 - x_ref.reshape(-1)
    q = 2.0 * B_qp.T @ (Lbar * resid)

    mu = params.mu
    rows = []
    rhs = []
    for k in range(N):
        for leg, off in var_map[k]:
            for a, b in ((1, -mu), (-1, -mu)):
                row = np.zeros(n_u)
                row[off] = a
                row[off + 2] = b
                rows.append(row)
                rhs.append(0.0)
                row = np.zeros(n_u)
                row[off + 1] = a
                row[off + 2] = b
                rows.append(row)
                rhs.append(0.0)
            row = np.zeros(n_u)
            row[off + 2] = -1.0
            rows.append(row)
            rhs.append(-cfg.fz_min)
            row = np.zeros(n_u)
            row[off + 2] = 1.0
            rows.append(row)
            rhs.append(cfg.fz_max)
    G = np.vstack(rows) if rows else None
    h = np.array(rhs) if rows else None
    problem = qp.QpProblem(P=0.5 * (P + P.T), q=q, G=G, h=h)
    return MpcProblem(qp_problem=problem, var_map=var_map, A_qp=A_qp,
                      B_qp=B_qp, x0=x0, horizon=N)


def solve(problem: MpcProblem, cfg: MpcConfig = None,
          warm_active: tuple = ()) -> MpcSolution:
    """Solve the condensed QP and unpack per-leg forces and predicted states."""
    cfg = cfg or MpcConfig()
    solver = qp.get_solver(cfg.solver)
    sol = solver(problem.qp_problem, warm_active=warm_active)
    N = problem.horizon
    forces = np.zeros((N, 4, 3))
    for k in range(N):
        for leg, off in problem.var_map[k]:
            forces[k, leg] = sol.x[off:off + 3]
    states = (problem.A_qp @ problem.x0
              + problem.B_qp @ sol.x).reshape(N, 13)
    return MpcSolution(forces=forces, states=states,
                       objective=sol.objective, iterations=sol.iterations,
                       solve_info={"active_set": sol.active_set})
