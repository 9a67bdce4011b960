"""Whole-body control: task-space QP over accelerations, torques and forces.

Solves for (qdd, tau, contact forces) minimizing weighted task-acceleration
and contact-force tracking errors subject to the full floating-base dynamics,
stationary stance feet, torque limits and a component-wise friction pyramid.
Two formulations share the interface: "full" keeps tau as variables,
"reduced" eliminates it through the actuated dynamics rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import qp
from ._kernels import so3_log

NV = 18
NJ = 12


class WbcInfeasible(Exception):
    """QP infeasible; carries the most violated constraint label."""

    def __init__(self, msg, worst_constraint=None, violation=0.0):
        super().__init__(msg)
        self.worst_constraint = worst_constraint
        self.violation = violation


@dataclass
class WbcConfig:
    form: str = "full"            # "full" or "reduced"
    solver: str = "active_set"
    fz_min: float = 1.0           # N; closes the open f_z > 0 constraint
    fz_max: float = 600.0
    force_weight: float = 0.5
    reg: float = 1e-6             # strict-convexity regularization
    kp_base: float = 100.0
    kd_base: float = 20.0
    kp_foot: float = 400.0
    kd_foot: float = 40.0


@dataclass
class TaskSpec:
    """One motion task: J qdd + jdot_u should track vdot_des."""
    name: str
    J: np.ndarray          # (m, 18)
    jdot_u: np.ndarray     # (m,)
    vdot_des: np.ndarray   # (m,)
    weight: np.ndarray     # (m,) nonnegative


@dataclass
class ContactSpec:
    leg: int
    J: np.ndarray          # (3, 18) world-frame foot Jacobian
    jdot_u: np.ndarray     # (3,)
    f_des: np.ndarray      # (3,) desired force from the MPC, world frame
    constrain: bool = True # False: keep the force but drop the zero-motion
                           # rows (near-singular leg fallback)


@dataclass
class ControlSolution:
    qdd: np.ndarray        # (18,)
    tau: np.ndarray        # (12,)
    forces: dict           # leg -> (3,) world frame
    objective: float
    iterations: int
    active_set: tuple = ()
    soft_contact: bool = False


def pose_error(R_ref: np.ndarray, p_ref: np.ndarray, R: np.ndarray,
               p: np.ndarray) -> np.ndarray:
    """6D pose error [rotation log; position difference], world frame."""
    e_rot = so3_log(R_ref @ R.T)
    return np.concatenate([e_rot, p_ref - p])


def pd_task_acceleration(kp, kd, err_pose, twist_ref, twist,
                         acc_ref=None) -> np.ndarray:
    """Reference acceleration plus PD feedback on pose and twist errors."""
    err_pose = np.asarray(err_pose, dtype=float)
    acc = np.zeros_like(err_pose) if acc_ref is None else np.asarray(
        acc_ref, dtype=float)
    return acc + np.asarray(kd) * (np.asarray(twist_ref) - np.asarray(twist)) \
        + np.asarray(kp) * err_pose


def _friction_rows(n, off, mu, fz_min, fz_max):
    rows, rhs, labels = [], [], []
    for axis, sign in ((0, 1), (0, -1), (1, 1), (1, -1)):
        row = np.zeros(n)
        row[off + axis] = sign
        row[off + 2] = -mu
        rows.append(row)
        rhs.append(0.0)
        labels.append(f"friction[{'xy'[axis]}{'+' if sign > 0 else '-'}]")
    row = np.zeros(n)
    row[off + 2] = -1.0
    rows.append(row)
    rhs.append(-fz_min)
    labels.append("fz_min")
    row = np.zeros(n)
    row[off + 2] = 1.0
    rows.append(row)
    rhs.append(fz_max)
    labels.append("fz_max")
    return rows, rhs, labels


def build_wbc_qp(H, h, tasks, contacts, tau_min, tau_max, mu,
                 cfg: WbcConfig):
    """Assemble the QP for either formulation. Returns (problem, meta)."""
    k = len(contacts)
    Jc = np.vstack([c.J for c in contacts]) if k else np.zeros((0, NV))
    held = [c for c in contacts if c.constrain]
    Jc_held = np.vstack([c.J for c in held]) if held else np.zeros((0, NV))
    jdot = np.concatenate([c.jdot_u for c in held]) if held else np.zeros(0)

    labels = []
    if cfg.form == "full":
        n = NV + NJ + 3 * k
        f_off = NV + NJ

        def cost_J(task):
            Jz = np.zeros((task.J.shape[0], n))
            Jz[:, :NV] = task.J
            return Jz

        # dynamics: H qdd - S^T tau - Jc^T f = -h
        A_dyn = np.zeros((NV, n))
        A_dyn[:, :NV] = H
        A_dyn[6:, NV:NV + NJ] -= np.eye(NJ)
        if k:
            A_dyn[:, f_off:] = -Jc.T
        b_dyn = -h
        A_con = np.zeros((Jc_held.shape[0], n))
        if held:
            A_con[:, :NV] = Jc_held
        b_con = -jdot
        A = np.vstack([A_dyn, A_con])
        b = np.concatenate([b_dyn, b_con])

        rows, rhs = [], []
        for j in range(NJ):
            row = np.zeros(n)
            row[NV + j] = 1.0
            rows.append(row)
            rhs.append(tau_max[j])
            labels.append(f"tau_max[{j}]")
            row = np.zeros(n)
            row[NV + j] = -1.0
            rows.append(row)
            rhs.append(-tau_min[j])
            labels.append(f"tau_min[{j}]")
    else:  # reduced: variables (qdd, f); tau eliminated via actuated rows
        n = NV + 3 * k
        f_off = NV

        def cost_J(task):
            Jz = np.zeros((task.J.shape[0], n))
            Jz[:, :NV] = task.J
            return Jz

        A_dyn = np.zeros((6, n))
        A_dyn[:, :NV] = H[0:6, :]
        if k:
            A_dyn[:, f_off:] = -Jc.T[0:6, :]
        b_dyn = -h[0:6]
        A_con = np.zeros((Jc_held.shape[0], n))
        if held:
            A_con[:, :NV] = Jc_held
        b_con = -jdot
        A = np.vstack([A_dyn, A_con])
        b = np.concatenate([b_dyn, b_con])

        # tau(z) = H[6:] qdd + h[6:] - (Jc^T f)[6:]
        T_mat = np.zeros((NJ, n))
        T_mat[:, :NV] = H[6:, :]
        if k:
            T_mat[:, f_off:] = -Jc.T[6:, :]
        rows, rhs = [], []
        for j in range(NJ):
            rows.append(T_mat[j].copy())
            rhs.append(tau_max[j] - h[6 + j])
            labels.append(f"tau_max[{j}]")
            rows.append(-T_mat[j])
            rhs.append(-(tau_min[j] - h[6 + j]))
            labels.append(f"tau_min[{j}]")

    for i, c in enumerate(contacts):
        fr, fh, fl = _friction_rows(n, f_off + 3 * i, mu, cfg.fz_min,
                                    cfg.fz_max)
        rows.extend(fr)
        rhs.extend(fh)
        labels.extend(f"leg{c.leg}.{lab}" for lab in fl)

    P = np.zeros((n, n))
    q = np.zeros(n)
    for task in tasks:
        Jz = cost_J(task)
        W = np.asarray(task.weight, dtype=float)
        P += 2.0 * (Jz.T * W) @ Jz
        q += 2.0 * Jz.T @ (W * (task.jdot_u - task.vdot_des))
    for i, c in enumerate(contacts):
        off = f_off + 3 * i
        for a in range(3):
            P[off + a, off + a] += 2.0 * cfg.force_weight
            q[off + a] -= 2.0 * cfg.force_weight * c.f_des[a]
    P[np.diag_indices_from(P)] += 2.0 * cfg.reg

    problem = qp.QpProblem(P=P, q=q, A=A, b=b,
                           G=np.vstack(rows) if rows else None,
                           h=np.array(rhs) if rows else None)
    return problem, {"labels": labels, "f_off": f_off, "n": n, "Jc": Jc}


def solve_wbc(H, h, tasks, contacts, tau_min, tau_max, mu,
              cfg: WbcConfig = None, warm_active: tuple = ()) \
        -> ControlSolution:
    """Solve the whole-body QP; raises WbcInfeasible with diagnostics."""
    cfg = cfg or WbcConfig()
    problem, meta = build_wbc_qp(H, h, tasks, contacts, tau_min, tau_max,
                                 mu, cfg)
    solver = qp.get_solver(cfg.solver)
    soft = False
    try:
        sol = solver(problem, warm_active=warm_active)
    except qp.SolverFailure:
        # degenerate vertices occasionally defeat one method; the other
        # solver behind the same interface is the deterministic fallback
        fallback = "ipm" if cfg.solver != "ipm" else "active_set"
        try:
            sol = qp.get_solver(fallback)(problem)
        except qp.SolverFailure:
            # genuinely infeasible (extreme joint speeds make zero foot
            # acceleration unreachable within torque limits): retry with the
            # stationarity rows as stiff costs instead of hard constraints
            soft = True
            soft_contacts = [ContactSpec(c.leg, c.J, c.jdot_u, c.f_des,
                                         constrain=False) for c in contacts]
            soft_tasks = list(tasks) + [
                TaskSpec(f"contact{c.leg}", c.J, c.jdot_u, np.zeros(3),
                         np.full(3, 1e3)) for c in contacts if c.constrain]
            problem, meta = build_wbc_qp(H, h, soft_tasks, soft_contacts,
                                         tau_min, tau_max, mu, cfg)
            try:
                sol = qp.get_solver("ipm")(problem)
            except qp.SolverFailure as e:
                raise WbcInfeasible(str(e)) from e
    z = sol.x
    qdd = z[:NV]
    k = len(contacts)
    f_off = meta["f_off"]
    forces = {c.leg: z[f_off + 3 * i:f_off + 3 * i + 3].copy()
              for i, c in enumerate(contacts)}
    if cfg.form == "full":
        tau = z[NV:NV + NJ].copy()
    else:
        tau = H[6:, :] @ qdd + h[6:]
        if k:
            tau -= meta["Jc"].T[6:, :] @ z[f_off:]
    viol = qp.constraint_violation(problem, z)
    if viol > 1e-6:
        slack = problem.G @ z - problem.h
        worst = int(np.argmax(slack))
        raise WbcInfeasible("constraint violation at optimum",
                            worst_constraint=meta["labels"][worst],
                            violation=float(slack[worst]))
    return ControlSolution(qdd=qdd, tau=tau, forces=forces,
                           objective=sol.objective,
                           iterations=sol.iterations,
                           active_set=sol.active_set, soft_contact=soft)
