"""Closed-loop orchestration: plant, estimator and controller on one clock.

All loops run on a deterministic simulated-time grid derived from the physics
control tick (2 kHz): IMU/filter propagation at 500 Hz, whole-body control
and leg-state estimation at 400 Hz, adaptation at 100 Hz, MPC at 40 Hz.
Module selections (gait type, adaptation on/off, contact sourcing, WBC form)
are plain config switches, mirroring runtime-swappable sub-components.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import adapt as adaptmod
from . import estimate as estmod
from . import gait as gaitmod
from . import model as modelmod
from . import mpc as mpcmod
from . import swing as swingmod
from . import wbc as wbcmod
from .sim import (FallDetector, PayloadEvent, Plant, RunMetrics, Terrain,
                  compute_metrics)

CONTROL_DT = 5e-4          # 2 kHz base tick
IMU_DIV = 4                # 500 Hz
WBC_DIV = 5                # 400 Hz
ADAPT_DIV = 20             # 100 Hz
MPC_DIV = 50               # 40 Hz
LOG_DIV = 20               # 100 Hz channel log


@dataclass
class VelocitySegment:
    t_start: float
    vx: float
    vy: float = 0.0
    yaw_rate: float = 0.0


@dataclass
class RunConfig:
    robot: str = "go2_like"
    seed: int = 0
    duration: float = 10.0
    gait_type: str = "ags"              # "ags" or "sgs"
    adapt_enabled: bool = True
    use_pressure: bool = True
    wbc_form: str = "reduced"
    wbc_solver: str = "active_set"
    mpc_solver: str = "ipm"
    mpc_horizon: int = 10
    terrain: str = "flat"               # "flat", "rough", "slope:<deg>"
    terrain_amplitude: float = 0.03
    terrain_correlation: float = 0.25
    terrain_mu: float = 0.6
    timeline: list = field(default_factory=lambda: [VelocitySegment(0.0, 0.0)])
    payloads: list = field(default_factory=list)
    abort_on_fall: bool = False
    perfect_estimator: bool = False  # debugging: feed ground truth to control
    t_swing: float = gaitmod.T_SWING_DEFAULT
    sgs_duty: float = gaitmod.SGS_DUTY
    sgs_period: float = gaitmod.SGS_PERIOD
    step_height: float = 0.06
    k_step: float = 0.03
    press_depth: float = 0.008  # m, swing targets end below the ground estimate
    kp_base: tuple = (150.0, 150.0, 100.0, 20.0, 20.0, 120.0)
    kd_base: tuple = (25.0, 25.0, 20.0, 18.0, 18.0, 22.0)
    kp_foot: float = 300.0
    kd_foot: float = 35.0
    base_weight: tuple = (10.0, 10.0, 5.0, 5.0, 5.0, 15.0)
    foot_weight: float = 15.0
    force_weight: float = 5.0
    fz_min: float = 1.0
    cmd_slew: float = 0.8       # m/s^2 command ramp limit
    joint_reg_weight: float = 0.05
    joint_damping: float = 2.0


def make_terrain(cfg: RunConfig) -> Terrain:
    if cfg.terrain == "flat":
        return Terrain.flat(mu=cfg.terrain_mu)
    if cfg.terrain == "rough":
        return Terrain.rough(seed=cfg.seed + 7919,
                             amplitude=cfg.terrain_amplitude,
                             correlation=cfg.terrain_correlation,
                             mu=cfg.terrain_mu)
    if cfg.terrain.startswith("slope:"):
        deg = float(cfg.terrain.split(":", 1)[1])
        return Terrain.slope(np.deg2rad(deg), mu=cfg.terrain_mu)
    raise ValueError(f"unknown terrain spec '{cfg.terrain}'")


def command_at(timeline, t) -> np.ndarray:
    """Piecewise-constant (vx, vy, yaw_rate) command, body frame."""
    vx = vy = wz = 0.0
    for seg in timeline:
        if t >= seg.t_start:
            vx, vy, wz = seg.vx, seg.vy, seg.yaw_rate
    return np.array([vx, vy, wz])


class ControllerStack:
    """Gait + swing + MPC + WBC + adaptation around one model snapshot."""

    def __init__(self, robot: modelmod.RobotModel, cfg: RunConfig):
        self.cfg = cfg
        self.nominal = robot
        self.snapshot = robot            # adapted model snapshot
        self.gait = gaitmod.GaitSequencer(
            mode=cfg.gait_type,
            cfg=gaitmod.AgsConfig(t_swing=cfg.t_swing),
            sgs_duty=cfg.sgs_duty, sgs_period=cfg.sgs_period)
        self.swing_cfg = swingmod.SwingConfig(step_height=cfg.step_height,
                                              k_step=cfg.k_step)
        self.wbc_cfg = wbcmod.WbcConfig(
            form=cfg.wbc_form, solver=cfg.wbc_solver, fz_min=cfg.fz_min,
            force_weight=cfg.force_weight)
        self.mpc_cfg = mpcmod.MpcConfig(horizon=cfg.mpc_horizon,
                                        solver=cfg.mpc_solver)
        self.adapt = adaptmod.AdaptationFilter(robot)
        self.trajs = [None] * 4
        self.prev_contact = np.ones(4, dtype=bool)
        self.mpc_solution = None
        self.mpc_failures = 0
        self.wbc_faults = 0
        self.last_tau = np.zeros(12)
        self._warm = ()
        self.yaw_ref = 0.0
        self.pos_ref = None
        self.ground_z = 0.0
        self.standing = True
        self.phase_snapshot = np.zeros(4)
        self.v_slew = np.zeros(3)

    def slew_command(self, v_cmd_body, dt):
        """Rate-limited velocity command actually tracked by the stack."""
        lim = self.cfg.cmd_slew * dt
        self.v_slew += np.clip(np.asarray(v_cmd_body) - self.v_slew,
                               -lim, lim)
        return self.v_slew.copy()

    # ---- helpers ---------------------------------------------------------
    def _stand_gate(self, v_cmd, v_est):
        cmd_slow = np.hypot(v_cmd[0], v_cmd[1]) < self.gait.cfg.v_stand
        est_slow = np.hypot(v_est[0], v_est[1]) < 3.0 * self.gait.cfg.v_stand
        return cmd_slow and est_slow

    def gait_step(self, dt, v_cmd_raw, est):
        """Advance the sequencer; the stand gate keys off the raw command so
        trot engages promptly, while the stride law sees the slewed one."""
        v_cmd_body = self.v_slew
        v_est_xy = est.v[0:2]
        if self._stand_gate(v_cmd_raw, v_est_xy):
            if not self.standing:
                self.standing = True
            self.gait.state = gaitmod.GaitState(
                phase=np.zeros(4), params=gaitmod.stand_params())
            if self.gait.mode == "ags":
                self.gait.standing = True
            return self.gait.state
        if self.standing:
            self.standing = False
            params = self.gait._sgs_params() if self.gait.mode == "sgs" \
                else gaitmod.ags_select_params(
                    max(np.hypot(*v_est_xy),
                        np.hypot(v_cmd_body[0], v_cmd_body[1])),
                    self.nominal.stance_height, self.gait.cfg)
            self.gait.state = gaitmod.GaitState(
                phase=self.gait.offsets.copy(), params=params)
            self.gait.standing = False
            self.gait.clock = float(self.gait.offsets[0] % 1.0)
            self.gait.v_filt = max(np.hypot(*v_est_xy),
                                   np.hypot(v_cmd_body[0], v_cmd_body[1]))
        # speed feeding the stride law: measured speed floored by the slewed
        # command, so the schedule never lags the speed actually tracked
        speed = max(np.hypot(*v_est_xy),
                    np.hypot(v_cmd_body[0], v_cmd_body[1]))
        return self.gait.step(dt, speed, self.nominal.stance_height)

    def update_mpc(self, est, v_cmd_raw):
        cfg = self.cfg
        snap = self.snapshot
        v_cmd_body = self.v_slew  # track the rate-limited command
        yaw = np.arctan2(est.R[1, 0], est.R[0, 0])
        com_w = est.p + est.R @ snap.com_offset
        state = self.gait.state
        plan = gaitmod.roll_out_contact_plan(
            state, cfg.mpc_horizon, self.mpc_cfg.dt, base_pos=com_w,
            base_yaw=yaw, vel_cmd=np.array([v_cmd_body[0], v_cmd_body[1],
                                            0.0]),
            yaw_rate=v_cmd_body[2])
        com_height = self.ground_z + self.nominal.stance_height \
            + snap.com_offset[2]
        x_ref = mpcmod.reference_trajectory(plan, com_height)
        roll = np.arctan2(est.R[2, 1], est.R[2, 2])
        pitch = -np.arcsin(np.clip(est.R[2, 0], -1.0, 1.0))
        omega_w = est.R @ est.omega_body
        x0 = np.concatenate([
            [roll, pitch, yaw], com_w, omega_w,
            est.v + est.R @ np.cross(est.omega_body, snap.com_offset),
            [1.0]])
        foot_pos = est.foot_pos_world.copy()
        # predicted footholds for legs currently in swing
        for leg in range(4):
            if not gaitmod.contact_state(state)[leg] \
                    and self.trajs[leg] is not None:
                foot_pos[leg] = self.trajs[leg].ctrl[6]
        params = mpcmod.SrbdParams(mass=snap.total_mass,
                                   inertia_body=snap.srbd_inertia,
                                   mu=self.nominal.mu,
                                   gravity=self.nominal.gravity)
        try:
            problem = mpcmod.build_qp(params, plan, x0, foot_pos, x_ref,
                                      self.mpc_cfg)
            self.mpc_solution = mpcmod.solve(problem, self.mpc_cfg)
        except (mpcmod.InfeasibleReference, Exception) as e:
            if isinstance(e, KeyboardInterrupt):
                raise
            self.mpc_failures += 1

    def control_step(self, t, dt, est, q, qd, v_cmd_raw,
                     detector_contact=None):
        cfg = self.cfg
        snap = self.snapshot
        v_cmd_body = self.slew_command(v_cmd_raw, dt)
        state = self.gait_step(dt, v_cmd_raw, est)
        contact = gaitmod.contact_state(state)
        self.phase_snapshot = state.phase.copy()
        duty = state.params.duty
        # early-touchdown promotion: a late-swing foot that already reports
        # ground force becomes stance now; keeping the swing task active
        # would scrape it across the ground
        for leg in range(4):
            if contact[leg]:
                continue
            s = (state.phase[leg] - duty) / max(1.0 - duty, 1e-9)
            if s >= 0.6 and detector_contact is not None \
                    and detector_contact[leg]:
                contact[leg] = True
        R, p_w = est.R, est.p
        yaw = np.arctan2(R[1, 0], R[0, 0])
        Rz = K.rot_z(yaw)
        v_cmd_w = Rz @ np.array([v_cmd_body[0], v_cmd_body[1], 0.0])

        # ground height from stance feet (low-passed); only feet with
        # confirmed ground force count, a late-landing foot still in the air
        # would bias the reference upward
        stance_feet = [leg for leg in range(4) if contact[leg]]
        loaded = [leg for leg in stance_feet
                  if detector_contact is None or detector_contact[leg]]
        if loaded:
            gz = float(np.mean(est.foot_pos_world[loaded, 2]))
            self.ground_z += 0.01 * (gz - self.ground_z)

        # reference pose integration with anti-windup leak to the estimate
        if self.pos_ref is None:
            self.pos_ref = p_w[0:2].copy()
        self.pos_ref = self.pos_ref + v_cmd_w[0:2] * dt
        self.pos_ref = np.clip(self.pos_ref, p_w[0:2] - 0.025,
                               p_w[0:2] + 0.025)
        self.yaw_ref += v_cmd_body[2] * dt
        err_yaw = (self.yaw_ref - yaw + np.pi) % (2 * np.pi) - np.pi
        self.yaw_ref = yaw + np.clip(err_yaw, -0.3, 0.3)
        z_ref = self.ground_z + self.nominal.stance_height

        # swing bookkeeping at the control rate
        duty = state.params.duty
        t_swing = state.params.t_swing if state.params.t_swing > 0 else 0.2
        u_est = np.concatenate([est.omega_body, R.T @ est.v, qd])
        for leg in range(4):
            if self.prev_contact[leg] and not contact[leg]:
                hip = self.nominal.hip_pos[leg] + self.nominal.abd_off[leg]
                target = swingmod.plan_foothold(
                    p_w, yaw, hip, est.v, v_cmd_w, duty * state.params.period,
                    terrain_height_fn=lambda x, y: self.ground_z
                    - cfg.press_depth,
                    cfg=self.swing_cfg)
                self.trajs[leg] = swingmod.make_trajectory(
                    est.foot_pos_world[leg], target, t, t + t_swing,
                    cfg.step_height)
            elif not contact[leg] and self.trajs[leg] is not None:
                s = (state.phase[leg] - duty) / max(1.0 - duty, 1e-9)
                if s < 0.5:
                    hip = self.nominal.hip_pos[leg] \
                        + self.nominal.abd_off[leg]
                    target = swingmod.plan_foothold(
                        p_w, yaw, hip, est.v, v_cmd_w,
                        duty * state.params.period,
                        terrain_height_fn=lambda x, y: self.ground_z
                        - cfg.press_depth,
                        cfg=self.swing_cfg)
                    self.trajs[leg] = swingmod.retarget(
                        self.trajs[leg], target, cfg.step_height)
            elif contact[leg]:
                self.trajs[leg] = None
        self.prev_contact = contact.copy()

        # dynamics of the adapted snapshot
        H, h = modelmod.joint_space_dynamics(snap, R, q, u_est)
        fbias = K.foot_bias_accelerations(*snap.geom, q, qd,
                                          est.omega_body, R.T @ est.v)
        _, _, _, _, foot_b = K.fk_all(*snap.geom, q)

        # base pose task
        R_ref = K.rot_z(self.yaw_ref)
        p_ref = np.array([self.pos_ref[0], self.pos_ref[1], z_ref])
        err6 = wbcmod.pose_error(R_ref, p_ref, R, p_w)
        twist = np.concatenate([est.R @ est.omega_body, est.v])
        twist_ref = np.concatenate([[0.0, 0.0, v_cmd_body[2]], v_cmd_w])
        vdot_base = wbcmod.pd_task_acceleration(
            np.array(cfg.kp_base), np.array(cfg.kd_base), err6, twist_ref,
            twist)
        Jb = np.zeros((6, 18))
        Jb[0:3, 0:3] = R
        Jb[3:6, 3:6] = R
        jdot_b = np.concatenate([np.zeros(3),
                                 R @ np.cross(est.omega_body, R.T @ est.v)])
        tasks = [wbcmod.TaskSpec("base", Jb, jdot_b, vdot_base,
                                 np.array(cfg.base_weight))]
        # joint-acceleration damping: conditions the QP when few motion tasks
        # are active and bleeds off swing-leg speed near singularities
        Jj = np.zeros((12, 18))
        Jj[:, 6:18] = np.eye(12)
        tasks.append(wbcmod.TaskSpec(
            "joint_reg", Jj, np.zeros(12), -cfg.joint_damping * qd,
            np.full(12, cfg.joint_reg_weight)))

        # swing-foot tasks and stance contacts
        contacts = []
        f_mpc = self.mpc_solution.forces[0] if self.mpc_solution is not None \
            else None
        mg = snap.total_mass * self.nominal.gravity
        for leg in range(4):
            Jl = np.zeros((3, 18))
            pf = foot_b[leg]
            Jl[:, 0:3] = -R @ np.array([[0, -pf[2], pf[1]],
                                        [pf[2], 0, -pf[0]],
                                        [-pf[1], pf[0], 0.0]])
            Jl[:, 3:6] = R
            Jl[:, 6 + 3 * leg:9 + 3 * leg] = R @ K.leg_jacobian(
                *snap.geom, leg, q[3 * leg:3 * leg + 3])
            jdot_l = R @ fbias[leg]
            near_singular = np.linalg.cond(
                K.leg_jacobian(*snap.geom, leg,
                               q[3 * leg:3 * leg + 3])) > 80.0
            if contact[leg]:
                if f_mpc is not None and f_mpc[leg, 2] > 0.0:
                    f_des = f_mpc[leg]
                else:
                    f_des = np.array([0.0, 0.0, mg / max(len(stance_feet),
                                                          1)])
                # a nearly stretched or folded leg keeps carrying force, but
                # pinning its foot would demand unbounded joint accelerations
                contacts.append(wbcmod.ContactSpec(
                    leg=leg, J=Jl, jdot_u=jdot_l, f_des=f_des,
                    constrain=not near_singular))
            elif self.trajs[leg] is not None:
                s = (state.phase[leg] - duty) / max(1.0 - duty, 1e-9)
                pos_d, vel_d, acc_d = swingmod.swing_position(
                    self.trajs[leg], s)
                foot_w = est.foot_pos_world[leg]
                foot_v = Jl @ u_est
                vdot = np.clip(wbcmod.pd_task_acceleration(
                    cfg.kp_foot, cfg.kd_foot, pos_d - foot_w, vel_d, foot_v,
                    acc_d), -150.0, 150.0)
                w_sw = np.array([cfg.foot_weight, cfg.foot_weight,
                                 2.0 * cfg.foot_weight])
                tasks.append(wbcmod.TaskSpec(
                    f"foot{leg}", Jl, jdot_l, vdot, w_sw))

        try:
            sol = wbcmod.solve_wbc(H, h, tasks, contacts,
                                   self.nominal.tau_min,
                                   self.nominal.tau_max, self.nominal.mu,
                                   self.wbc_cfg, warm_active=self._warm)
            self._warm = sol.active_set
            self.last_tau = sol.tau
        except wbcmod.WbcInfeasible:
            self.wbc_faults += 1
        return self.last_tau

    def adapt_step(self, est, q, tau_meas, detector_contacts):
        snap_changed = False
        yaw = np.arctan2(est.R[1, 0], est.R[0, 0])
        Rzt = K.rot_z(yaw).T
        grf = np.zeros((4, 3))
        valid = np.zeros(4, dtype=bool)
        phase = self.phase_snapshot
        duty = self.gait.state.params.duty
        for leg in range(4):
            if not detector_contacts[leg].in_contact:
                continue
            # skip the contact-transition edges of the stance window
            if not self.standing:
                if not (0.1 * duty < phase[leg] < 0.9 * duty):
                    continue
            try:
                # motors react against the contact load: tau ~ -J^T F
                F_b = modelmod.grf_from_torques(
                    self.nominal, leg, q[3 * leg:3 * leg + 3],
                    -tau_meas[3 * leg:3 * leg + 3])
            except modelmod.NearSingularJacobian:
                continue
            grf[leg] = Rzt @ (est.R @ F_b)
            valid[leg] = True
        foot_rel = np.zeros((4, 3))
        for leg in range(4):
            foot_rel[leg] = Rzt @ (est.foot_pos_world[leg] - est.p)
        meas = adaptmod.DynamicsMeasurement(
            accel=Rzt @ est.accel_world, foot_pos=foot_rel, grf=grf,
            valid=valid)
        self.adapt.step(meas, float(np.linalg.norm(est.omega_body)))
        if self.cfg.adapt_enabled:
            snap = self.adapt.publish(self.nominal)
            if snap is not None:
                self.snapshot = snap
                snap_changed = True
        return snap_changed


@dataclass
class RunResult:
    metrics: RunMetrics
    channels: dict
    events: list
    config: RunConfig


def run(cfg: RunConfig, channels_extra=None) -> RunResult:
    """Execute one experiment; deterministic for a given config."""
    robot = modelmod.load_model(cfg.robot)
    terrain = make_terrain(cfg)
    plant = Plant(robot, terrain, seed=cfg.seed)
    plant.place_on_terrain()
    controller = ControllerStack(robot, cfg)
    estimator = estmod.StateEstimator(
        robot,
        detector_cfg=estmod.ContactDetectorConfig(
            use_pressure=cfg.use_pressure and robot.has_foot_pressure))
    estimator.initialize(plant.R, plant.R @ plant.u[3:6], plant.p)
    fall = FallDetector()
    events = []
    payloads = sorted(cfg.payloads, key=lambda e: e.time)
    next_payload = 0

    n_ticks = int(round(cfg.duration / CONTROL_DT))
    log = {k: [] for k in
           ("t", "base_x", "base_y", "base_z", "roll", "pitch", "yaw",
            "height_err", "orient_err", "power_pos", "falls", "est_pos_err",
            "m_hat", "cx_hat", "cy_hat", "p_trace", "m_true", "cx_true",
            "speed", "n_contact", "wbc_faults", "mpc_failures")}
    tau = np.zeros(12)
    tau_meas = np.zeros(12)
    aborted = None

    for k in range(n_ticks):
        t = k * CONTROL_DT
        v_cmd = command_at(cfg.timeline, t)

        while next_payload < len(payloads) \
                and t >= payloads[next_payload].time:
            ev = payloads[next_payload]
            plant.payload_apply(ev)
            events.append({"t": round(t, 6), "event": "payload",
                           "mass": ev.mass,
                           "offset": list(np.asarray(ev.offset, float))})
            next_payload += 1

        if k % MPC_DIV == 0:
            est = estimator.output(plant.q)
            controller.update_mpc(est, v_cmd)

        if k % WBC_DIV == 0:
            q_m, qd_m = plant.joint_sample()
            # estimator leg-rate update uses measured joint state + torques
            est0 = estimator.output(q_m)
            if cfg.perfect_estimator:
                estimator.initialize(plant.R, plant.R @ plant.u[3:6],
                                     plant.p)
                estimator.filter.bg[:] = 0.0
                estimator.filter.ba[:] = 0.0
            u_for_obs = np.concatenate([est0.omega_body,
                                        est0.R.T @ est0.v, qd_m])
            estimator.on_joint_state(
                t, q_m, u_for_obs, tau_meas, plant.pressure_sample(),
                WBC_DIV * CONTROL_DT)
            est = estimator.output(q_m)
            tau = controller.control_step(
                t, WBC_DIV * CONTROL_DT, est, q_m, qd_m, v_cmd,
                detector_contact=[c.in_contact for c in estimator.contacts])
            tau_meas = plant.torque_sample(tau)

        if k % ADAPT_DIV == 0:
            est = estimator.output(plant.q)
            controller.adapt_step(est, plant.q, tau_meas,
                                  estimator.contacts)

        plant.step(tau)

        if k % IMU_DIV == 0:
            gyro, accel = plant.imu_sample(IMU_DIV * CONTROL_DT)
            estimator.on_imu(t, gyro, accel, IMU_DIV * CONTROL_DT)

        roll, pitch = plant.roll_pitch()
        fall.update(t, plant.base_height_above_ground(),
                    robot.stance_height, roll, pitch)
        if fall.falls and cfg.abort_on_fall:
            aborted = "fall"
            events.append({"t": round(t, 6), "event": "fall_abort"})
            break

        if k % LOG_DIV == 0:
            est = estimator.output(plant.q)
            yaw = np.arctan2(plant.R[1, 0], plant.R[0, 0])
            power = float(np.sum(np.maximum(tau * plant.u[6:18], 0.0)))
            z_ref = controller.ground_z + robot.stance_height
            log["t"].append(t)
            log["base_x"].append(plant.p[0])
            log["base_y"].append(plant.p[1])
            log["base_z"].append(plant.p[2])
            log["roll"].append(roll)
            log["pitch"].append(pitch)
            log["yaw"].append(yaw)
            log["height_err"].append(plant.p[2] - z_ref)
            log["orient_err"].append(np.sqrt(roll * roll + pitch * pitch))
            log["power_pos"].append(power)
            log["falls"].append(fall.falls)
            log["est_pos_err"].append(float(np.linalg.norm(est.p - plant.p)))
            log["m_hat"].append(controller.adapt.est.mass)
            log["cx_hat"].append(controller.adapt.est.com_xy[0])
            log["cy_hat"].append(controller.adapt.est.com_xy[1])
            log["p_trace"].append(float(np.trace(controller.adapt.est.P)))
            log["m_true"].append(plant.robot.total_mass)
            log["cx_true"].append(plant.robot.com_offset[0])
            v_w = plant.R @ plant.u[3:6]
            log["speed"].append(float(np.hypot(v_w[0], v_w[1])))
            log["n_contact"].append(int(np.sum(plant.contact_flag)))
            log["wbc_faults"].append(controller.wbc_faults)
            log["mpc_failures"].append(controller.mpc_failures)

    channels = {k: np.asarray(v) for k, v in log.items()}
    metrics = compute_metrics(channels, robot.total_mass,
                              robot.stance_height, robot.gravity)
    if aborted:
        events.append({"t": round(plant.t, 6), "event": "aborted",
                       "reason": aborted})
    return RunResult(metrics=metrics, channels=channels, events=events,
                     config=cfg)
