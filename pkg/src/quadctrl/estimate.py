"""Floating-base state estimation and contact detection.

A contact-aided invariant EKF fuses IMU propagation with leg-kinematic
measurements of stationary stance feet; gyro/accel biases ride along as an
appended Euclidean state. Contact events come from foot pressure sensors when
the platform has them and their signal is fresh, otherwise from a
generalized-momentum disturbance observer; both paths apply hysteresis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import model as modelmod

GRAVITY_W = np.array([0.0, 0.0, -9.81])


def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def _gamma(phi, order):
    """SO(3) exponential integrals Gamma_0..2 used in IMU preintegration."""
    th = np.linalg.norm(phi)
    X = _skew(phi)
    if th < 1e-8:
        if order == 0:
            return np.eye(3) + X
        if order == 1:
            return np.eye(3) + 0.5 * X
        return 0.5 * np.eye(3) + X / 6.0
    X2 = X @ X
    if order == 0:
        return K.so3_exp(phi)
    if order == 1:
        return np.eye(3) + (1 - np.cos(th)) / th ** 2 * X \
            + (th - np.sin(th)) / th ** 3 * X2
    return 0.5 * np.eye(3) + (th - np.sin(th)) / th ** 3 * X \
        + (th ** 2 + 2 * np.cos(th) - 2) / (2 * th ** 4) * X2


@dataclass
class InekfConfig:
    gyro_noise: float = 1e-5        # rad^2/s^2 per Hz
    accel_noise: float = 5e-4       # (m/s^2)^2 per Hz
    gyro_bias_noise: float = 1e-9
    accel_bias_noise: float = 1e-8
    contact_noise: float = 1e-4     # stance-foot random walk
    fk_noise: float = 1e-5          # FK measurement covariance (m^2)
    new_contact_cov: float = 1e-2
    chi2_gate: float = 11.34        # 3 dof, 99%


class OutlierRejected(Exception):
    """Contact measurement failed the chi-square innovation gate."""


class InvariantFilter:
    """Right-invariant (world-centric) EKF on [R, v, p, feet...] + biases.

    Error ordering: [xi_R, xi_v, xi_p, xi_feet..., dbg, dba].
    """

    def __init__(self, cfg: InekfConfig = None, R=None, v=None, p=None):
        self.cfg = cfg or InekfConfig()
        self.R = np.eye(3) if R is None else np.array(R, dtype=float)
        self.v = np.zeros(3) if v is None else np.array(v, dtype=float)
        self.p = np.zeros(3) if p is None else np.array(p, dtype=float)
        self.bg = np.zeros(3)
        self.ba = np.zeros(3)
        self.feet = {}           # leg -> foot position (world)
        self.P = np.zeros((15, 15))
        self.P[0:9, 0:9] = np.eye(9) * 1e-6
        self.P[9:15, 9:15] = np.eye(6) * 1e-8

    # ---- error-state bookkeeping -------------------------------------
    @property
    def contact_legs(self):
        return sorted(self.feet)

    def _dim(self):
        return 9 + 3 * len(self.feet) + 6

    def _foot_slot(self, leg):
        return 9 + 3 * self.contact_legs.index(leg)

    def _bias_slot(self):
        return 9 + 3 * len(self.feet)

    # ---- propagation --------------------------------------------------
    def propagate(self, gyro, accel, dt: float):
        """IMU propagation; stance feet are stationary by model."""
        cfg = self.cfg
        w = np.asarray(gyro, dtype=float) - self.bg
        a = np.asarray(accel, dtype=float) - self.ba
        dim = self._dim()
        nb = self._bias_slot()

        phi = w * dt
        G0 = _gamma(phi, 0)
        G1 = _gamma(phi, 1)
        G2 = _gamma(phi, 2)
        R, v, p = self.R, self.v, self.p

        A = np.zeros((dim, dim))
        A[3:6, 0:3] = _skew(GRAVITY_W)
        A[6:9, 3:6] = np.eye(3)
        A[0:3, nb:nb + 3] = -R
        A[3:6, nb:nb + 3] = -_skew(v) @ R
        A[3:6, nb + 3:nb + 6] = -R
        A[6:9, nb:nb + 3] = -_skew(p) @ R
        for i, leg in enumerate(self.contact_legs):
            A[9 + 3 * i:12 + 3 * i, nb:nb + 3] = -_skew(self.feet[leg]) @ R
        Phi = np.eye(dim) + A * dt + (A @ A) * (dt * dt / 2.0)

        Qc = np.zeros((dim, dim))
        Qc[0:3, 0:3] = np.eye(3) * cfg.gyro_noise
        Qc[3:6, 3:6] = np.eye(3) * cfg.accel_noise
        for i in range(len(self.feet)):
            Qc[9 + 3 * i:12 + 3 * i, 9 + 3 * i:12 + 3 * i] = \
                np.eye(3) * cfg.contact_noise
        Qc[nb:nb + 3, nb:nb + 3] = np.eye(3) * cfg.gyro_bias_noise
        Qc[nb + 3:nb + 6, nb + 3:nb + 6] = np.eye(3) * cfg.accel_bias_noise
        # map white noise through the right-invariant adjoint
        Adj = np.eye(dim)
        Adj[0:3, 0:3] = R
        Adj[3:6, 3:6] = R
        Adj[6:9, 6:9] = R
        Adj[3:6, 0:3] = _skew(v) @ R
        Adj[6:9, 0:3] = _skew(p) @ R
        for i, leg in enumerate(self.contact_legs):
            Adj[9 + 3 * i:12 + 3 * i, 9 + 3 * i:12 + 3 * i] = R
            Adj[9 + 3 * i:12 + 3 * i, 0:3] = _skew(self.feet[leg]) @ R
        Qd = Phi @ (Adj @ Qc @ Adj.T) @ Phi.T * dt
        self.P = Phi @ self.P @ Phi.T + Qd

        self.R = R @ G0
        self.v = v + (R @ (G1 @ a) + GRAVITY_W) * dt
        self.p = p + v * dt + (R @ (G2 @ a) + 0.5 * GRAVITY_W) * dt * dt
        self.R = K.reorthonormalize(self.R)

    # ---- contact management --------------------------------------------
    def add_contact(self, leg: int, foot_base: np.ndarray):
        """Register a touchdown: world foothold from the current estimate."""
        if leg in self.feet:
            return
        dim_old = self._dim()
        nb_old = self._bias_slot()
        self.feet[leg] = self.p + self.R @ np.asarray(foot_base, dtype=float)
        slot = self._foot_slot(leg)
        dim_new = dim_old + 3
        F = np.zeros((dim_new, dim_old))
        rows_old = [i for i in range(dim_old)]
        new_of_old = []
        for i in rows_old:
            if i < nb_old:
                # state rows keep their position unless shifted by the insert
                new_of_old.append(i if i < slot else i + 3)
            else:
                new_of_old.append(i + 3)
        for old, new in enumerate(new_of_old):
            F[new, old] = 1.0
        F[slot:slot + 3, 6:9] = np.eye(3)  # new foot error copies xi_p
        Pn = F @ self.P @ F.T
        Gn = np.zeros((dim_new, 3))
        Gn[slot:slot + 3, :] = self.R
        Pn += Gn @ (np.eye(3) * self.cfg.new_contact_cov) @ Gn.T
        self.P = Pn

    def remove_contact(self, leg: int):
        if leg not in self.feet:
            return
        slot = self._foot_slot(leg)
        keep = [i for i in range(self._dim()) if not slot <= i < slot + 3]
        self.P = self.P[np.ix_(keep, keep)]
        del self.feet[leg]

    # ---- kinematic update ------------------------------------------------
    def contact_update(self, leg: int, foot_base: np.ndarray,
                       fk_cov: np.ndarray = None):
        """Fuse a stance-foot FK measurement; raises OutlierRejected on gate."""
        if leg not in self.feet:
            self.add_contact(leg, foot_base)
            return
        dim = self._dim()
        slot = self._foot_slot(leg)
        y = np.asarray(foot_base, dtype=float)
        N_body = np.eye(3) * self.cfg.fk_noise if fk_cov is None else fk_cov
        Hm = np.zeros((3, dim))
        Hm[:, 6:9] = -np.eye(3)
        Hm[:, slot:slot + 3] = np.eye(3)
        Z = self.R @ y - (self.feet[leg] - self.p)
        N = self.R @ N_body @ self.R.T
        S = Hm @ self.P @ Hm.T + N
        Sinv = np.linalg.inv(S)
        nis = float(Z @ Sinv @ Z)
        if nis > self.cfg.chi2_gate:
            raise OutlierRejected(
                f"leg {leg} contact innovation gate: NIS {nis:.1f}")
        Kg = self.P @ Hm.T @ Sinv
        delta = Kg @ Z
        self._apply_correction(delta)
        IKH = np.eye(dim) - Kg @ Hm
        self.P = IKH @ self.P @ IKH.T + Kg @ N @ Kg.T
        self.P = 0.5 * (self.P + self.P.T)

    def _apply_correction(self, delta):
        nb = self._bias_slot()
        dR = K.so3_exp(delta[0:3])
        J = _gamma(delta[0:3], 1)
        self.R = K.reorthonormalize(dR @ self.R)
        self.v = dR @ self.v + J @ delta[3:6]
        self.p = dR @ self.p + J @ delta[6:9]
        for i, leg in enumerate(self.contact_legs):
            self.feet[leg] = dR @ self.feet[leg] + J @ delta[9 + 3 * i:
                                                            12 + 3 * i]
        self.bg = self.bg + delta[nb:nb + 3]
        self.ba = self.ba + delta[nb + 3:nb + 6]

    def base_state(self):
        return self.R.copy(), self.v.copy(), self.p.copy()


# ---------------------------------------------------------------------------
# momentum observer
# ---------------------------------------------------------------------------

class MomentumObserver:
    """First-order disturbance observer on generalized momentum.

    Tracks the external generalized force with time constant 1/K_O using only
    joint torques, positions and velocities (no accelerations): the momentum
    derivative satisfies dp/dt = S^T tau - h + Hdot u + tau_ext.
    """

    def __init__(self, robot: modelmod.RobotModel, k_obs: float = 50.0,
                 fd_eps: float = 1e-6):
        self.robot = robot
        self.k_obs = float(k_obs)
        self.fd_eps = float(fd_eps)
        self.r = np.zeros(18)
        self._integral = np.zeros(18)
        self._p0 = None

    def reset(self):
        self.r = np.zeros(18)
        self._integral = np.zeros(18)
        self._p0 = None

    def step(self, base_R, q, u, tau_cmd, dt: float) -> np.ndarray:
        robot = self.robot
        q = np.asarray(q, dtype=float)
        u = np.asarray(u, dtype=float)
        H = K.mass_matrix(*robot.pack, q)
        p_mom = H @ u
        if self._p0 is None:
            self._p0 = p_mom.copy()
        g_base = base_R.T @ np.array([0.0, 0.0, robot.gravity])
        h = K.bias_forces(*robot.pack, q, u[6:18], u[0:3], u[3:6], g_base)
        # Hdot u by central differences along the joint motion
        eps = self.fd_eps
        Hp = K.mass_matrix(*robot.pack, q + u[6:18] * eps)
        Hm = K.mass_matrix(*robot.pack, q - u[6:18] * eps)
        Hdot_u = (Hp - Hm) @ u / (2.0 * eps)
        tau_gen = np.zeros(18)
        tau_gen[6:18] = tau_cmd
        integrand = tau_gen - h + Hdot_u + self.r
        self._integral += integrand * dt
        self.r = self.k_obs * (p_mom - self._p0 - self._integral)
        return self.r.copy()

    def foot_forces(self, base_R, q) -> np.ndarray:
        """Map the residual's leg rows to world-frame foot forces (4,3)."""
        out = np.zeros((4, 3))
        for leg in range(4):
            J = K.leg_jacobian(*self.robot.geom, leg,
                               q[3 * leg:3 * leg + 3])
            if np.linalg.cond(J) > 1e6:
                continue
            F_b = np.linalg.solve(J.T, self.r[6 + 3 * leg:9 + 3 * leg])
            out[leg] = base_R @ F_b
        return out


# ---------------------------------------------------------------------------
# contact detection
# ---------------------------------------------------------------------------

@dataclass
class ContactSignal:
    in_contact: bool
    confidence: float
    source: str                 # "pressure" or "momentum_observer"


@dataclass
class ContactDetectorConfig:
    threshold: float = 15.0     # N normal force
    hysteresis: float = 5.0     # full band width
    use_pressure: bool = True
    staleness: float = 0.05     # s without pressure data -> unreliable


class ContactDetector:
    """Hierarchical contact sourcing with per-leg hysteresis."""

    def __init__(self, cfg: ContactDetectorConfig = None):
        self.cfg = cfg or ContactDetectorConfig()
        self.state = np.zeros(4, dtype=bool)
        self._last_pressure_t = -np.inf

    def update(self, t: float, pressure, residual_normal,
               expected=None) -> list[ContactSignal]:
        """pressure: (4,) foot normal forces or None when the channel is
        absent; residual_normal: (4,) momentum-observer normal forces."""
        cfg = self.cfg
        if pressure is not None:
            self._last_pressure_t = t
        use_pressure = (cfg.use_pressure and pressure is not None
                        and t - self._last_pressure_t <= cfg.staleness)
        forces = pressure if use_pressure else residual_normal
        source = "pressure" if use_pressure else "momentum_observer"
        half = 0.5 * cfg.hysteresis
        out = []
        for leg in range(4):
            f = float(forces[leg])
            if self.state[leg]:
                if f < cfg.threshold - half:
                    self.state[leg] = False
            else:
                if f > cfg.threshold + half:
                    self.state[leg] = True
            conf = min(1.0, max(0.0, 0.5 + (f - cfg.threshold)
                                / max(cfg.hysteresis, 1e-9)))
            out.append(ContactSignal(in_contact=bool(self.state[leg]),
                                     confidence=conf, source=source))
        return out


# ---------------------------------------------------------------------------
# estimator facade used by the control loop
# ---------------------------------------------------------------------------

@dataclass
class EstimatorOutput:
    R: np.ndarray
    v: np.ndarray
    p: np.ndarray
    omega_body: np.ndarray
    accel_world: np.ndarray      # gravity-compensated, low-passed
    contacts: list
    foot_pos_world: np.ndarray   # (4,3) via FK from the current estimate


class StateEstimator:
    """Wires the InEKF, momentum observer and contact detector together."""

    def __init__(self, robot: modelmod.RobotModel, cfg: InekfConfig = None,
                 detector_cfg: ContactDetectorConfig = None,
                 k_obs: float = 50.0, accel_lp_hz: float = 20.0):
        self.robot = robot
        self.filter = InvariantFilter(cfg)
        self.observer = MomentumObserver(robot, k_obs=k_obs)
        det = detector_cfg or ContactDetectorConfig(
            use_pressure=robot.has_foot_pressure)
        self.detector = ContactDetector(det)
        self.accel_lp_hz = accel_lp_hz
        self._accel_f = np.zeros(3)
        self._omega = np.zeros(3)
        self.contacts = [ContactSignal(False, 0.0, "momentum_observer")
                         for _ in range(4)]
        self.rejected_updates = 0

    def initialize(self, R, v, p):
        self.filter.R = np.array(R, dtype=float)
        self.filter.v = np.array(v, dtype=float)
        self.filter.p = np.array(p, dtype=float)

    def on_imu(self, t, gyro, accel, dt):
        self.filter.propagate(gyro, accel, dt)
        self._omega = np.asarray(gyro, dtype=float) - self.filter.bg
        a_w = self.filter.R @ (np.asarray(accel, dtype=float)
                               - self.filter.ba) + GRAVITY_W
        alpha = dt * 2.0 * np.pi * self.accel_lp_hz
        alpha = alpha / (1.0 + alpha)
        self._accel_f += alpha * (a_w - self._accel_f)

    def on_joint_state(self, t, q, u, tau_cmd, pressure, dt):
        """Leg-rate update: momentum observer, contact sourcing, InEKF feet."""
        self.observer.step(self.filter.R, q, u, tau_cmd, dt)
        resid_forces = self.observer.foot_forces(self.filter.R, q)
        self.contacts = self.detector.update(
            t, pressure, resid_forces[:, 2])
        for leg in range(4):
            q_leg = q[3 * leg:3 * leg + 3]
            foot_b = K.leg_fk(*self.robot.geom, leg, q_leg)
            if self.contacts[leg].in_contact:
                try:
                    self.filter.contact_update(leg, foot_b)
                except OutlierRejected:
                    self.rejected_updates += 1
            else:
                self.filter.remove_contact(leg)

    def output(self, q) -> EstimatorOutput:
        R, v, p = self.filter.base_state()
        _, _, _, _, foot_b = K.fk_all(*self.robot.geom, np.asarray(q,
                                                                   dtype=float))
        foot_w = (R @ foot_b.T).T + p
        return EstimatorOutput(R=R, v=v, p=p, omega_body=self._omega.copy(),
                               accel_world=self._accel_f.copy(),
                               contacts=list(self.contacts),
                               foot_pos_world=foot_w)
