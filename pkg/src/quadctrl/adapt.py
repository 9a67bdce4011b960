"""Online mass/COM adaptation via a Kalman filter on [m, m*cx, m*cy].

Whole-body force/moment balance with ground reaction forces as measurements:
the force rows read m*(vdot + g) = sum F_i, the moment rows (about the base
origin, yaw-aligned frame) read (m c) x g = sum r_i x F_i; second moments of
inertia are neglected, and the COM z-component is unobservable in the default
configuration, so it stays fixed at the base model's value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as modelmod

GRAVITY = 9.81


class NoValidContacts(Exception):
    """No leg provided a usable GRF sample this tick."""


class IllConditionedInnovation(Exception):
    """Innovation covariance is numerically unusable; update skipped."""


@dataclass
class AdaptConfig:
    q_diag: tuple = (1e-6, 1e-8, 1e-8)
    r_force: float = 25.0        # N^2 per force row
    r_moment: float = 4.0        # (N m)^2 per moment row
    min_stance_feet: int = 3
    max_gyro: float = 0.5        # rad/s gate
    innovation_cond_limit: float = 1e12
    convergence_trace: float = 0.5
    mass_floor: float = 0.1


@dataclass
class ParameterEstimate:
    pi: np.ndarray               # [m, m*cx, m*cy]
    P: np.ndarray                # (3,3)

    @property
    def mass(self):
        return float(self.pi[0])

    @property
    def com_xy(self):
        return np.array([self.pi[1] / self.pi[0], self.pi[2] / self.pi[0]])

    def converged(self, trace_limit: float) -> bool:
        return float(np.trace(self.P)) < trace_limit


@dataclass
class DynamicsMeasurement:
    accel: np.ndarray            # base linear acceleration, yaw-aligned frame
    foot_pos: np.ndarray         # (4,3) foot positions w.r.t. base origin
    grf: np.ndarray              # (4,3) ground reaction forces, same frame
    valid: np.ndarray            # (4,) per-leg usability flags


def initial_estimate(robot: modelmod.RobotModel,
                     p0_diag=(4.0, 0.05, 0.05)) -> ParameterEstimate:
    m = robot.total_mass
    pi = np.array([m, m * robot.com_offset[0], m * robot.com_offset[1]])
    return ParameterEstimate(pi=pi, P=np.diag(p0_diag).astype(float))


def regressor(meas: DynamicsMeasurement):
    """Stack the force/moment balance into (Phi (6,3), z (6,)).

    Only legs flagged valid contribute force and lever-arm terms. Raises
    NoValidContacts when nothing usable remains.
    """
    if not np.any(meas.valid):
        raise NoValidContacts("no reliable stance legs this tick")
    F_sum = np.zeros(3)
    M_sum = np.zeros(3)
    for leg in range(4):
        if not meas.valid[leg]:
            continue
        F = meas.grf[leg]
        F_sum += F
        M_sum += np.cross(meas.foot_pos[leg], F)
    z = np.concatenate([F_sum, M_sum])
    Phi = np.zeros((6, 3))
    Phi[0:3, 0] = meas.accel + np.array([0.0, 0.0, GRAVITY])
    # (m c) x g with c_z = 0: rows are [g*pi2, -g*pi1, 0]
    Phi[3, 2] = GRAVITY
    Phi[4, 1] = -GRAVITY
    return Phi, z


def kf_update(est: ParameterEstimate, Phi: np.ndarray, z: np.ndarray,
              Q: np.ndarray, R: np.ndarray,
              mass_floor: float = 0.1,
              cond_limit: float = 1e12) -> ParameterEstimate:
    """Random-walk predict followed by the standard measurement update."""
    pi_pred = est.pi.copy()
    P_pred = est.P + Q
    S = Phi @ P_pred @ Phi.T + R
    if np.linalg.cond(S) > cond_limit:
        raise IllConditionedInnovation("innovation covariance ill-conditioned")
    Kg = P_pred @ Phi.T @ np.linalg.inv(S)
    pi_new = pi_pred + Kg @ (z - Phi @ pi_pred)
    P_new = (np.eye(3) - Kg @ Phi) @ P_pred
    # keep the covariance symmetric positive definite
    P_new = 0.5 * (P_new + P_new.T)
    w, V = np.linalg.eigh(P_new)
    w = np.maximum(w, 1e-12)
    P_new = (V * w) @ V.T
    if pi_new[0] < mass_floor:
        # clip-and-inflate projection keeps the mass physical
        pi_new[0] = mass_floor
        P_new[0, 0] += 1.0
    return ParameterEstimate(pi=pi_new, P=P_new)


@dataclass
class AdaptationFilter:
    """Gated filter loop state as run by the controller."""
    robot: modelmod.RobotModel
    cfg: AdaptConfig = field(default_factory=AdaptConfig)
    est: ParameterEstimate = None
    updates: int = 0
    skipped: int = 0

    def __post_init__(self):
        if self.est is None:
            self.est = initial_estimate(self.robot)
        self._Q = np.diag(self.cfg.q_diag).astype(float)
        self._R = np.diag([self.cfg.r_force] * 3
                          + [self.cfg.r_moment] * 3).astype(float)

    def step(self, meas: DynamicsMeasurement, gyro_norm: float) -> bool:
        """One gated update; returns True when the estimate moved."""
        cfg = self.cfg
        if (int(np.sum(meas.valid)) < cfg.min_stance_feet
                or gyro_norm > cfg.max_gyro):
            self.skipped += 1
            return False
        try:
            Phi, z = regressor(meas)
            self.est = kf_update(self.est, Phi, z, self._Q, self._R,
                                 mass_floor=cfg.mass_floor,
                                 cond_limit=cfg.innovation_cond_limit)
        except (NoValidContacts, IllConditionedInnovation):
            self.skipped += 1
            return False
        self.updates += 1
        return True

    def publish(self, base_model: modelmod.RobotModel):
        """New model snapshot once converged; None while the gate holds."""
        if not self.est.converged(self.cfg.convergence_trace):
            return None
        cx, cy = self.est.com_xy
        return modelmod.with_mass_com(base_model, self.est.mass, cx, cy)
