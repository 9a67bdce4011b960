"""Swing-leg planning: foothold targets and Bezier foot trajectories."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEGREE = 6


@dataclass
class SwingConfig:
    step_height: float = 0.08
    k_step: float = 0.03        # feedback gain on velocity error (s)
    t_stance_gain: float = 0.5  # fraction of stance time projected ahead
    reach_max: float = 0.22     # m, clamp on the foothold offset from the hip
    stance_widen: float = 0.0   # m, lateral offset added outward per side


@dataclass(frozen=True)
class SwingTrajectory:
    """Degree-6 Bezier curve from liftoff to touchdown.

    Control points are chosen so velocity vanishes at both ends (P0=P1,
    P5=P6) and the three middle points sit at a lifted apex height, giving a
    symmetric arc with near-zero touchdown speed.
    """
    ctrl: np.ndarray       # (7,3)
    t_start: float
    t_end: float
    apex: float

    @property
    def duration(self):
        return self.t_end - self.t_start


def plan_foothold(base_pos_w, base_yaw, hip_pos_base, v_actual_w, v_cmd_w,
                  t_stance, t_ahead: float = 0.0, terrain_height_fn=None,
                  cfg: SwingConfig = None) -> np.ndarray:
    """Raibert-style foothold for a touchdown t_ahead seconds from now.

    The hip is projected to where it will be at touchdown, then led by half a
    stance time of travel plus a velocity-error correction; planning around
    the current hip would leave every foothold behind the capture point by
    the distance traveled during the remaining swing.
    """
    cfg = cfg or SwingConfig()
    cy, sy = np.cos(base_yaw), np.sin(base_yaw)
    Rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    v_a = np.array([v_actual_w[0], v_actual_w[1], 0.0])
    v_c = np.array([v_cmd_w[0], v_cmd_w[1], 0.0])
    hip_b = np.asarray(hip_pos_base, dtype=float).copy()
    hip_b[1] += np.sign(hip_b[1]) * cfg.stance_widen
    hip_w = np.asarray(base_pos_w) + Rz @ hip_b + v_a * t_ahead
    offset = cfg.t_stance_gain * t_stance * v_a + cfg.k_step * (v_a - v_c)
    reach = np.hypot(offset[0], offset[1])
    if reach > cfg.reach_max:
        offset *= cfg.reach_max / reach
    p = hip_w + offset
    if terrain_height_fn is not None:
        p[2] = terrain_height_fn(p[0], p[1])
    else:
        p[2] = 0.0
    return p


def make_trajectory(p_liftoff, p_touchdown, t_start, t_end,
                    step_height: float = 0.08) -> SwingTrajectory:
    p0 = np.asarray(p_liftoff, dtype=float)
    p6 = np.asarray(p_touchdown, dtype=float)
    z_top = max(p0[2], p6[2]) + step_height
    # mid z chosen so the curve value at s=0.5, (7 z0 + 50 zc + 7 z6)/64,
    # lands on the requested apex
    zc = (64.0 * z_top - 7.0 * p0[2] - 7.0 * p6[2]) / 50.0
    ctrl = np.empty((7, 3))
    ctrl[0] = p0
    ctrl[1] = p0
    ctrl[2] = p0 + (p6 - p0) / 3.0
    ctrl[3] = 0.5 * (p0 + p6)
    ctrl[4] = p0 + 2.0 * (p6 - p0) / 3.0
    ctrl[5] = p6
    ctrl[6] = p6
    ctrl[2][2] = zc
    ctrl[3][2] = zc
    ctrl[4][2] = zc
    return SwingTrajectory(ctrl=ctrl, t_start=float(t_start),
                           t_end=float(t_end), apex=z_top)


def retarget(traj: SwingTrajectory, p_touchdown,
             step_height: float = 0.08) -> SwingTrajectory:
    """Rebuild the curve toward an updated foothold, keeping the liftoff point."""
    return make_trajectory(traj.ctrl[0], p_touchdown, traj.t_start,
                           traj.t_end, step_height)


def _de_casteljau(ctrl, s):
    pts = ctrl.copy()
    for r in range(1, pts.shape[0]):
        pts[:pts.shape[0] - r] = (1 - s) * pts[:pts.shape[0] - r] \
            + s * pts[1:pts.shape[0] - r + 1]
    return pts[0]


def swing_position(traj: SwingTrajectory, s: float):
    """Position, velocity and acceleration at normalized progress s in [0,1].

    Derivatives of the Bezier curve are Bezier curves of the control-point
    differences; time scaling converts them to real velocities/accelerations.
    """
    s = float(np.clip(s, 0.0, 1.0))
    T = traj.duration
    c = traj.ctrl
    pos = _de_casteljau(c, s)
    d1 = DEGREE * (c[1:] - c[:-1])
    vel = _de_casteljau(d1, s) / T
    d2 = (DEGREE - 1) * (d1[1:] - d1[:-1])
    acc = _de_casteljau(d2, s) / (T * T)
    return pos, vel, acc
