"""Robot description: kinematic chains, inertial parameters, derived dynamics.

The model is loaded from a declarative TOML file (see ``quadctrl/fixtures``).
Leg layout: 3-DoF legs (hip abduction about x, hip flexion about y, knee
about y), legs ordered FL, FR, HL, HR. All model data is immutable; online
adaptation publishes fresh snapshots via :func:`with_mass_com`.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import _kernels as K

LEG_NAMES = ("FL", "FR", "HL", "HR")
N_LEGS = 4
N_JOINTS = 12
NV = 18  # generalized velocity dim: base twist (6) + joints (12)

FIXTURE_DIR = Path(__file__).parent / "fixtures"


class NearSingularJacobian(Exception):
    """Leg Jacobian too ill-conditioned to invert for force estimation."""


@dataclass(frozen=True)
class RobotModel:
    name: str
    hip_pos: np.ndarray        # (4,3) abduction joint origins, base frame
    abd_off: np.ndarray        # (4,3) hip-flexion origin in abd-link frame
    knee_off: np.ndarray       # (4,3) knee origin in thigh frame
    foot_off: np.ndarray       # (4,3) foot point in shank frame
    link_mass: np.ndarray      # (13,) base + 12 leg links
    link_com: np.ndarray       # (13,3) in each link frame
    link_inertia: np.ndarray   # (13,3,3) about link COM, link frame
    tau_min: np.ndarray        # (12,)
    tau_max: np.ndarray        # (12,)
    mu: float
    gravity: float
    stance_height: float
    has_foot_pressure: bool
    total_mass: float          # whole-robot mass (kg)
    com_offset: np.ndarray     # whole-robot COM in base frame at nominal stance
    srbd_inertia: np.ndarray   # (3,3) composite inertia about COM, nominal stance
    q_nominal: np.ndarray = field(default=None)  # (12,) nominal stance joints

    def __post_init__(self):
        if self.total_mass <= 0:
            raise ValueError("total mass must be positive")
        if np.any(self.link_mass < 0):
            raise ValueError("link masses must be non-negative")
        if np.any(self.tau_min >= self.tau_max):
            raise ValueError("tau_min must be below tau_max componentwise")

    @property
    def pack(self):
        """Array tuple consumed by the jitted kernels."""
        return (self.hip_pos, self.abd_off, self.knee_off, self.foot_off,
                self.link_mass, self.link_com, self.link_inertia)

    @property
    def geom(self):
        return (self.hip_pos, self.abd_off, self.knee_off, self.foot_off)


def _mirror_y(vec, side):
    v = np.array(vec, dtype=float)
    v[1] *= side
    return v


def load_model(source: str | Path) -> RobotModel:
    """Load a robot fixture by name (shipped) or TOML file path."""
    path = Path(source)
    if not path.exists():
        path = FIXTURE_DIR / f"{source}.toml"
    if not path.exists():
        raise FileNotFoundError(f"robot fixture not found: {source}")
    with open(path, "rb") as f:
        data = tomllib.load(f)

    geo = data["geometry"]
    ine = data["inertial"]
    lim = data["limits"]

    side = np.array([1.0, -1.0, 1.0, -1.0])  # FL, FR, HL, HR lateral sign
    fore = np.array([1.0, 1.0, -1.0, -1.0])
    hip_pos = np.stack([
        np.array([fore[i] * geo["hip_x"], side[i] * geo["hip_y"], 0.0])
        for i in range(4)])
    abd_off = np.stack([
        np.array([0.0, side[i] * geo["abd_offset"], 0.0]) for i in range(4)])
    knee_off = np.tile(np.array([0.0, 0.0, -geo["thigh_length"]]), (4, 1))
    foot_off = np.tile(np.array([0.0, 0.0, -geo["shank_length"]]), (4, 1))

    link_mass = np.zeros(13)
    link_com = np.zeros((13, 3))
    link_inertia = np.zeros((13, 3, 3))
    link_mass[0] = ine["base_mass"]
    link_com[0] = np.array(ine["base_com"], dtype=float)
    link_inertia[0] = np.diag(ine["base_inertia"])
    for leg in range(4):
        link_mass[1 + 3 * leg] = ine["abd_mass"]
        link_com[1 + 3 * leg] = _mirror_y(ine["abd_com"], side[leg])
        link_inertia[1 + 3 * leg] = np.diag(ine["abd_inertia"])
        link_mass[2 + 3 * leg] = ine["thigh_mass"]
        link_com[2 + 3 * leg] = np.array(ine["thigh_com"], dtype=float)
        link_inertia[2 + 3 * leg] = np.diag(ine["thigh_inertia"])
        link_mass[3 + 3 * leg] = ine["shank_mass"]
        link_com[3 + 3 * leg] = np.array(ine["shank_com"], dtype=float)
        link_inertia[3 + 3 * leg] = np.diag(ine["shank_inertia"])

    model = RobotModel(
        name=data.get("name", path.stem),
        hip_pos=hip_pos, abd_off=abd_off, knee_off=knee_off,
        foot_off=foot_off, link_mass=link_mass, link_com=link_com,
        link_inertia=link_inertia,
        tau_min=np.full(12, float(lim["tau_min"])),
        tau_max=np.full(12, float(lim["tau_max"])),
        mu=float(data.get("contact", {}).get("mu", 0.6)),
        gravity=9.81,
        stance_height=float(data["stance"]["height"]),
        has_foot_pressure=bool(data.get("sensors", {}).get(
            "foot_pressure", True)),
        total_mass=float(np.sum(link_mass)),
        com_offset=np.zeros(3),
        srbd_inertia=np.eye(3),
        q_nominal=np.zeros(12),
    )
    q_nom = nominal_stance(model)
    m, com, inertia = composite_inertial(model, q_nom)
    return replace(model, total_mass=m, com_offset=com, srbd_inertia=inertia,
                   q_nominal=q_nom)


def leg_forward_kinematics(model: RobotModel, leg: int, q_leg) -> np.ndarray:
    """Foot position of one leg in the base frame."""
    return K.leg_fk(*model.geom, leg, np.asarray(q_leg, dtype=float))


def leg_jacobian(model: RobotModel, leg: int, q_leg) -> np.ndarray:
    """3x3 foot Jacobian of one leg in the base frame."""
    return K.leg_jacobian(*model.geom, leg, np.asarray(q_leg, dtype=float))


def grf_from_torques(model: RobotModel, leg: int, q_leg, tau_leg,
                     cond_limit: float = 1e4) -> np.ndarray:
    """Ground reaction force estimate from joint torques: solve J^T F = tau.

    Raises NearSingularJacobian beyond the conditioning limit so callers
    (the adaptation filter) can skip the leg for this sample.
    """
    J = leg_jacobian(model, leg, q_leg)
    if np.linalg.cond(J) > cond_limit:
        raise NearSingularJacobian(
            f"leg {LEG_NAMES[leg]} Jacobian condition number exceeds "
            f"{cond_limit:g}")
    return np.linalg.solve(J.T, np.asarray(tau_leg, dtype=float))


def joint_space_dynamics(model: RobotModel, base_R: np.ndarray, q,
                         u) -> tuple[np.ndarray, np.ndarray]:
    """Mass matrix H (18x18) and bias forces h (18,) for u=[omega_b, v_b, qd].

    base_R rotates base coordinates into the world and is needed only for the
    gravity part of h.
    """
    q = np.asarray(q, dtype=float)
    u = np.asarray(u, dtype=float)
    H = K.mass_matrix(*model.pack, q)
    g_base = base_R.T @ np.array([0.0, 0.0, model.gravity])
    h = K.bias_forces(*model.pack, q, u[6:18], u[0:3], u[3:6], g_base)
    return H, h


def leg_inverse_kinematics(model: RobotModel, leg: int, foot_base,
                           knee_sign: int = 1) -> np.ndarray:
    """Analytic IK for one leg; foot position given in the base frame.

    knee_sign selects the elbow branch (+1 knee-backward, -1 knee-forward).
    """
    d = np.asarray(foot_base, dtype=float) - model.hip_pos[leg]
    oy = model.abd_off[leg][1]
    l1 = -model.knee_off[leg][2]
    l2 = -model.foot_off[leg][2]
    r = np.hypot(d[1], d[2])
    if r < abs(oy):
        raise ValueError("foot target inside abduction offset radius")
    phi = np.arctan2(d[2], d[1])
    alpha = np.arccos(np.clip(oy / r, -1.0, 1.0))
    q0 = None
    for cand in (phi + alpha, phi - alpha):
        s, c = np.sin(cand), np.cos(cand)
        zp = -s * d[1] + c * d[2]
        if zp <= 0.0:
            q0 = np.arctan2(np.sin(cand), np.cos(cand))
            break
    if q0 is None:
        raise ValueError("no abduction solution with foot below hip")
    s, c = np.sin(q0), np.cos(q0)
    xp = d[0]
    zp = -s * d[1] + c * d[2]
    rho2 = xp * xp + zp * zp
    cq2 = (rho2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    if cq2 > 1.0 + 1e-9 or cq2 < -1.0 - 1e-9:
        raise ValueError("foot target out of reach")
    q2 = knee_sign * np.arccos(np.clip(cq2, -1.0, 1.0))
    q1 = (np.arctan2(-xp, -zp)
          - np.arctan2(l2 * np.sin(q2), l1 + l2 * np.cos(q2)))
    return np.array([q0, q1, q2])


def nominal_stance(model: RobotModel) -> np.ndarray:
    """Fore-aft symmetric stance with each foot below its hip.

    Front knees fold backward, hind knees forward, keeping the composite COM
    centered for a symmetric fixture.
    """
    q = np.zeros(12)
    for leg in range(4):
        target = model.hip_pos[leg] + model.abd_off[leg]
        target = np.array([target[0], target[1], -model.stance_height])
        q[3 * leg:3 * leg + 3] = leg_inverse_kinematics(
            model, leg, target, knee_sign=1 if leg < 2 else -1)
    return q


def composite_inertial(model: RobotModel, q) -> tuple[float, np.ndarray,
                                                      np.ndarray]:
    """Whole-robot mass, COM (base frame) and inertia about the COM at q."""
    body_R, body_p, _, _, _ = K.fk_all(*model.geom, np.asarray(q, dtype=float))
    m_tot = float(np.sum(model.link_mass))
    com = np.zeros(3)
    for b in range(13):
        com += model.link_mass[b] * (body_p[b] + body_R[b] @ model.link_com[b])
    com /= m_tot
    I_tot = np.zeros((3, 3))
    for b in range(13):
        c_b = body_p[b] + body_R[b] @ model.link_com[b]
        I_b = body_R[b] @ model.link_inertia[b] @ body_R[b].T
        r = c_b - com
        rx = np.array([[0, -r[2], r[1]], [r[2], 0, -r[0]], [-r[1], r[0], 0.0]])
        I_tot += I_b + model.link_mass[b] * (rx @ rx.T)
    return m_tot, com, I_tot


def with_payload(model: RobotModel, mass: float, offset) -> RobotModel:
    """Attach (or with negative mass, detach) a point payload to the base.

    Attach followed by detach at the same offset restores the original
    parameters exactly.
    """
    offset = np.asarray(offset, dtype=float)
    m_b = model.link_mass[0]
    m_new = m_b + mass
    if m_new <= 0 or model.total_mass + mass <= 0:
        raise ValueError("payload would make the robot massless")
    c_new = (m_b * model.link_com[0] + mass * offset) / m_new
    # parallel-axis terms of the point mass and the shifted base link
    def point_inertia(m, r):
        rx = np.array([[0, -r[2], r[1]], [r[2], 0, -r[0]],
                       [-r[1], r[0], 0.0]])
        return m * (rx @ rx.T)

    I_about_cnew = (model.link_inertia[0]
                    + point_inertia(m_b, model.link_com[0] - c_new)
                    + point_inertia(mass, offset - c_new))
    link_mass = model.link_mass.copy()
    link_mass[0] = m_new
    link_com = model.link_com.copy()
    link_com[0] = c_new
    link_inertia = model.link_inertia.copy()
    link_inertia[0] = I_about_cnew
    updated = replace(model, link_mass=link_mass, link_com=link_com,
                      link_inertia=link_inertia)
    m, com, inertia = composite_inertial(updated, model.q_nominal)
    return replace(updated, total_mass=m, com_offset=com,
                   srbd_inertia=inertia)


def with_mass_com(model: RobotModel, total_mass: float, com_x: float,
                  com_y: float) -> RobotModel:
    """Snapshot with adapted totals, realized as a base-link change.

    The extra (or missing) mass relative to the current totals is attributed
    to the base link, placed so the whole-robot COM lands on the requested
    x/y. Used both by the adaptation publisher and by simulated payloads.
    """
    dm = total_mass - model.total_mass
    new_base_mass = model.link_mass[0] + dm
    if new_base_mass <= 0 or total_mass <= 0:
        raise ValueError("adapted mass must stay positive")
    target = np.array([com_x, com_y, model.com_offset[2]])
    # solve base-link COM so the composite lands on target
    others = model.total_mass * model.com_offset \
        - model.link_mass[0] * model.link_com[0]
    new_base_com = (total_mass * target - others) / new_base_mass
    link_mass = model.link_mass.copy()
    link_mass[0] = new_base_mass
    link_com = model.link_com.copy()
    link_com[0] = new_base_com
    updated = replace(model, link_mass=link_mass, link_com=link_com)
    m, com, inertia = composite_inertial(updated, model.q_nominal)
    return replace(updated, total_mass=m, com_offset=com,
                   srbd_inertia=inertia)
