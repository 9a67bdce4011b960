"""Rigid-body quadruped plant: contact physics, sensors, payloads, metrics.

The plant integrates the full 18-DoF dynamics with penalty ground contact
against a height-field terrain. Physics runs on a fixed control-tick grid
with several semi-implicit substeps per tick inside a single jitted kernel.
Sensor channels (IMU, joint encoders, torque, optional foot pressure) are
emulated with seeded noise so whole runs replay bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import model as modelmod


class NumericalDivergence(Exception):
    """Plant state exploded; carries time and state diagnostics."""


@dataclass
class Terrain:
    grid: np.ndarray
    x0: float
    y0: float
    dx: float
    mu: float = 0.6

    def height(self, x, y):
        z, _ = K.terrain_height_normal(self.grid, self.x0, self.y0, self.dx,
                                       float(x), float(y))
        return z

    @staticmethod
    def flat(mu: float = 0.6, extent: float = 60.0):
        return Terrain(grid=np.zeros((4, 4)), x0=-extent / 2,
                       y0=-extent / 2, dx=extent / 3, mu=mu)

    @staticmethod
    def rough(seed: int, amplitude: float = 0.03,
              correlation: float = 0.25, extent: float = 40.0,
              resolution: float = 0.05, mu: float = 0.6):
        """Filtered-noise height field with the requested RMS amplitude."""
        rng = np.random.default_rng(seed)
        n = int(extent / resolution) + 1
        raw = rng.normal(size=(n, n))
        # separable Gaussian blur sets the correlation length
        sigma = max(correlation / resolution, 1e-6)
        radius = int(3 * sigma)
        ker = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
        ker /= ker.sum()
        sm = np.apply_along_axis(
            lambda r: np.convolve(r, ker, mode="same"), 1, raw)
        sm = np.apply_along_axis(
            lambda c: np.convolve(c, ker, mode="same"), 0, sm)
        sm *= amplitude / max(np.std(sm), 1e-12)
        # flatten a starting pad so the robot spawns on level ground
        cx = int((0.0 - (-extent / 2)) / resolution)
        pad = int(0.6 / resolution)
        ramp = np.ones((n, n))
        for i in range(n):
            for j in range(n):
                d = max(abs(i - cx), abs(j - cx)) - pad
                ramp[i, j] = np.clip(d / pad, 0.0, 1.0)
        sm *= ramp
        return Terrain(grid=sm, x0=-extent / 2, y0=-extent / 2,
                       dx=resolution, mu=mu)

    @staticmethod
    def slope(angle_rad: float, mu: float = 0.6, extent: float = 20.0):
        n = 81
        xs = np.linspace(-extent / 2, extent / 2, n)
        grid = np.tile(np.tan(angle_rad) * xs, (n, 1))
        return Terrain(grid=grid, x0=-extent / 2, y0=-extent / 2,
                       dx=extent / (n - 1), mu=mu)


@dataclass
class PayloadEvent:
    time: float
    mass: float                  # signed payload delta (kg)
    offset: np.ndarray           # attachment point in the base frame


@dataclass
class SensorConfig:
    gyro_noise: float = 2e-3      # rad/s std per sample
    gyro_bias_walk: float = 2e-5
    accel_noise: float = 2e-2     # m/s^2 std
    accel_bias_walk: float = 2e-4
    joint_pos_noise: float = 0.0
    joint_vel_noise: float = 2e-3
    torque_noise: float = 0.3     # N m std, current-based measurement
    pressure_noise: float = 2.0   # N std


@dataclass
class ContactModel:
    stiffness: float = 3e4
    damping: float = 1e3
    v_slip: float = 0.01
    joint_damping: float = 0.08   # N m s/rad viscous actuator/joint friction


@dataclass
class RunMetrics:
    cost_of_transport: float | None
    distance: float
    falls: int
    mean_height_error: float
    mean_orientation_error: float
    estimator_pos_rmse: float
    mechanical_work: float
    duration: float

    def as_dict(self):
        return {
            "cost_of_transport": self.cost_of_transport,
            "distance": self.distance,
            "falls": self.falls,
            "mean_height_error": self.mean_height_error,
            "mean_orientation_error": self.mean_orientation_error,
            "estimator_pos_rmse": self.estimator_pos_rmse,
            "mechanical_work": self.mechanical_work,
            "duration": self.duration,
        }


class Plant:
    """Authoritative physics state plus sensor emulation."""

    def __init__(self, robot: modelmod.RobotModel, terrain: Terrain,
                 seed: int = 0, contact: ContactModel = None,
                 sensors: SensorConfig = None, substeps: int = 8,
                 control_dt: float = 5e-4):
        self.robot = robot
        self.terrain = terrain
        self.contact = contact or ContactModel()
        self.sensors = sensors or SensorConfig()
        self.rng = np.random.default_rng(seed)
        self.substeps = substeps
        self.control_dt = control_dt
        self.t = 0.0

        self.R = np.eye(3)
        self.p = np.zeros(3)
        self.u = np.zeros(18)
        self.q = robot.q_nominal.copy()
        self.udot = np.zeros(18)
        self.contact_F = np.zeros((4, 3))
        self.contact_flag = np.zeros(4, dtype=bool)
        self._gyro_bias = np.zeros(3)
        self._accel_bias = np.zeros(3)
        self._v_w_prev = np.zeros(3)

    def place_on_terrain(self, x=0.0, y=0.0, yaw=0.0, settle_gap=0.002):
        """Drop-in placement: feet just touching the local ground."""
        z = self.terrain.height(x, y)
        self.R = K.rot_z(yaw)
        self.p = np.array([x, y, z + self.robot.stance_height - settle_gap])
        self.q = self.robot.q_nominal.copy()
        self.u[:] = 0.0
        self._v_w_prev[:] = 0.0

    def step(self, tau: np.ndarray):
        """Advance one control tick (substeps inside the kernel)."""
        tau = np.clip(np.asarray(tau, dtype=float), self.robot.tau_min,
                      self.robot.tau_max)
        dt = self.control_dt / self.substeps
        F, flag, udot, ok = K.plant_substeps(
            *self.robot.pack, self.robot.gravity, self.R, self.p, self.u,
            self.q, tau, self.terrain.grid, self.terrain.x0, self.terrain.y0,
            self.terrain.dx, self.terrain.mu, self.contact.stiffness,
            self.contact.damping, self.contact.v_slip,
            self.contact.joint_damping, dt, self.substeps)
        self.contact_F = F
        self.contact_flag = flag
        self.udot = udot
        self.t += self.control_dt
        if not ok or not np.all(np.isfinite(self.p)):
            raise NumericalDivergence(
                f"plant diverged at t={self.t:.4f}s "
                f"(|u|max={np.max(np.abs(self.u)):.3g})")
        self.R = K.reorthonormalize(self.R)

    def payload_apply(self, event: PayloadEvent):
        """Instantaneous change of the true mass/COM; controllers are not
        informed (that is the adaptation filter's job)."""
        self.robot = modelmod.with_payload(self.robot, event.mass,
                                           event.offset)

    # ---- sensors --------------------------------------------------------
    def imu_sample(self, dt: float):
        """One IMU reading; the accelerometer integrates over the sample
        period (velocity difference), avoiding aliasing of contact ringing."""
        s = self.sensors
        self._gyro_bias += self.rng.normal(0.0, s.gyro_bias_walk, 3)
        self._accel_bias += self.rng.normal(0.0, s.accel_bias_walk, 3)
        gyro = self.u[0:3] + self._gyro_bias \
            + self.rng.normal(0.0, s.gyro_noise, 3)
        g_w = np.array([0.0, 0.0, -self.robot.gravity])
        v_w = self.R @ self.u[3:6]
        a_w = (v_w - self._v_w_prev) / dt
        self._v_w_prev = v_w
        spec = self.R.T @ (a_w - g_w)
        accel = spec + self._accel_bias + self.rng.normal(0.0, s.accel_noise,
                                                          3)
        return gyro, accel

    def joint_sample(self):
        s = self.sensors
        q = self.q + (self.rng.normal(0.0, s.joint_pos_noise, 12)
                      if s.joint_pos_noise > 0 else 0.0)
        qd = self.u[6:18] + self.rng.normal(0.0, s.joint_vel_noise, 12)
        return q, qd

    def torque_sample(self, tau_cmd):
        return tau_cmd + self.rng.normal(0.0, self.sensors.torque_noise, 12)

    def pressure_sample(self):
        if not self.robot.has_foot_pressure:
            return None
        fz = self.contact_F[:, 2] + self.rng.normal(
            0.0, self.sensors.pressure_noise, 4)
        return np.maximum(fz, 0.0)

    # ---- ground truth ----------------------------------------------------
    def roll_pitch(self):
        roll = np.arctan2(self.R[2, 1], self.R[2, 2])
        pitch = -np.arcsin(np.clip(self.R[2, 0], -1.0, 1.0))
        return roll, pitch

    def base_height_above_ground(self):
        return self.p[2] - self.terrain.height(self.p[0], self.p[1])


@dataclass
class FallDetector:
    height_frac: float = 0.4
    tilt_limit: float = np.deg2rad(60.0)
    hold_time: float = 0.2
    _below_since: float = None
    falls: int = 0
    fallen: bool = False

    def update(self, t, height_above_ground, nominal_height, roll, pitch):
        bad = (height_above_ground < self.height_frac * nominal_height
               or abs(roll) > self.tilt_limit
               or abs(pitch) > self.tilt_limit)
        if bad:
            if self._below_since is None:
                self._below_since = t
            elif t - self._below_since >= self.hold_time and not self.fallen:
                self.falls += 1
                self.fallen = True
        else:
            self._below_since = None
            self.fallen = False
        return self.fallen


class ZeroDistance(Exception):
    """No distance traveled; cost of transport is undefined."""


def compute_metrics(log: dict, mass: float, nominal_height: float,
                    gravity: float = 9.81) -> RunMetrics:
    """Run metrics from fixed-rate channel arrays.

    Positive-power convention: regenerated energy earns no credit. The cost
    of transport is absent (None) for runs that do not move.
    """
    t = np.asarray(log["t"])
    power = np.asarray(log["power_pos"])
    xy = np.stack([np.asarray(log["base_x"]), np.asarray(log["base_y"])],
                  axis=1)
    if len(t) < 2:
        raise ValueError("log too short for metrics")
    work = float(np.trapezoid(power, t))
    steps = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    distance = float(np.sum(steps))
    falls = int(log["falls"][-1]) if "falls" in log else 0
    height_err = np.asarray(log["height_err"])
    orient_err = np.asarray(log["orient_err"])
    est_err = np.asarray(log.get("est_pos_err", np.zeros_like(t)))
    cot = None
    if distance > 1e-3:
        cot = work / (mass * gravity * distance)
    return RunMetrics(
        cost_of_transport=cot,
        distance=distance,
        falls=falls,
        mean_height_error=float(np.mean(np.abs(height_err))),
        mean_orientation_error=float(np.mean(np.abs(orient_err))),
        estimator_pos_rmse=float(np.sqrt(np.mean(est_err ** 2))),
        mechanical_work=work,
        duration=float(t[-1] - t[0]),
    )
