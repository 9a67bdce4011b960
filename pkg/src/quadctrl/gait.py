"""Gait sequencing: fixed-parameter (SGS) and adaptive (AGS) trot scheduling.

Both sequencers produce per-leg phases in [0,1), a duty factor d and period T;
a leg is in contact iff phase < d. The adaptive sequencer retunes (T, d) from
the filtered body speed through a Froude-scaled stride law with constant swing
time, remaps phases so duty-factor changes never flip a contact state, and
servos the phase offsets toward the commanded gait pattern.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

TROT_OFFSETS = np.array([0.0, 0.5, 0.5, 0.0])  # FL, FR, HL, HR
T_SWING_DEFAULT = 0.2
SGS_DUTY = 0.6
SGS_PERIOD = 0.5

# guard keeping the offset-correction clamp strictly inside the stance
# interval, so the correction itself can never flip phase < d to false
PHASE_GUARD = 1e-9


@dataclass(frozen=True)
class GaitParams:
    duty: float
    period: float
    offsets: np.ndarray
    t_swing: float = T_SWING_DEFAULT

    def __post_init__(self):
        if not 0.0 < self.duty < 1.0:
            raise ValueError("duty factor must lie in (0,1)")
        if self.period <= 0.0:
            raise ValueError("period must be positive")
        if np.any(self.offsets < 0.0) or np.any(self.offsets >= 1.0):
            raise ValueError("offsets must lie in [0,1)")


@dataclass(frozen=True)
class GaitState:
    phase: np.ndarray          # (4,) in [0,1)
    params: GaitParams
    reference_leg: int = 0


@dataclass(frozen=True)
class ContactPlan:
    contact: np.ndarray        # (N,4) bool
    base_pos: np.ndarray       # (N,3) world reference positions
    base_yaw: np.ndarray       # (N,)
    base_vel: np.ndarray       # (N,3)
    yaw_rate: np.ndarray       # (N,)
    dt: float


@dataclass
class AgsConfig:
    t_swing: float = T_SWING_DEFAULT
    stride_coeff: float = 2.3
    stride_exp: float = 0.3
    v_min: float = 0.1          # below: period clamped
    v_stand: float = 0.02       # below: all-stance stand
    period_max: float = 1.0
    vel_filter_tau: float = 0.5
    gravity: float = 9.81


def ags_select_params(v: float, h: float, cfg: AgsConfig = None) -> GaitParams:
    """Stage-1 parameter selection from body speed and COM height.

    Froude-scaled stride length sets the period; the duty factor follows from
    a constant swing time. Below v_min the period is clamped to period_max so
    the schedule never degenerates; at near-zero speed callers should switch
    to stand (see stand_params).
    """
    cfg = cfg or AgsConfig()
    if h <= 0.0:
        raise ValueError("COM height must be positive")
    v_eff = max(float(v), cfg.v_min)
    froude = v_eff * v_eff / (cfg.gravity * h)
    stride = cfg.stride_coeff * froude ** cfg.stride_exp * h
    period = min(stride / v_eff, cfg.period_max)
    duty = (period - cfg.t_swing) / period
    return GaitParams(duty=duty, period=period, offsets=TROT_OFFSETS.copy(),
                      t_swing=cfg.t_swing)


def sgs_params(t_swing: float = T_SWING_DEFAULT) -> GaitParams:
    return GaitParams(duty=SGS_DUTY, period=SGS_PERIOD,
                      offsets=TROT_OFFSETS.copy(), t_swing=t_swing)


def stand_params() -> GaitParams:
    """All-stance schedule used below the stand threshold."""
    return GaitParams(duty=1.0 - 1e-9, period=SGS_PERIOD,
                      offsets=np.zeros(4), t_swing=0.0)


def phase_advance_consistent(phase_prev, d_prev: float, d_new: float,
                             dt: float, period: float):
    """Advance phases by dt/period, then remap so contact states survive a
    duty-factor change: stance phases rescale onto [0, d_new), swing phases
    map affinely onto [d_new, 1)."""
    phi = (np.asarray(phase_prev, dtype=float) + dt / period) % 1.0
    stance = phi < d_prev
    out = np.where(
        stance,
        phi * (d_new / d_prev),
        (phi - d_prev) * (1.0 - d_new) / (1.0 - d_prev) + d_new,
    )
    return out % 1.0


def contact_state(state: GaitState) -> np.ndarray:
    """Per-leg contact flags: leg i is in contact iff phase_i < d."""
    return state.phase < state.params.duty


def _reference_leg(phase: np.ndarray, duty: float) -> int:
    swing = phase >= duty
    if np.any(swing):
        # longest remaining swing time = smallest swing phase
        cand = np.where(swing, phase, np.inf)
        return int(np.argmin(cand))
    # all in stance: leg closest to swing onset
    return int(np.argmax(phase))


def phase_offset_correct(state: GaitState, offsets_desired: np.ndarray,
                         dt: float, anchor: float = None) -> GaitState:
    """Servo stance-leg phases toward the desired offset pattern.

    The per-step correction is capped at dt/(2T) so any offset error is gone
    within two gait cycles, and stance phases are clamped to [0, d) so the
    correction never toggles a contact state. The pattern anchor defaults to
    the reference leg (longest remaining swing time, or closest to swing onset
    when all legs stand); the sequencer passes its persistent gait clock
    instead so the anchor does not jump when the reference leg changes.
    """
    params = state.params
    phase = state.phase.copy()
    d = params.duty
    ref = _reference_leg(phase, d)
    if anchor is None:
        anchor = phase[ref] + offsets_desired[ref]
    theta_now = anchor - phase
    err = ((theta_now - offsets_desired + 0.5) % 1.0) - 0.5
    cap = dt / (2.0 * params.period)
    for i in range(4):
        if phase[i] >= d:
            continue  # swing legs are left untouched
        if err[i] >= 0.0:
            phase[i] = min(phase[i] + min(err[i], cap), d - PHASE_GUARD)
        else:
            phase[i] = max(phase[i] + max(err[i], -cap), 0.0)
    return replace(state, phase=phase, reference_leg=ref)


def offset_errors(state: GaitState, offsets_desired: np.ndarray) -> np.ndarray:
    """Wrapped per-leg offset errors in [-0.5, 0.5]."""
    phase = state.phase
    ref = _reference_leg(phase, state.params.duty)
    theta_now = phase[ref] + offsets_desired[ref] - phase
    return ((theta_now - offsets_desired + 0.5) % 1.0) - 0.5


def sgs_step(state: GaitState, dt: float) -> GaitState:
    """Fixed-parameter sequencer: pure modular phase advance."""
    phase = (state.phase + dt / state.params.period) % 1.0
    return replace(state, phase=phase)


def roll_out_contact_plan(state: GaitState, horizon: int, mpc_dt: float,
                          base_pos=None, base_yaw: float = 0.0,
                          vel_cmd=None, yaw_rate: float = 0.0) -> ContactPlan:
    """Contact schedule plus base reference over the MPC horizon.

    Gait parameters are frozen across the horizon; the base reference
    integrates the velocity command from the current estimate.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    params = state.params
    base_pos = np.zeros(3) if base_pos is None else np.asarray(
        base_pos, dtype=float)
    vel_cmd = np.zeros(3) if vel_cmd is None else np.asarray(
        vel_cmd, dtype=float)
    contact = np.zeros((horizon, 4), dtype=bool)
    pos = np.zeros((horizon, 3))
    yaw = np.zeros(horizon)
    vel = np.zeros((horizon, 3))
    wz = np.zeros(horizon)
    phase = state.phase.copy()
    p = base_pos.copy()
    psi = base_yaw
    for k in range(horizon):
        phase = (phase + mpc_dt / params.period) % 1.0
        psi += yaw_rate * mpc_dt
        cy, sy = np.cos(psi), np.sin(psi)
        v_world = np.array([cy * vel_cmd[0] - sy * vel_cmd[1],
                            sy * vel_cmd[0] + cy * vel_cmd[1], vel_cmd[2]])
        p = p + v_world * mpc_dt
        contact[k] = phase < params.duty
        pos[k] = p
        yaw[k] = psi
        vel[k] = v_world
        wz[k] = yaw_rate
    return ContactPlan(contact=contact, base_pos=pos, base_yaw=yaw,
                       base_vel=vel, yaw_rate=wz, dt=mpc_dt)


@dataclass
class GaitSequencer:
    """Stateful wrapper running either sequencer inside the control loop.

    mode "sgs": constant parameters, plain phase advance, no correction.
    mode "ags": stage-1 reparameterization from filtered speed, consistent
    phase remap, offset correction; drops to stand below the stand threshold.
    """
    mode: str = "ags"
    cfg: AgsConfig = field(default_factory=AgsConfig)
    sgs_duty: float = SGS_DUTY
    sgs_period: float = SGS_PERIOD
    offsets: np.ndarray = field(default_factory=lambda: TROT_OFFSETS.copy())
    state: GaitState = None
    v_filt: float = 0.0
    standing: bool = True
    clock: float = None  # persistent pattern anchor, advances at 1/T

    def __post_init__(self):
        if self.mode not in ("sgs", "ags"):
            raise ValueError(f"unknown gait mode '{self.mode}'")
        if self.state is None:
            params = self._sgs_params() if self.mode == "sgs" \
                else stand_params()
            self.state = GaitState(phase=self.offsets.copy(), params=params)
            self.standing = self.mode != "sgs"
        if self.clock is None:
            ref = _reference_leg(self.state.phase, self.state.params.duty)
            self.clock = float(
                (self.state.phase[ref] + self.offsets[ref]) % 1.0)

    def _sgs_params(self):
        return GaitParams(duty=self.sgs_duty, period=self.sgs_period,
                          offsets=self.offsets.copy(), t_swing=self.cfg.t_swing)

    def step(self, dt: float, speed: float, com_height: float) -> GaitState:
        if self.mode == "sgs":
            self.state = sgs_step(self.state, dt)
            return self.state
        # first-order speed filter guards the stride law against chatter
        alpha = dt / (self.cfg.vel_filter_tau + dt)
        self.v_filt += alpha * (float(speed) - self.v_filt)
        if self.v_filt < self.cfg.v_stand:
            if not self.standing:
                self.state = GaitState(phase=np.zeros(4),
                                       params=stand_params())
                self.standing = True
            return self.state
        if self.standing:
            # leave stand: restart the trot pattern from the offsets
            params = ags_select_params(self.v_filt, com_height, self.cfg)
            self.state = GaitState(phase=self.offsets.copy(), params=params)
            self.standing = False
            ref = _reference_leg(self.state.phase, params.duty)
            self.clock = float(
                (self.state.phase[ref] + self.offsets[ref]) % 1.0)
            return self.state
        prev = self.state.params
        params = ags_select_params(self.v_filt, com_height, self.cfg)
        phase = phase_advance_consistent(self.state.phase, prev.duty,
                                         params.duty, dt, params.period)
        # the anchor is advanced and duty-remapped exactly like a leg phase
        self.clock = float(phase_advance_consistent(
            np.array([self.clock]), prev.duty, params.duty, dt,
            params.period)[0])
        state = GaitState(phase=phase, params=params,
                          reference_leg=self.state.reference_leg)
        self.state = phase_offset_correct(state, self.offsets, dt,
                                          anchor=self.clock)
        return self.state
