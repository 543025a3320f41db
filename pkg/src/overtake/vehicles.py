"""Vehicle motion models.

Nonlinear kinematic bicycle plant in the moving, overtaken-vehicle-centered
frame (forward Euler), plus the small-angle, decoupled linear models that the
two predictive controllers are built on.
"""

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SimParams:
    """Sampling and plant parameters shared by plant and controllers."""

    dt: float = 0.1        # sampling interval [s]
    l: float = 2.5         # EV wheelbase [m]
    t_total: float = 50.0  # total simulated time [s]
    g: float = 9.81        # carried for configuration completeness; unused

    def __post_init__(self):
        if not (self.dt > 0.0):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.l <= 0.0:
            raise ValueError(f"wheelbase must be positive, got {self.l}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_total / self.dt))


@dataclass(frozen=True)
class VehicleLimits:
    """Actuator and state bounds for the ego (EV) and overtaken (OV) vehicles."""

    v_max: float = 19.67                    # EV speed cap [m/s]
    v_min: float = 0.0
    vo_max: float = 17.88                   # OV speed cap [m/s]
    vo_min: float = 0.0
    a_max: float = 2.33                     # accel bounds, both vehicles [m/s^2]
    a_min: float = -6.5
    delta_max: float = math.radians(5.0)    # steering bound [rad]
    psi_max: float = math.radians(5.0)      # heading bound [rad]

    @property
    def delta_min(self) -> float:
        return -self.delta_max

    @property
    def psi_min(self) -> float:
        return -self.psi_max


@dataclass(frozen=True)
class WorldState:
    """EV pose/speed relative to the OV center, plus the OV speed.

    s_x, s_y are the EV geometric-center offsets from the OV center [m];
    psi is the EV heading relative to the OV longitudinal axis [rad].
    """

    s_x: float
    s_y: float
    psi: float
    v: float
    v_o: float

    def as_array(self) -> np.ndarray:
        return np.array([self.s_x, self.s_y, self.psi, self.v, self.v_o])


@dataclass(frozen=True)
class ControlInput:
    a: float       # EV forward acceleration [m/s^2]
    delta: float   # EV front-wheel steering angle [rad]


@dataclass(frozen=True)
class LtvLateralModel:
    """Per-step (A, B) pairs of the lateral LTV prediction model.

    State [s_y, psi]; input delta. A_seq[k] = [[1, v_k dt], [0, 1]] and
    B_seq[k] = [0, v_k dt / l] for the exogenous speed v_k.
    """

    A_seq: np.ndarray  # (N, 2, 2)
    B_seq: np.ndarray  # (N, 2, 1)


def step_plant(state: WorldState, inp: ControlInput, ov_accel: float,
               params: SimParams, limits: VehicleLimits | None = None) -> WorldState:
    """One forward-Euler step of the nonlinear plant.

    The caller is responsible for saturating the inputs; the OV speed is
    clamped to its bounds after the update (guards profile playback).
    """
    vals = (state.s_x, state.s_y, state.psi, state.v, state.v_o,
            inp.a, inp.delta, ov_accel)
    if not all(math.isfinite(x) for x in vals):
        raise ValueError("non-finite state or input")
    if abs(state.psi) > math.pi / 2:
        raise ValueError(f"heading out of range: psi={state.psi:.4f} rad")
    dt = params.dt
    if limits is None:
        limits = VehicleLimits()

    s_x = state.s_x + (state.v * math.cos(state.psi) - state.v_o) * dt
    s_y = state.s_y + state.v * math.sin(state.psi) * dt
    psi = state.psi + state.v * math.tan(inp.delta) / params.l * dt
    v = state.v + inp.a * dt
    v_o = state.v_o + ov_accel * dt
    v_o = min(max(v_o, limits.vo_min), limits.vo_max)
    v = max(v, 0.0)
    return WorldState(s_x=s_x, s_y=s_y, psi=psi, v=v, v_o=v_o)


def step_linear(state: WorldState, inp: ControlInput, ov_accel: float,
                params: SimParams) -> WorldState:
    """Small-angle counterpart of step_plant (decoupled design model)."""
    dt = params.dt
    return WorldState(
        s_x=state.s_x + (state.v - state.v_o) * dt,
        s_y=state.s_y + state.v * state.psi * dt,
        psi=state.psi + state.v * inp.delta / params.l * dt,
        v=state.v + inp.a * dt,
        v_o=state.v_o + ov_accel * dt,
    )


def lateral_ltv(v_star_seq, params: SimParams, N: int | None = None) -> LtvLateralModel:
    """Build the lateral LTV matrices from an exogenous EV speed sequence."""
    v = np.asarray(v_star_seq, dtype=float).ravel()
    if N is None:
        N = v.size
    if v.size < N:
        raise ValueError(f"speed sequence too short: {v.size} < {N}")
    A = np.zeros((N, 2, 2))
    B = np.zeros((N, 2, 1))
    A[:, 0, 0] = 1.0
    A[:, 1, 1] = 1.0
    A[:, 0, 1] = v[:N] * params.dt
    B[:, 1, 0] = v[:N] * params.dt / params.l
    return LtvLateralModel(A_seq=A, B_seq=B)


def ov_model(params: SimParams):
    """OV prediction model: state [s_x, v_o], input a_o, exogenous EV speed."""
    dt = params.dt
    A_o = np.array([[1.0, -dt], [0.0, 1.0]])
    B_o = np.array([[0.0], [dt]])
    E_o = np.array([[dt], [0.0]])
    return A_o, B_o, E_o

def longitudinal_model(params: SimParams):
    """EV longitudinal model: state [s_x, v, v_o], input a, disturbance a_o."""
    dt = params.dt
    A_x = np.array([[1.0, dt, -dt],
                    [0.0, 1.0, 0.0],
                    [0.0, 0.0, 1.0]])
    B_x = np.array([[0.0], [dt], [0.0]])
    E_x = np.array([[0.0], [0.0], [dt]])
    return A_x, B_x, E_x


def linearization_report(state: WorldState, input_seq, ov_accel_seq,
                         params: SimParams, N: int | None = None) -> dict:
    """Max absolute divergence per state between the nonlinear and the
    small-angle rollouts driven by the same inputs from the same state."""
    if N is None:
        N = len(input_seq)
    big = VehicleLimits(v_max=np.inf, vo_max=np.inf, vo_min=-np.inf)
    nl, lin = state, state
    worst = {k: 0.0 for k in ("s_x", "s_y", "psi", "v", "v_o")}
    for k in range(N):
        inp = input_seq[k]
        a_o = ov_accel_seq[k] if np.ndim(ov_accel_seq) else float(ov_accel_seq)
        nl = step_plant(nl, inp, a_o, params, limits=big)
        lin = step_linear(lin, inp, a_o, params)
        for key in worst:
            err = abs(getattr(nl, key) - getattr(lin, key))
            worst[key] = max(worst[key], err)
    return worst
