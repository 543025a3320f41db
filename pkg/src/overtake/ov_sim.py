"""Ground-truth behavior of the overtaken vehicle for closed-loop runs.

Three driver archetypes: pure playback of a recorded speed profile, a
polite driver who opens up headway for the passing car, and an
aggressive one who instead speeds up toward the limit while being
passed.  The interactive archetypes run a short-horizon tracking
optimizer of the same shape as the yielding-driver model inside the
planner, differing only in weights and speed reference.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .geometry import OccupancyParams
from .lateral import _stage_cost
from .qp import DenseQP, condense_ov, solve_qp
from .uncertainty import VarianceCurve, variance_for_state
from .vehicles import SimParams, VehicleLimits, WorldState

log = logging.getLogger(__name__)

__all__ = [
    "SpeedProfile", "OvBehavior", "OvConfig", "OvSimulator",
    "load_speed_profile", "make_behavior", "interaction_window", "ov_step",
]

_MODES = ("non_interactive", "polite", "aggressive")

# default weight presets (headway tracking, speed tracking, effort);
# the polite driver prioritizes headway, the aggressive one speed
_PRESETS = {
    "non_interactive": (0.0, 0.0, 1.0),
    "polite": (0.08, 0.02, 4.0),
    "aggressive": (0.002, 1.2, 4.0),
}


@dataclass
class SpeedProfile:
    """Piecewise-linear speed-over-time interpolant, ends held constant."""

    times: np.ndarray
    speeds: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).ravel()
        self.speeds = np.asarray(self.speeds, dtype=float).ravel()

    def __call__(self, t):
        out = np.interp(t, self.times, self.speeds)
        return float(out) if np.ndim(t) == 0 else out


def load_speed_profile(path, v_cap=17.88) -> SpeedProfile:
    """Read a two-column (time [s], speed [m/s]) CSV; header optional."""
    df = pd.read_csv(path, header=None, comment="#")
    if df.shape[1] < 2:
        raise ValueError("profile needs two columns: time, speed")
    num = df.iloc[:, :2].apply(pd.to_numeric, errors="coerce").dropna()
    if num.empty:
        raise ValueError("profile file contains no numeric rows")
    t = num.iloc[:, 0].to_numpy(dtype=float)
    v = num.iloc[:, 1].to_numpy(dtype=float)
    if np.any(np.diff(t) <= 0):
        raise ValueError("profile timestamps must be strictly increasing")
    if np.any(v < 0):
        raise ValueError("profile speeds must be nonnegative")
    return SpeedProfile(times=t, speeds=np.minimum(v, v_cap))


@dataclass
class OvBehavior:
    """Archetype definition: mode, tracking weights and base profile."""

    mode: str
    base_profile: SpeedProfile
    w_gap: float
    w_speed: float
    w_accel: float
    t_target: float = 2.0     # headway time whose gap ends the interaction [s]

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if min(self.w_gap, self.w_speed, self.w_accel) < 0:
            raise ValueError("weights must be nonnegative")
        if self.mode == "polite" and self.w_gap <= self.w_speed:
            raise ValueError("a polite driver weights headway over speed")
        if self.mode == "aggressive" and self.w_speed <= self.w_gap:
            raise ValueError("an aggressive driver weights speed over headway")


def make_behavior(mode, base_profile, **overrides) -> OvBehavior:
    """Behavior with the preset weights for ``mode``, plus overrides."""
    w_gap, w_speed, w_accel = _PRESETS[mode]
    kw = dict(w_gap=w_gap, w_speed=w_speed, w_accel=w_accel)
    kw.update(overrides)
    return OvBehavior(mode=mode, base_profile=base_profile, **kw)


@dataclass(frozen=True)
class OvConfig:
    sim: SimParams
    limits: VehicleLimits
    geom: OccupancyParams
    horizon: int = 20


def interaction_window(s_x, v_o, geom: OccupancyParams, t_target=2.0) -> bool:
    """True while the passing car is merging in front but not yet clear.

    Opens once the gap reaches the front edge of the occupied region and
    closes when it exceeds the driver's target headway distance.
    """
    return geom.s_Xd <= s_x <= geom.d_X0 + v_o * t_target


def _profile_tracking(ov_speed, behavior, cfg, t):
    """Acceleration that lands on the base profile one step ahead."""
    target = behavior.base_profile(t + cfg.sim.dt)
    a = (target - ov_speed) / cfg.sim.dt
    return float(np.clip(a, cfg.limits.a_min, cfg.limits.a_max))


def _window_qp(ov_speed, s_x, v_ev, behavior, cfg, t):
    """Short-horizon tracking problem in the yielding-driver form."""
    N = cfg.horizon
    lim = cfg.limits
    system = condense_ov([s_x, ov_speed], np.full(N, v_ev), N, cfg.sim)
    if behavior.mode == "aggressive":
        v_ref = lim.vo_max
    else:
        v_ref = behavior.base_profile(t)
    s_ref = cfg.geom.d_X0 + ov_speed * behavior.t_target
    Q = np.diag([behavior.w_gap, behavior.w_speed, behavior.w_accel])
    H, g, _ = _stage_cost(system, Q, np.array([s_ref, v_ref, 0.0]))
    lb = np.tile([lim.vo_min, lim.a_min], N + 1)
    ub = np.tile([lim.vo_max, lim.a_max], N + 1)
    sol = solve_qp(DenseQP(H, g, A_ineq=system.Df, lb=lb - system.f_const(),
                           ub=ub - system.f_const()))
    if sol.status != "optimal":
        raise RuntimeError(f"behavior QP {sol.status}")
    return float(sol.u_star[0])


def ov_step(ov_speed, relative_state, behavior: OvBehavior, cfg: OvConfig,
            t=0.0, info=None) -> float:
    """One reaction of the overtaken driver; returns its acceleration.

    ``relative_state`` is (s_x, ev_speed) or a full world state.  The
    optimizer runs only inside the interaction window; outside it — and
    on solver failure, which is flagged — the driver tracks the profile.
    """
    if isinstance(relative_state, WorldState):
        s_x, v_ev = relative_state.s_x, relative_state.v
    else:
        s_x, v_ev = float(relative_state[0]), float(relative_state[1])
    if info is None:
        info = {}
    info.update(interactive=False, fallback=False)
    lim = cfg.limits
    if (behavior.mode == "non_interactive"
            or not interaction_window(s_x, ov_speed, cfg.geom,
                                      behavior.t_target)):
        return _profile_tracking(ov_speed, behavior, cfg, t)
    try:
        a = _window_qp(ov_speed, s_x, v_ev, behavior, cfg, t)
        info["interactive"] = True
    except (RuntimeError, ValueError) as exc:
        log.warning("behavior QP failed (%s); tracking profile instead", exc)
        info["fallback"] = True
        return _profile_tracking(ov_speed, behavior, cfg, t)
    return float(np.clip(a, lim.a_min, lim.a_max))


class OvSimulator:
    """Per-scenario stateful wrapper: seeded noise and bookkeeping."""

    def __init__(self, behavior: OvBehavior, cfg: OvConfig,
                 noise_curve: VarianceCurve | None = None, seed=0):
        self.behavior = behavior
        self.cfg = cfg
        self.noise_curve = noise_curve
        self.seed = seed
        self.reset()

    def reset(self):
        self._rng = np.random.default_rng(self.seed)
        self.fallback_count = 0
        self.last_info: dict = {}

    def step(self, t, state: WorldState) -> float:
        info: dict = {}
        a = ov_step(state.v_o, state, self.behavior, self.cfg, t, info=info)
        if info["fallback"]:
            self.fallback_count += 1
        if self.noise_curve is not None and info["interactive"]:
            sigma = np.sqrt(variance_for_state(state.s_x, state.v_o,
                                               self.noise_curve))
            a += float(self._rng.normal(0.0, sigma))
            a = float(np.clip(a, self.cfg.limits.a_min, self.cfg.limits.a_max))
        self.last_info = info
        return a
