"""Run-quality metrics: pure functions of a recorded trace.

Window conventions
------------------
* cut-in window: from the first cycle after the pass where the lateral
  reference drops back to the own-lane center, until ``s_y`` first
  settles within 0.05 m of that center (or the trace ends).  Heading
  and lateral-acceleration RMS are taken over this window; they are NaN
  when the run never entered a cut-in phase.
* lane occupancy: total time with the EV center past the lane divider
  (``s_y > W_l / 2``).
* headway after merge-back: once the EV has been in the overtaking lane
  and is back under the divider with a positive gap, the headway time
  is ``s_x / v_o``; the metric is the minimum over those cycles and is
  absent (None) when the run never merges back.
* lateral distance during the pass: center-to-center offset ``|s_y|``
  minimized over the cycles where the vehicles overlap longitudinally
  (``|s_x| <= L_v``); absent when they never do.  Centers, not edges:
  the 1 m critical floor below is calibrated against this distance (an
  edge-to-edge reading at the passing offset sits near 0.4 m even for a
  textbook pass, which would flag every run).

Lateral acceleration uses the kinematic steady-state map
``a_y = v^2 * delta / wheelbase``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import OccupancyParams, derive_params
from .traceio import TraceLog

SETTLE_TOL = 0.05           # merge-back settle band around the lane center [m]
CRITICAL_HEADWAY = 0.8      # sweep flag threshold: headway time [s]
CRITICAL_CLEARANCE = 1.0    # sweep flag threshold: lateral clearance [m]
_V_FLOOR = 0.1              # below this OV speed the headway time is infinite


@dataclass
class Metrics:
    rms_heading_deg: float
    rms_lateral_accel: float
    lane_occupancy_time: float
    min_headway_time: float | None
    min_lateral_distance: float | None
    collision: bool
    completed_overtake: bool
    mean_wall_time: float
    max_wall_time: float
    n_steps: int
    aborted: bool

    def as_dict(self) -> dict:
        return asdict(self)

    @property
    def critical(self) -> bool:
        """Pareto-sweep flag: the run crossed a safety floor."""
        if self.collision:
            return True
        if self.min_headway_time is not None \
                and self.min_headway_time < CRITICAL_HEADWAY:
            return True
        if self.min_lateral_distance is not None \
                and self.min_lateral_distance < CRITICAL_CLEARANCE:
            return True
        return False


def cut_in_window(trace: TraceLog, settle_tol: float = SETTLE_TOL):
    """Index range [start, stop) of the merge-back maneuver, or None."""
    targets = trace.column("s_y_target")
    away = np.flatnonzero(targets > 0.0)
    if away.size == 0:
        return None
    start = int(away[-1]) + 1
    if start >= len(trace):
        return None
    s_y = trace.column("s_y")[start:]
    settled = np.flatnonzero(np.abs(s_y) <= settle_tol)
    stop = start + int(settled[0]) + 1 if settled.size else len(trace)
    return start, stop


def _geom_from_echo(echo: dict) -> OccupancyParams:
    fp = echo.get("footprint", {})
    lim = echo.get("limits", {})
    kwargs = {}
    if "length" in fp:
        kwargs["L_v"] = float(fp["length"])
    if "width" in fp:
        kwargs["W_v"] = float(fp["width"])
    if "lane_width" in fp:
        kwargs["W_l"] = float(fp["lane_width"])
    if "standstill_gap" in fp:
        kwargs["d_X0"] = float(fp["standstill_gap"])
    if "min_headway_time" in fp:
        kwargs["t_min"] = float(fp["min_headway_time"])
    if "psi_max_deg" in lim:
        kwargs["psi_max"] = math.radians(float(lim["psi_max_deg"]))
    return derive_params(**kwargs)


def compute_metrics(trace: TraceLog, geom: OccupancyParams | None = None,
                    wheelbase: float | None = None) -> Metrics:
    """Score one closed-loop trace.

    Geometry and wheelbase default to the scenario echo carried by the
    trace, then to the library defaults, so a bare reloaded trace can
    still be scored.
    """
    if geom is None:
        geom = _geom_from_echo(trace.config_echo)
    if wheelbase is None:
        wheelbase = float(trace.config_echo.get("sim", {})
                          .get("wheelbase", 2.5))
    if not trace.records:
        return Metrics(rms_heading_deg=float("nan"),
                       rms_lateral_accel=float("nan"),
                       lane_occupancy_time=0.0, min_headway_time=None,
                       min_lateral_distance=None, collision=False,
                       completed_overtake=False, mean_wall_time=0.0,
                       max_wall_time=0.0, n_steps=0, aborted=trace.aborted)

    t = trace.column("t")
    dt = float(t[1] - t[0]) if len(trace) > 1 else 0.0
    s_x = trace.column("s_x")
    s_y = trace.column("s_y")
    psi = trace.column("psi")
    v = trace.column("v")
    v_o = trace.column("v_o")
    delta = trace.column("delta_cmd")
    overlap = trace.column("overlap").astype(bool)
    wall = trace.column("wall_time")

    window = cut_in_window(trace)
    if window is None:
        rms_psi = float("nan")
        rms_ay = float("nan")
    else:
        lo, hi = window
        a_y = v[lo:hi] ** 2 * delta[lo:hi] / wheelbase
        rms_psi = math.degrees(float(np.sqrt(np.mean(psi[lo:hi] ** 2))))
        rms_ay = float(np.sqrt(np.mean(a_y ** 2)))

    divider = geom.W_l / 2.0
    in_lane = s_y > divider
    occupancy = float(in_lane.sum()) * dt

    min_headway = None
    merged_back = False
    if in_lane.any():
        first_out = int(np.flatnonzero(in_lane)[0])
        back = np.zeros(len(trace), dtype=bool)
        back[first_out:] = ~in_lane[first_out:]
        merged_back = bool(back.any())
        ahead = back & (s_x > 0.0)
        if ahead.any():
            times = np.where(v_o[ahead] > _V_FLOOR,
                             s_x[ahead] / np.maximum(v_o[ahead], _V_FLOOR),
                             np.inf)
            min_headway = float(times.min())

    alongside = np.abs(s_x) <= geom.L_v
    min_clearance = None
    if alongside.any():
        min_clearance = float(np.abs(s_y[alongside]).min())

    collision = bool(overlap.any())
    completed = merged_back and bool(s_x[-1] > 0.0) and not collision \
        and not trace.aborted

    return Metrics(
        rms_heading_deg=rms_psi, rms_lateral_accel=rms_ay,
        lane_occupancy_time=occupancy, min_headway_time=min_headway,
        min_lateral_distance=min_clearance, collision=collision,
        completed_overtake=completed,
        mean_wall_time=float(wall.mean()), max_wall_time=float(wall.max()),
        n_steps=len(trace), aborted=trace.aborted)
