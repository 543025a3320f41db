"""Arc-polygon occupancy geometry and moving collision boundaries.

Each vehicle's occupancy is an axis-aligned arc-polygon: the intersection of
the disk of radius r about the vehicle center with the strip |y| <= d_Y0.
The overtaking corridor for the EV center is a piecewise-linear boundary
(blue/green/purple segments) in the OV-centered frame, enforced as a single
half-plane per prediction step.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfinv


@dataclass(frozen=True)
class OccupancyParams:
    L_v: float       # vehicle length [m]
    W_v: float       # vehicle width [m]
    r: float         # half-diagonal [m]
    theta: float     # diagonal angle [rad]
    psi_max: float   # max heading used to inflate the occupancy [rad]
    d_Y0: float      # arc-polygon half-width [m]
    s_Yc: float      # minimum lateral separation = 2 d_Y0 [m]
    s_Xb: float      # green-segment left endpoint [m]
    s_Xd: float      # green-segment right endpoint [m]
    d_X0: float      # standstill headway distance [m]
    t_min: float     # minimum headway time [s]
    W_l: float       # lane width [m]


@dataclass(frozen=True)
class BoundaryLine:
    p: int      # phase index: 1 approach, 2 alongside, 3 return
    k: float    # slope
    b: float    # intercept [m]

    def value(self, s_x):
        return self.k * s_x + self.b


def derive_params(L_v=4.4, W_v=1.82, psi_max=math.radians(5.0),
                  d_X0=6.08, t_min=1.5, W_l=3.65) -> OccupancyParams:
    """Derive the arc-polygon constants from the vehicle footprint."""
    if L_v <= 0 or W_v <= 0:
        raise ValueError("vehicle footprint must be positive")
    two_r = math.hypot(L_v, W_v)
    r = 0.5 * two_r
    theta = math.atan2(W_v, L_v)
    if not (0.0 <= psi_max < math.pi / 2 - theta):
        raise ValueError(f"psi_max={psi_max} outside [0, pi/2 - theta)")
    d_Y0 = r * math.sin(theta + psi_max)
    s_Yc = 2.0 * d_Y0
    if s_Yc >= two_r:
        raise ValueError("lateral separation exceeds diagonal; geometry degenerate")
    s_Xd = math.sqrt(two_r ** 2 - s_Yc ** 2)
    return OccupancyParams(L_v=L_v, W_v=W_v, r=r, theta=theta, psi_max=psi_max,
                           d_Y0=d_Y0, s_Yc=s_Yc, s_Xb=-s_Xd, s_Xd=s_Xd,
                           d_X0=d_X0, t_min=t_min, W_l=W_l)


def anchor_x(v_ev: float, v_ov: float, params: OccupancyParams):
    """Far anchor abscissas of the approach/return boundary segments."""
    if v_ev < 0 or v_ov < 0:
        raise ValueError("anchor speeds must be nonnegative")
    s_Xa = -(params.d_X0 + v_ev * params.t_min)
    s_Xe = params.d_X0 + v_ov * params.t_min
    return s_Xa, s_Xe


def line_for_phase(p: int, s_Xa: float, s_Xe: float,
                   params: OccupancyParams) -> BoundaryLine:
    """Half-plane coefficients k, b with k*s_x + b <= s_y per phase.

    The approach line joins (s_Xa, 0) to (s_Xb, s_Yc); the return line joins
    (s_Xd, s_Yc) to (s_Xe, 0); alongside is the flat segment at s_Yc.
    """
    if p == 2:
        return BoundaryLine(p=2, k=0.0, b=params.s_Yc)
    if p == 1:
        den = params.s_Xb - s_Xa
        if den <= 0:
            raise ValueError(f"degenerate approach anchor: s_Xa={s_Xa}")
        k = params.s_Yc / den
        return BoundaryLine(p=1, k=k, b=-k * s_Xa)
    if p == 3:
        den = s_Xe - params.s_Xd
        if den <= 0:
            raise ValueError(f"degenerate return anchor: s_Xe={s_Xe}")
        k = -params.s_Yc / den
        return BoundaryLine(p=3, k=k, b=-k * s_Xe)
    raise ValueError(f"phase must be 1, 2, or 3, got {p}")


def active_phase(s_x_pred: float, params: OccupancyParams) -> int:
    """Phase from predicted longitudinal offset; ties go to the flat phase."""
    if s_x_pred < params.s_Xb:
        return 1
    if s_x_pred > params.s_Xd:
        return 3
    return 2


def road_bounds(params: OccupancyParams):
    """EV-center lateral corridor implied by the two-lane road edges."""
    return (-params.W_l / 2.0 + params.d_Y0,
            3.0 * params.W_l / 2.0 - params.d_Y0)


def polygons_overlap(ev_pose, ov_pose, params: OccupancyParams) -> bool:
    """Exact interior-overlap test for two axis-aligned arc-polygons.

    Independent of the half-plane machinery: slices both sets along y and
    compares the summed half-widths sqrt(r^2 - .^2) against the center gap.
    Boundary contact (shared boundary, empty interior) reports False.
    """
    dx = float(ev_pose[0]) - float(ov_pose[0])
    dy = float(ev_pose[1]) - float(ov_pose[1])
    r, d = params.r, params.d_Y0
    lo = max(-d, dy - d)
    hi = min(d, dy + d)
    if lo >= hi:            # strips don't share an open y-interval
        return False
    # summed slice half-width is concave in y; unconstrained max at y = dy/2
    y = min(max(dy / 2.0, lo), hi)
    w = math.sqrt(max(r * r - y * y, 0.0)) \
        + math.sqrt(max(r * r - (y - dy) ** 2, 0.0))
    return w > abs(dx)


def predict_offsets(s_x0: float, v_seq, vo_seq, dt: float) -> np.ndarray:
    """Roll the relative longitudinal offset under exogenous speed sequences.

    Returns N+1 offsets for N speed pairs: s_x(k+1) = s_x(k) + (v_k - vo_k) dt.
    """
    v = np.asarray(v_seq, dtype=float).ravel()
    vo = np.asarray(vo_seq, dtype=float).ravel()
    if v.shape != vo.shape:
        raise ValueError("speed sequences must have equal length")
    out = np.empty(v.size + 1)
    out[0] = s_x0
    np.cumsum((v - vo) * dt, out=out[1:])
    out[1:] += s_x0
    return out


def boundary_sequence(s_x_pred, v_anchor_seq, vo_anchor_seq,
                      params: OccupancyParams):
    """Per-step boundary lines along a predicted relative trajectory.

    Step k's line is selected by the phase at s_x_pred[k]; its far anchor is
    rebuilt from the per-step anchor speeds (sequences shorter than s_x_pred
    hold their last element).
    """
    s_x_pred = np.asarray(s_x_pred, dtype=float).ravel()
    v_a = np.asarray(v_anchor_seq, dtype=float).ravel()
    vo_a = np.asarray(vo_anchor_seq, dtype=float).ravel()
    lines = []
    for k, sx in enumerate(s_x_pred):
        v_ev = v_a[min(k, v_a.size - 1)]
        v_ov = vo_a[min(k, vo_a.size - 1)]
        s_Xa, s_Xe = anchor_x(v_ev, v_ov, params)
        lines.append(line_for_phase(active_phase(sx, params), s_Xa, s_Xe, params))
    return lines


def chance_quantile(beta: float) -> float:
    """Standard-normal quantile sqrt(2) erfinv(1 - 2 beta) for risk beta.

    Scales a row's standard deviation into the back-off that makes the
    probabilistic constraint hold with probability 1 - beta; vanishes as
    beta approaches 0.5.
    """
    if not 0.0 < beta < 0.5:
        raise ValueError("risk coefficient must lie in (0, 0.5)")
    return float(math.sqrt(2.0) * erfinv(1.0 - 2.0 * beta))


def accel_noise_position_std(sigma2: float, n_steps: int, dt: float) -> np.ndarray:
    """Per-step std of the gap error under held white acceleration noise.

    The disturbed vehicle's acceleration error integrates once into its
    speed and a second time into the gap, so the gap variance at step k is
    sigma2 dt^4 sum_{m=1}^{k-1} m^2 — zero at k = 0 and 1.  Returns stds
    for k = 0..n_steps, matching the covariance recursion entry (0, 0).
    """
    if sigma2 < 0:
        raise ValueError("variance must be nonnegative")
    m2 = np.arange(n_steps, dtype=float) ** 2
    var = np.concatenate([[0.0], sigma2 * dt ** 4 * np.cumsum(m2)])
    return np.sqrt(var)
