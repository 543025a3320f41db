"""Chance-constrained longitudinal planner.

The other vehicle's acceleration is treated as Gaussian around the
game-predicted value, with a variance taken from the human-response
model.  First and second moments of the longitudinal state are
propagated in closed form; because the covariance recursion has no
control term, the probabilistic collision constraint collapses to a
deterministic row on the mean with a variance-dependent safety margin,
and the planning problem stays a dense convex QP.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import OccupancyParams, boundary_sequence, chance_quantile
from .lateral import LateralOutput, shift_hold
from .qp import DenseQP, solve_qp, stack_dynamics
from .vehicles import SimParams, VehicleLimits, WorldState, longitudinal_model

__all__ = [
    "GaussianMoments", "ChanceSpec", "LongitudinalWeights",
    "LongitudinalConfig", "LongitudinalOutput", "propagate_moments",
    "chance_margin", "build_chance_spec", "build_longitudinal_qp",
    "longitudinal_step", "LongitudinalController",
]

_ZERO_ROW_TOL = 1e-12
_CONST_FEAS_TOL = 1e-9
_SOFT_PENALTY_LIN = 1e4
_SOFT_PENALTY_QUAD = 2e4


@dataclass
class GaussianMoments:
    """Mean and covariance trajectories of [gap, own speed, other speed]."""

    Pi_seq: np.ndarray       # (N+1, 3)
    Sigma_seq: np.ndarray    # (N+1, 3, 3)


@dataclass
class ChanceSpec:
    """Per-step probabilistic boundary data.

    Row k asks Pr{k_x_seq[k] . x(k) <= b_x_seq[k]} >= 1 - beta, with
    the rows built from the phase-selected envelope line and the fresh
    lateral plan.
    """

    beta: float
    k_x_seq: np.ndarray      # (N, 3) rows [slope, 0, 0]
    b_x_seq: np.ndarray      # (N,)
    phase_seq: np.ndarray    # (N,)


@dataclass(frozen=True)
class LongitudinalWeights:
    """Distance-advantage reward and quadratic tracking/effort weights."""

    P_x: float = 5.0
    Q_x: np.ndarray = field(default_factory=lambda: np.diag([1.0, 2.0]))

    def __post_init__(self):
        if self.P_x <= 0:
            raise ValueError("distance weight must be positive")
        Q = np.atleast_2d(np.asarray(self.Q_x, dtype=float))
        if Q.shape != (2, 2) or not np.allclose(Q, Q.T):
            raise ValueError("Q_x must be a symmetric 2x2 matrix")
        if np.linalg.eigvalsh(Q)[0] <= 0:
            raise ValueError("Q_x must be positive definite")
        object.__setattr__(self, "Q_x", Q)


@dataclass(frozen=True)
class LongitudinalConfig:
    sim: SimParams
    limits: VehicleLimits
    geom: OccupancyParams
    weights: LongitudinalWeights = field(default_factory=LongitudinalWeights)
    beta: float = 0.05
    horizon: int = 20


@dataclass
class LongitudinalOutput:
    a_star_seq: np.ndarray       # (N,)
    v_star_seq: np.ndarray       # (N+1,)
    s_x_mean_seq: np.ndarray     # (N+1,) planned mean gap
    margins: np.ndarray          # (N,) safety back-offs, meters
    objective: float
    soft: bool
    slack: float
    diagnostics: dict = field(default_factory=dict)


def propagate_moments(x0, u_seq, a_o_star_seq, sigma2_seq,
                      params: SimParams) -> GaussianMoments:
    """Closed-form moment propagation of the longitudinal chain.

    The disturbance enters only the other vehicle's speed, so the
    covariance recursion is control-independent and the gap variance
    builds up with a two-step delay.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.size != 3:
        raise ValueError("state must be [s_x, v, v_o]")
    u_seq = np.asarray(u_seq, dtype=float).ravel()
    a_o = np.asarray(a_o_star_seq, dtype=float).ravel()
    s2 = np.asarray(sigma2_seq, dtype=float).ravel()
    N = u_seq.size
    if a_o.size != N or s2.size != N:
        raise ValueError("sequence lengths must match the horizon")
    if (s2 < 0).any():
        raise ValueError("variances must be nonnegative")
    A, B, E = longitudinal_model(params)
    Pi = np.empty((N + 1, 3))
    Sigma = np.empty((N + 1, 3, 3))
    Pi[0] = x0
    Sigma[0] = 0.0
    for k in range(N):
        Pi[k + 1] = A @ Pi[k] + B.ravel() * u_seq[k] + E.ravel() * a_o[k]
        Sigma[k + 1] = A @ Sigma[k] @ A.T + s2[k] * np.outer(E, E)
    return GaussianMoments(Pi_seq=Pi, Sigma_seq=Sigma)


def chance_margin(beta: float, sigma_k: float) -> float:
    """Back-off distance that turns the probabilistic row deterministic.

    Equals sqrt(2) * erfinv(1 - 2 beta) * sigma_k, the (1-beta) normal
    quantile scaled by the row's standard deviation.
    """
    if sigma_k < 0:
        raise ValueError("standard deviation must be nonnegative")
    return float(chance_quantile(beta) * sigma_k)


def build_chance_spec(lateral_out: LateralOutput, v_star_prev,
                      cfg: LongitudinalConfig) -> ChanceSpec:
    """Phase-selected boundary rows for the probabilistic constraint.

    Phases follow the lateral game's fresh gap forecast.  The approach
    line is anchored with the shifted previous speed plan; the exit
    line uses the fresh follower speed forecast (not shifted).
    """
    N = cfg.horizon
    if lateral_out.a_o_star_seq.size != N:
        raise ValueError("lateral plan horizon mismatch")
    v_anchor = shift_hold(v_star_prev, N)
    vo_anchor = lateral_out.v_o_star_seq[:N]
    lines = boundary_sequence(lateral_out.s_x_pred_seq[:N], v_anchor,
                              vo_anchor, cfg.geom)
    k_x = np.zeros((N, 3))
    k_x[:, 0] = [ln.k for ln in lines]
    b_x = lateral_out.s_y_star_seq[:N] - np.array([ln.b for ln in lines])
    return ChanceSpec(beta=cfg.beta, k_x_seq=k_x, b_x_seq=b_x,
                      phase_seq=np.array([ln.p for ln in lines], dtype=int))


def _condensed_stacks(x0, a_o_star_seq, cfg):
    N = cfg.horizon
    A, B, E = longitudinal_model(cfg.sim)
    A_t, B_t, E_t = stack_dynamics(np.broadcast_to(A, (N, 3, 3)),
                                   np.broadcast_to(B, (N, 3, 1)),
                                   np.broadcast_to(E, (N, 3, 1)))
    c = A_t @ x0 + E_t @ a_o_star_seq
    return A_t, B_t, c


def build_longitudinal_qp(x0, lateral_out: LateralOutput, sigma2_seq,
                          cfg: LongitudinalConfig, v_star_prev=None,
                          soft: bool = False):
    """Assemble the planning QP; returns (qp, info).

    The cost rewards mean gap growth linearly and tracks the other
    vehicle's current speed with a quadratic effort penalty.  Rows the
    decision cannot influence are checked here and recorded in
    ``info['const_violations']`` / ``info['p2_violations']`` instead of
    entering the QP.  With ``soft=True`` a shared slack variable is
    appended to the probabilistic rows.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.size != 3:
        raise ValueError("state must be [s_x, v, v_o]")
    if lateral_out is None:
        raise ValueError("a fresh lateral plan is required")
    N = cfg.horizon
    if v_star_prev is None:
        v_star_prev = np.full(N + 1, x0[1])
    a_o = np.asarray(lateral_out.a_o_star_seq, dtype=float).ravel()
    if a_o.size != N:
        raise ValueError("lateral plan horizon mismatch")
    s2 = np.broadcast_to(np.asarray(sigma2_seq, dtype=float).ravel(), (N,))
    if (s2 < 0).any():
        raise ValueError("variances must be nonnegative")

    spec = build_chance_spec(lateral_out, v_star_prev, cfg)
    moments = propagate_moments(x0, np.zeros(N), a_o, s2, cfg.sim)
    A_t, B_t, c = _condensed_stacks(x0, a_o, cfg)
    n = N + (1 if soft else 0)
    lim, W = cfg.limits, cfg.weights

    # cost over z(k) = [speed(k), accel(k)], k < N, plus the linear
    # distance-advantage reward on the mean gap
    Dz = np.zeros((2 * N, n))
    zc = np.zeros(2 * N)
    for k in range(N):
        Dz[2 * k, :N] = B_t[3 * k + 1]
        Dz[2 * k + 1, k] = 1.0
        zc[2 * k] = c[3 * k + 1]
    Qbar = np.kron(np.eye(N), W.Q_x)
    e = zc - np.tile([x0[2], 0.0], N)
    H = np.zeros((n, n))
    H[:, :] = 2.0 * Dz.T @ Qbar @ Dz
    g = 2.0 * Dz.T @ (Qbar @ e)
    gap_rows = B_t[0:3 * N:3]                   # mean-gap sensitivities k<N
    g[:N] -= W.P_x * gap_rows.sum(axis=0)
    const = float(e @ Qbar @ e) - W.P_x * float(c[0:3 * N:3].sum())
    if soft:
        H[-1, -1] = _SOFT_PENALTY_QUAD
        g[-1] = _SOFT_PENALTY_LIN

    margins = np.zeros(N)
    const_violations: list[tuple[str, int, float]] = []
    p2_violations: list[int] = []
    rows, lbs, ubs = [], [], []
    for k in range(N):
        khat = spec.k_x_seq[k, 0]
        sigma_k = abs(khat) * np.sqrt(max(moments.Sigma_seq[k][0, 0], 0.0))
        margins[k] = chance_margin(cfg.beta, sigma_k)
        coef = khat * B_t[3 * k, :]
        rhs = spec.b_x_seq[k] - margins[k] - khat * c[3 * k]
        if np.abs(coef).max(initial=0.0) <= _ZERO_ROW_TOL:
            if rhs < -_CONST_FEAS_TOL:
                if spec.phase_seq[k] == 2:
                    p2_violations.append(k)
                else:
                    const_violations.append(("chance", k, float(-rhs)))
            continue
        row = np.zeros(n)
        row[:N] = coef
        if soft:
            row[-1] = -1.0
        rows.append(row)
        lbs.append(-np.inf)
        ubs.append(rhs)
    # speed box on steps the decision reaches (k = 1 .. N-1)
    for k in range(N):
        coef = B_t[3 * k + 1]
        if np.abs(coef).max(initial=0.0) <= _ZERO_ROW_TOL:
            if not lim.v_min - _CONST_FEAS_TOL <= c[3 * k + 1] <= lim.v_max + _CONST_FEAS_TOL:
                const_violations.append(("speed", k, float(c[3 * k + 1])))
            continue
        row = np.zeros(n)
        row[:N] = coef
        rows.append(row)
        lbs.append(lim.v_min - c[3 * k + 1])
        ubs.append(lim.v_max - c[3 * k + 1])
    acc = np.zeros((N, n))
    acc[:, :N] = np.eye(N)
    rows.extend(acc)
    lbs.extend(np.full(N, lim.a_min))
    ubs.extend(np.full(N, lim.a_max))
    if soft:
        srow = np.zeros(n)
        srow[-1] = 1.0
        rows.append(srow)
        lbs.append(0.0)
        ubs.append(np.inf)

    qp = DenseQP(H, g, A_ineq=np.array(rows), lb=np.array(lbs),
                 ub=np.array(ubs))
    info = {
        "spec": spec, "margins": margins, "const": const,
        "const_violations": const_violations, "p2_violations": p2_violations,
        "B_tilde": B_t, "c_stack": c, "moments0": moments,
    }
    return qp, info


def longitudinal_step(state: WorldState, lateral_out: LateralOutput,
                      sigma2_now, cfg: LongitudinalConfig,
                      v_star_prev=None) -> LongitudinalOutput:
    """Plan the acceleration sequence for one cycle.

    On infeasibility the probabilistic rows are relaxed through a
    heavily penalized shared slack and the result is flagged.
    """
    x0 = np.array([state.s_x, state.v, state.v_o])
    soft_used, slack_val = False, 0.0
    qp, info = build_longitudinal_qp(x0, lateral_out, sigma2_now, cfg,
                                     v_star_prev)
    sol = solve_qp(qp)
    if sol.status == "infeasible":
        qp, info = build_longitudinal_qp(x0, lateral_out, sigma2_now, cfg,
                                         v_star_prev, soft=True)
        sol = solve_qp(qp)
        soft_used = True
        if sol.status == "infeasible":
            raise RuntimeError("longitudinal stage infeasible even with "
                               "relaxed boundary rows")
        slack_val = float(sol.u_star[-1])
    N = cfg.horizon
    u = np.clip(sol.u_star[:N], cfg.limits.a_min, cfg.limits.a_max)
    a_o = np.asarray(lateral_out.a_o_star_seq, dtype=float).ravel()
    x_stack = (info["B_tilde"] @ sol.u_star[:N]) + info["c_stack"]
    v_star = np.clip(x_stack[1::3], cfg.limits.v_min, cfg.limits.v_max)
    return LongitudinalOutput(
        a_star_seq=u, v_star_seq=v_star, s_x_mean_seq=x_stack[0::3].copy(),
        margins=info["margins"],
        objective=float(sol.obj + info["const"]),
        soft=soft_used, slack=slack_val,
        diagnostics={
            "qp_status": sol.status,
            "phase_seq": info["spec"].phase_seq,
            "const_violations": info["const_violations"],
            "p2_violations": info["p2_violations"],
        })


class LongitudinalController:
    """Stateful wrapper carrying the speed plan between cycles.

    The previous cycle's speed plan anchors the approach-phase boundary
    here and feeds the lateral game's exogenous leader speed elsewhere.
    """

    def __init__(self, cfg: LongitudinalConfig):
        self.cfg = cfg
        self._v_prev: np.ndarray | None = None

    def reset(self):
        self._v_prev = None

    @property
    def v_star_prev(self):
        return None if self._v_prev is None else self._v_prev.copy()

    def step(self, state: WorldState, lateral_out: LateralOutput,
             sigma2_now) -> LongitudinalOutput:
        out = longitudinal_step(state, lateral_out, sigma2_now, self.cfg,
                                v_star_prev=self._v_prev)
        self._v_prev = out.v_star_seq.copy()
        return out
