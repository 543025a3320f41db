"""Bilevel lateral planner: steering leader versus yielding-driver follower.

The follower anticipates the other vehicle's acceleration response (keep
speed, optionally restore headway once it has been passed); the leader
plans steering against that response while staying outside the moving
collision envelope.  The follower's optimality conditions are embedded
as complementarity constraints, and the resulting single-level problem
is solved to global optimality by branch-and-bound on the active-set
pattern.  When the follower objective is strictly convex its response is
unique and independent of the steering plan, so a best-response shortcut
resolves the search at the root node; the full search remains available
behind ``use_follower_cut=False``.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .geometry import (OccupancyParams, accel_noise_position_std,
                       boundary_sequence, chance_quantile, predict_offsets,
                       road_bounds)
from .qp import CondensedSystem, DenseQP, condense_lateral, condense_ov, solve_qp
from .vehicles import SimParams, VehicleLimits, WorldState, lateral_ltv

__all__ = [
    "LateralWeights", "LateralConfig", "FollowerSpec", "LeaderSpec",
    "CouplingSpec", "MpecProblem", "MpecSolution", "MpecError",
    "LateralOutput", "LateralController", "shift_hold", "build_follower",
    "build_leader", "build_coupling", "boundary_backoff", "assemble_mpec",
    "solve_mpec", "lateral_step",
]

_ZERO_ROW_TOL = 1e-12
_CONST_FEAS_TOL = 1e-9
_COMP_TOL = 1e-6
_PRUNE_EPS = 1e-9
_SOFT_PENALTY_LIN = 1e4
_SOFT_PENALTY_QUAD = 2e4


class MpecError(RuntimeError):
    """No complementarity-feasible plan could be certified."""


@dataclass(frozen=True)
class LateralWeights:
    """Diagonal objective weights for both levels of the lateral game.

    Leader entries weigh lateral offset tracking, heading magnitude and
    steering magnitude; follower entries weigh headway restoration (only
    counted while the gate is open), speed keeping and acceleration
    comfort.  ``t_target`` is the follower's desired headway time.
    """

    w_lat: float = 1.0
    w_heading: float = 24000.0
    w_steer: float = 48000.0
    q_gap: float = 0.05
    q_speed: float = 1.0
    q_accel: float = 8.0
    t_target: float = 2.0

    def leader_block(self) -> np.ndarray:
        if min(self.w_lat, self.w_heading, self.w_steer) <= 0:
            raise ValueError("leader weights must be positive")
        return np.diag([self.w_lat, self.w_heading, self.w_steer])

    def follower_block(self, gate: bool) -> np.ndarray:
        if min(self.q_gap, self.q_speed, self.q_accel) < 0:
            raise ValueError("follower weights must be nonnegative")
        return np.diag([self.q_gap if gate else 0.0, self.q_speed, self.q_accel])


@dataclass(frozen=True)
class LateralConfig:
    """Everything the lateral planner needs besides the live state."""

    sim: SimParams
    limits: VehicleLimits
    geom: OccupancyParams
    weights: LateralWeights = field(default_factory=LateralWeights)
    horizon: int = 20
    use_follower_cut: bool = True
    node_budget: int = 5000
    beta: float = 0.05           # shared risk coefficient for the back-off
    chance_cushion: bool = True  # lift boundaries by the stochastic back-off


@dataclass
class FollowerSpec:
    """Follower stage data: per-step weight block, references and bounds."""

    Q_step: np.ndarray          # (3, 3) weights on [gap, speed, accel]
    z_ref: np.ndarray           # (3,) per-step reference
    f_lo: np.ndarray            # (2,) lower bounds on [speed, accel]
    f_hi: np.ndarray            # (2,)
    headway_gate: bool
    s_x_target: float
    system: CondensedSystem


@dataclass
class LeaderSpec:
    """Leader stage data: per-step weight block, references and bounds."""

    Q_step: np.ndarray          # (3, 3) weights on [offset, heading, steer]
    z_ref: np.ndarray           # (3,)
    f_lo: np.ndarray            # (3,)
    f_hi: np.ndarray            # (3,)
    s_y_target: float
    system: CondensedSystem


@dataclass
class CouplingSpec:
    """Per-step collision boundary linking the two stages."""

    k_seq: np.ndarray           # (N+1,) boundary slopes
    b_seq: np.ndarray           # (N+1,) boundary intercepts
    phase_seq: np.ndarray       # (N+1,) int phase labels
    s_x_pred: np.ndarray        # (N+1,) predicted longitudinal offsets


@dataclass
class MpecProblem:
    """Single-level complementarity program over w = [u_y, u_o, lam].

    Leader cost ``0.5 u' H_lead u + g_lead' u + const_lead`` over the
    joint decision u = [u_y, u_o]; follower stationarity
    ``H_fol u_o + g_fol + F'(lam_hi - lam_lo) = 0`` with bound pairs on
    ``F u_o + f_c`` in ``[f_lo, f_hi]``.  Multipliers are stacked lower
    block first, so pattern index j < n_f refers to (row j, lower).
    """

    N: int
    H_lead: np.ndarray
    g_lead: np.ndarray
    const_lead: float
    A_lead: np.ndarray          # (m_L, 2N) two-sided leader rows
    lead_lb: np.ndarray
    lead_ub: np.ndarray
    A_cpl: np.ndarray           # (m_c, 2N) coupling rows, A_cpl u <= cpl_ub
    cpl_ub: np.ndarray
    H_fol: np.ndarray
    g_fol: np.ndarray
    F: np.ndarray               # (n_f, N)
    f_c: np.ndarray
    f_lo: np.ndarray
    f_hi: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        N = int(self.N)
        self.H_lead = np.atleast_2d(np.asarray(self.H_lead, dtype=float))
        self.g_lead = np.asarray(self.g_lead, dtype=float).ravel()
        self.H_fol = np.atleast_2d(np.asarray(self.H_fol, dtype=float))
        self.g_fol = np.asarray(self.g_fol, dtype=float).ravel()
        self.F = np.atleast_2d(np.asarray(self.F, dtype=float))
        for name in ("f_c", "f_lo", "f_hi"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        if self.A_lead is None:
            self.A_lead = np.zeros((0, 2 * N))
        self.A_lead = np.atleast_2d(np.asarray(self.A_lead, dtype=float))
        if self.A_lead.size == 0:
            self.A_lead = self.A_lead.reshape(0, 2 * N)
        self.lead_lb = (np.asarray(self.lead_lb, dtype=float).ravel()
                        if self.lead_lb is not None else np.zeros(0))
        self.lead_ub = (np.asarray(self.lead_ub, dtype=float).ravel()
                        if self.lead_ub is not None else np.zeros(0))
        if self.A_cpl is None:
            self.A_cpl = np.zeros((0, 2 * N))
        self.A_cpl = np.atleast_2d(np.asarray(self.A_cpl, dtype=float))
        if self.A_cpl.size == 0:
            self.A_cpl = self.A_cpl.reshape(0, 2 * N)
        self.cpl_ub = (np.asarray(self.cpl_ub, dtype=float).ravel()
                       if self.cpl_ub is not None else np.zeros(0))
        if self.H_lead.shape != (2 * N, 2 * N):
            raise ValueError("H_lead must act on the joint decision [u_y, u_o]")
        if self.F.shape[1] != N and self.F.size:
            raise ValueError("follower constraint stack width mismatch")

        self.n_f = self.F.shape[0]
        self.n_pairs = 2 * self.n_f
        self.const_rows = np.abs(self.F).max(axis=1, initial=0.0) <= _ZERO_ROW_TOL
        self.infeasible_const = False
        # Pre-resolved pattern entries: -1 free, 0 multiplier forced to
        # zero, 1 identically tight.  Absent (infinite) bounds and
        # decision-independent rows are settled here once.
        prefix = np.full(self.n_pairs, -1, dtype=np.int8)
        for j in range(self.n_f):
            for hi, bnd, pr in ((False, self.f_lo[j], j),
                                (True, self.f_hi[j], self.n_f + j)):
                if not np.isfinite(bnd):
                    prefix[pr] = 0
                    continue
                if not self.const_rows[j]:
                    continue
                slack = (bnd - self.f_c[j]) if hi else (self.f_c[j] - bnd)
                if slack < -_CONST_FEAS_TOL:
                    self.infeasible_const = True
                prefix[pr] = 1 if slack <= _CONST_FEAS_TOL else 0
        self.prefix = prefix
        self.kept_f = np.flatnonzero(~self.const_rows)

    @property
    def n_dec(self) -> int:
        return 2 * self.N

    def leader_value(self, u: np.ndarray) -> float:
        u = np.asarray(u, dtype=float).ravel()[: self.n_dec]
        return float(0.5 * u @ self.H_lead @ u + self.g_lead @ u + self.const_lead)


@dataclass
class MpecSolution:
    u_y: np.ndarray
    u_o: np.ndarray
    lam_lo: np.ndarray
    lam_hi: np.ndarray
    objective: float            # leader cost including the constant term
    status: str                 # "optimal" | "budget"
    pattern: np.ndarray         # realized active-set pattern, int8
    node_count: int
    max_comp_product: float
    soft: bool = False
    slack: float = 0.0
    diagnostics: dict = field(default_factory=dict)


@dataclass
class LateralOutput:
    """One lateral planning step: steering plan plus follower forecast."""

    delta_star_seq: np.ndarray   # (N,) steering plan
    a_o_star_seq: np.ndarray     # (N,) forecast follower acceleration
    v_o_star_seq: np.ndarray     # (N+1,) forecast follower speed
    s_y_star_seq: np.ndarray     # (N+1,) planned lateral offsets
    s_x_pred_seq: np.ndarray     # (N+1,) forecast longitudinal offsets
    psi_star_seq: np.ndarray     # (N+1,) planned headings
    s_y_target: float
    headway_gate: bool
    solution: MpecSolution


def shift_hold(seq, n_out: int) -> np.ndarray:
    """Advance a planned sequence one step, holding the last value.

    Entry k of the result is seq[k+1] where available, else seq[-1].
    """
    s = np.asarray(seq, dtype=float).ravel()
    if s.size == 0:
        raise ValueError("cannot shift an empty sequence")
    if s.size > 1:
        s = s[1:]
    if s.size >= n_out:
        return s[:n_out].copy()
    return np.concatenate([s, np.full(n_out - s.size, s[-1])])


def build_follower(x_o, v_star_prev, cfg: LateralConfig) -> FollowerSpec:
    """Set up the follower stage from its measured state.

    The headway-restoration term is active only while the other vehicle
    is freshly ahead but the desired gap has not yet been reached; the
    reference gap is ``d_X0 + v_o * t_target`` and is held over the
    horizon.
    """
    x_o = np.asarray(x_o, dtype=float).ravel()
    if x_o.size != 2:
        raise ValueError("follower state must be [s_x, v_o]")
    N = cfg.horizon
    s_x, v_o = float(x_o[0]), float(x_o[1])
    s_x_target = cfg.geom.d_X0 + v_o * cfg.weights.t_target
    gate = cfg.geom.s_Xd <= s_x <= s_x_target
    u_e = shift_hold(v_star_prev, N)
    system = condense_ov(x_o, u_e, N, cfg.sim)
    lim = cfg.limits
    return FollowerSpec(
        Q_step=cfg.weights.follower_block(gate),
        z_ref=np.array([s_x_target, v_o, 0.0]),
        f_lo=np.array([lim.vo_min, lim.a_min]),
        f_hi=np.array([lim.vo_max, lim.a_max]),
        headway_gate=gate, s_x_target=s_x_target, system=system)


def build_leader(x_y, s_x_now: float, v_star_prev, cfg: LateralConfig,
                 s_y_target: float | None = None) -> LeaderSpec:
    """Set up the leader stage for the current lateral state.

    The lateral reference is the overtaking-lane center while the
    vehicle is alongside (between the envelope break points), the
    original lane center otherwise; pass ``s_y_target`` to override.
    """
    x_y = np.asarray(x_y, dtype=float).ravel()
    if x_y.size != 2:
        raise ValueError("leader state must be [s_y, psi]")
    N = cfg.horizon
    if s_y_target is None:
        alongside = cfg.geom.s_Xb <= s_x_now <= cfg.geom.s_Xd
        s_y_target = cfg.geom.W_l if alongside else 0.0
    ltv = lateral_ltv(shift_hold(v_star_prev, N), cfg.sim, N=N)
    system = condense_lateral(x_y, ltv, N)
    lo, hi = road_bounds(cfg.geom)
    lim = cfg.limits
    return LeaderSpec(
        Q_step=cfg.weights.leader_block(),
        z_ref=np.array([s_y_target, 0.0, 0.0]),
        f_lo=np.array([lo, lim.psi_min, lim.delta_min]),
        f_hi=np.array([hi, lim.psi_max, lim.delta_max]),
        s_y_target=float(s_y_target), system=system)


def boundary_backoff(sigma2, cfg: LateralConfig) -> np.ndarray | None:
    """Longitudinal back-off sequence matching the stochastic stage.

    Returns the (N+1,) distances by which the downstream probabilistic
    collision rows will be tightened, or None when the cushion is
    disabled or the disturbance variance is absent.
    """
    if not cfg.chance_cushion or sigma2 is None or sigma2 <= 0.0:
        return None
    return chance_quantile(cfg.beta) * accel_noise_position_std(
        float(sigma2), cfg.horizon, cfg.sim.dt)


def build_coupling(s_x_now: float, v_star_prev, vo_star_prev,
                   cfg: LateralConfig, backoff_seq=None) -> CouplingSpec:
    """Predict the collision boundary along the horizon.

    Phases are chosen from an offset rollout driven by the shifted
    previous plans; the approach and exit lines are anchored with the
    same shifted speed sequences.

    ``backoff_seq`` raises step k's line by ``|k_seq[k]| * backoff[k]``:
    the lateral plan then clears the same tightened corridor the
    stochastic longitudinal stage enforces.  Without the lift the two
    stages jointly erode the corridor — each cycle grants lateral room
    only up to the bare line while the longitudinal stage subtracts its
    back-off from that grant — and the loop can deadlock behind the
    slower vehicle instead of completing the pass.
    """
    N = cfg.horizon
    v_shift = shift_hold(v_star_prev, N + 1)
    vo_shift = shift_hold(vo_star_prev, N + 1)
    s_x_pred = predict_offsets(s_x_now, v_shift[:N], vo_shift[:N], cfg.sim.dt)
    lines = boundary_sequence(s_x_pred, v_shift, vo_shift, cfg.geom)
    k_seq = np.array([ln.k for ln in lines])
    b_seq = np.array([ln.b for ln in lines])
    if backoff_seq is not None:
        back = np.asarray(backoff_seq, dtype=float).ravel()
        if back.size != N + 1:
            raise ValueError("back-off length must match the horizon")
        b_seq = b_seq + np.abs(k_seq) * back
    return CouplingSpec(
        k_seq=k_seq,
        b_seq=b_seq,
        phase_seq=np.array([ln.p for ln in lines], dtype=int),
        s_x_pred=s_x_pred)


def _stage_cost(system: CondensedSystem, Q_step: np.ndarray, z_ref: np.ndarray):
    """Condensed quadratic data (H, g, const) of a tracking stage."""
    N = system.N
    Qbar = np.kron(np.eye(N + 1), Q_step)
    D = system.Dz
    e = system.z_const() - np.tile(z_ref, N + 1)
    H = 2.0 * D.T @ Qbar @ D
    g = 2.0 * D.T @ (Qbar @ e)
    const = float(e @ Qbar @ e)
    return H, g, const


def assemble_mpec(leader: LeaderSpec, follower: FollowerSpec,
                  coupling: CouplingSpec | None) -> MpecProblem:
    """Collapse both stages and the boundary into one complementarity program.

    Rows that no decision can influence are settled here: satisfied ones
    are dropped, violated ones are recorded under ``meta`` so a step can
    proceed best-effort after a disturbed measurement.
    """
    N = leader.system.N
    if follower.system.N != N:
        raise ValueError("leader and follower horizons differ")
    H_fol, g_fol, _ = _stage_cost(follower.system, follower.Q_step, follower.z_ref)
    H_y, g_y, const_y = _stage_cost(leader.system, leader.Q_step, leader.z_ref)
    H_lead = np.zeros((2 * N, 2 * N))
    H_lead[:N, :N] = H_y
    g_lead = np.concatenate([g_y, np.zeros(N)])

    violations: list[tuple[str, int, float]] = []

    # Leader bound rows over the [offset, heading, steer] stack.
    Df, fc = leader.system.Df, leader.system.f_const()
    lo = np.tile(leader.f_lo, N + 1)
    hi = np.tile(leader.f_hi, N + 1)
    live = np.abs(Df).max(axis=1) > _ZERO_ROW_TOL
    for i in np.flatnonzero(~live):
        if not (lo[i] - _CONST_FEAS_TOL <= fc[i] <= hi[i] + _CONST_FEAS_TOL):
            violations.append(("leader", int(i), float(fc[i])))
    A_lead = np.hstack([Df[live], np.zeros((int(live.sum()), N))])
    lead_lb = lo[live] - fc[live]
    lead_ub = hi[live] - fc[live]

    # Boundary rows: slope * s_x(k) + intercept <= s_y(k).
    rows, ubs, kept_k = [], [], []
    if coupling is not None:
        By = leader.system.B_tilde
        cy = leader.system.A_tilde @ leader.system.x0
        Bo = follower.system.B_tilde
        co = follower.system.A_tilde @ follower.system.x0
        if follower.system.E_tilde is not None:
            co = co + follower.system.E_tilde @ follower.system.u_e
        for k in range(N + 1):
            kk = coupling.k_seq[k]
            coef_y = -By[2 * k]
            coef_o = kk * Bo[2 * k]
            ub = -coupling.b_seq[k] - kk * co[2 * k] + cy[2 * k]
            if max(np.abs(coef_y).max(initial=0.0),
                   np.abs(coef_o).max(initial=0.0)) <= _ZERO_ROW_TOL:
                if ub < -_CONST_FEAS_TOL:
                    violations.append(("coupling", k, float(-ub)))
                continue
            rows.append(np.concatenate([coef_y, coef_o]))
            ubs.append(ub)
            kept_k.append(k)
    A_cpl = np.array(rows) if rows else np.zeros((0, 2 * N))
    cpl_ub = np.array(ubs)

    return MpecProblem(
        N=N, H_lead=H_lead, g_lead=g_lead, const_lead=const_y,
        A_lead=A_lead, lead_lb=lead_lb, lead_ub=lead_ub,
        A_cpl=A_cpl, cpl_ub=cpl_ub,
        H_fol=H_fol, g_fol=g_fol,
        F=follower.system.Df, f_c=follower.system.f_const(),
        f_lo=np.tile(follower.f_lo, N + 1), f_hi=np.tile(follower.f_hi, N + 1),
        meta={
            "const_violations": violations,
            "coupling_steps": kept_k,
            "phase_seq": None if coupling is None else coupling.phase_seq,
            "headway_gate": follower.headway_gate,
            "s_y_target": leader.s_y_target,
        })


# ---------------------------------------------------------------------------
# branch-and-bound machinery


class _Infeasible(Exception):
    pass


def _static_blocks(problem: MpecProblem, soft: bool):
    N, n_pairs = problem.N, problem.n_pairs
    n = 2 * N + n_pairs + (1 if soft else 0)
    H = np.zeros((n, n))
    H[:2 * N, :2 * N] = problem.H_lead
    g = np.zeros(n)
    g[:2 * N] = problem.g_lead
    if soft:
        H[-1, -1] = _SOFT_PENALTY_QUAD
        g[-1] = _SOFT_PENALTY_LIN

    def pad(block):
        out = np.zeros((block.shape[0], n))
        out[:, :block.shape[1]] = block
        return out

    parts, lbs, ubs = [], [], []
    if problem.A_lead.shape[0]:
        parts.append(pad(problem.A_lead))
        lbs.append(problem.lead_lb)
        ubs.append(problem.lead_ub)
    if problem.A_cpl.shape[0]:
        blk = pad(problem.A_cpl)
        if soft:
            blk[:, -1] = -1.0
        parts.append(blk)
        lbs.append(np.full(problem.A_cpl.shape[0], -np.inf))
        ubs.append(problem.cpl_ub)
    if problem.kept_f.size:
        blk = np.zeros((problem.kept_f.size, n))
        blk[:, N:2 * N] = problem.F[problem.kept_f]
        parts.append(blk)
        lbs.append(problem.f_lo[problem.kept_f] - problem.f_c[problem.kept_f])
        ubs.append(problem.f_hi[problem.kept_f] - problem.f_c[problem.kept_f])
    lam_rows = np.zeros((n_pairs, n))
    lam_rows[:, 2 * N:2 * N + n_pairs] = np.eye(n_pairs)
    parts.append(lam_rows)
    lbs.append(np.zeros(n_pairs))
    ubs.append(np.full(n_pairs, np.inf))
    if soft:
        srow = np.zeros((1, n))
        srow[0, -1] = 1.0
        parts.append(srow)
        lbs.append(np.zeros(1))
        ubs.append(np.full(1, np.inf))
    A_ineq = np.vstack(parts)
    lb = np.concatenate(lbs)
    ub = np.concatenate(ubs)

    A_eq0 = np.zeros((N, n))
    A_eq0[:, N:2 * N] = problem.H_fol
    A_eq0[:, 2 * N:2 * N + problem.n_f] = -problem.F.T
    A_eq0[:, 2 * N + problem.n_f:2 * N + n_pairs] = problem.F.T
    b_eq0 = -problem.g_fol
    return H, g, A_ineq, lb, ub, A_eq0, b_eq0, n


def _pattern_rows(problem: MpecProblem, pattern: np.ndarray, n: int):
    """Equality rows imposed by a (partial) pattern, or None if impossible."""
    N, n_f = problem.N, problem.n_f
    rows, rhs = [], []
    for pr in np.flatnonzero(pattern >= 0):
        j = pr - n_f if pr >= n_f else pr
        hi = pr >= n_f
        if pattern[pr] == 0:
            e = np.zeros(n)
            e[2 * N + pr] = 1.0
            rows.append(e)
            rhs.append(0.0)
            continue
        bnd = problem.f_hi[j] if hi else problem.f_lo[j]
        if not np.isfinite(bnd):
            return None
        if problem.const_rows[j]:
            if abs(problem.f_c[j] - bnd) <= _CONST_FEAS_TOL:
                continue            # identically tight, nothing to add
            return None
        e = np.zeros(n)
        e[N:2 * N] = problem.F[j]
        rows.append(e)
        rhs.append(bnd - problem.f_c[j])
    if not rows:
        return np.zeros((0, n)), np.zeros(0)
    return np.array(rows), np.array(rhs)


def _pair_products(problem: MpecProblem, w: np.ndarray):
    N = problem.N
    u_o = w[N:2 * N]
    lam = w[2 * N:2 * N + problem.n_pairs]
    fval = problem.F @ u_o + problem.f_c
    slack = np.concatenate([fval - problem.f_lo, problem.f_hi - fval])
    prod = np.zeros(problem.n_pairs)
    finite = np.isfinite(slack)
    prod[finite] = lam[finite] * slack[finite]
    return prod, slack


def _realized_pattern(problem: MpecProblem, w: np.ndarray) -> np.ndarray:
    _, slack = _pair_products(problem, w)
    out = np.zeros(problem.n_pairs, dtype=np.int8)
    finite = np.isfinite(slack)
    out[finite & (slack <= _COMP_TOL)] = 1
    return out


def _solve_follower(problem: MpecProblem):
    qp = DenseQP(problem.H_fol, problem.g_fol, A_ineq=problem.F,
                 lb=problem.f_lo - problem.f_c, ub=problem.f_hi - problem.f_c)
    return solve_qp(qp)


def solve_mpec(problem: MpecProblem, warm_pattern=None,
               use_follower_cut: bool = True,
               node_budget: int = 5000) -> MpecSolution:
    """Globally solve the complementarity program.

    Nodes relax the complementarity products under a partial active-set
    pattern; branching splits the pair with the largest product.  A full
    warm-pattern dive seeds the incumbent.  If every node is infeasible
    the boundary rows are retried with a heavily penalized shared slack,
    and the result is flagged ``soft``.
    """
    if problem.infeasible_const:
        raise MpecError("initial state violates fixed follower bounds")
    br = _solve_follower(problem)
    if br.status != "optimal":
        raise MpecError(f"follower stage failed: {br.status}")
    scale = 1.0 + np.abs(problem.H_fol).max(initial=0.0)
    cut_ok = use_follower_cut and problem.N > 0 and (
        np.linalg.eigvalsh(0.5 * (problem.H_fol + problem.H_fol.T))[0]
        > 1e-8 * scale)
    br_w = np.zeros(2 * problem.N + problem.n_pairs)
    br_w[problem.N:2 * problem.N] = br.u_star
    br_w[2 * problem.N:2 * problem.N + problem.n_f] = br.lam_lb
    br_w[2 * problem.N + problem.n_f:] = br.lam_ub
    br_pattern = _realized_pattern(problem, br_w)

    last_err = None
    for soft in (False, True):
        try:
            return _search(problem, br, br_pattern, warm_pattern, cut_ok,
                           node_budget, soft)
        except _Infeasible as err:
            last_err = err
            if not soft and problem.A_cpl.shape[0]:
                continue
            break
    raise MpecError(f"no feasible lateral plan ({last_err})")


def _search(problem: MpecProblem, br, br_pattern, warm_pattern, cut_ok,
            node_budget, soft) -> MpecSolution:
    N, n_pairs, n_f = problem.N, problem.n_pairs, problem.n_f
    H, g, A_ineq, lb, ub, A_eq0, b_eq0, n = _static_blocks(problem, soft)
    prefix = problem.prefix
    nodes = 0

    def eval_node(pattern, with_cut):
        nonlocal nodes
        prows = _pattern_rows(problem, pattern, n)
        if prows is None:
            return None
        extra, extra_rhs = prows
        blocks = [A_eq0, extra]
        rhs = [b_eq0, extra_rhs]
        if with_cut:
            cut = np.zeros((N, n))
            cut[:, N:2 * N] = np.eye(N)
            blocks.append(cut)
            rhs.append(br.u_star)
        qp = DenseQP(H, g, A_ineq=A_ineq, lb=lb, ub=ub,
                     A_eq=np.vstack(blocks), b_eq=np.concatenate(rhs))
        nodes += 1
        sol = solve_qp(qp)
        return None if sol.status == "infeasible" else sol

    J_inc, w_inc = np.inf, None
    best_slack = 0.0

    def try_incumbent(sol, w=None):
        nonlocal J_inc, w_inc, best_slack
        w = sol.u_star if w is None else w
        J = sol.obj  # includes any soft penalty; consistent across nodes
        if J < J_inc - _PRUNE_EPS:
            J_inc, w_inc = J, w.copy()
            best_slack = float(w[-1]) if soft else 0.0

    if warm_pattern is not None:
        warm_pattern = np.asarray(warm_pattern).ravel()
        if warm_pattern.size != n_pairs:
            warm_pattern = None
    dive_src = br_pattern if warm_pattern is None else warm_pattern
    if not cut_ok:
        dive = np.where(prefix >= 0, prefix, dive_src).astype(np.int8)
        sol = eval_node(dive, with_cut=False)
        if sol is not None and sol.status == "optimal":
            try_incumbent(sol)   # fully fixed pattern: products vanish

    status = "optimal"
    heap = [(-np.inf, 0, prefix.astype(np.int8).tobytes())]
    counter = 1
    while heap:
        bound, _, pat_b = heapq.heappop(heap)
        if bound >= J_inc - _PRUNE_EPS:
            break
        if nodes >= node_budget:
            status = "budget"
            break
        pattern = np.frombuffer(pat_b, dtype=np.int8).copy()
        sol = eval_node(pattern, with_cut=cut_ok)
        if sol is None:
            continue
        certified = sol.status == "optimal"
        if certified and sol.obj >= J_inc - _PRUNE_EPS:
            continue
        if cut_ok:
            # The follower response is unique, so completing the node
            # with the best-response multipliers settles it outright.
            if certified:
                w = sol.u_star.copy()
                w[2 * N:2 * N + n_f] = br.lam_lb
                w[2 * N + n_f:2 * N + n_pairs] = br.lam_ub
                try_incumbent(sol, w)
            continue
        prod, _ = _pair_products(problem, sol.u_star)
        free = pattern < 0
        if not free.any() or np.abs(prod[free]).max(initial=0.0) <= _COMP_TOL:
            if certified:
                try_incumbent(sol)
            continue
        j_star = int(np.flatnonzero(free)[np.abs(prod[free]).argmax()])
        child_bound = sol.obj if certified else bound
        for v in (0, 1):
            child = pattern.copy()
            child[j_star] = v
            heapq.heappush(heap, (child_bound, counter, child.tobytes()))
            counter += 1

    if w_inc is None:
        raise _Infeasible("every active-set node was infeasible"
                          + (" (soft)" if soft else ""))

    prod, _ = _pair_products(problem, w_inc)
    return MpecSolution(
        u_y=w_inc[:N].copy(), u_o=w_inc[N:2 * N].copy(),
        lam_lo=w_inc[2 * N:2 * N + n_f].copy(),
        lam_hi=w_inc[2 * N + n_f:2 * N + n_pairs].copy(),
        objective=problem.leader_value(w_inc),
        status=status, pattern=_realized_pattern(problem, w_inc),
        node_count=nodes, max_comp_product=float(np.abs(prod).max(initial=0.0)),
        soft=soft, slack=best_slack,
        diagnostics={
            "follower_cut": bool(cut_ok),
            "follower_objective": float(br.obj),
            "const_violations": problem.meta.get("const_violations", []),
            "coupling_steps": problem.meta.get("coupling_steps", []),
        })


# ---------------------------------------------------------------------------
# one full planning step


def lateral_step(state: WorldState, v_star_prev, vo_star_prev,
                 cfg: LateralConfig, warm_pattern=None,
                 s_y_target: float | None = None,
                 sigma2: float | None = None) -> LateralOutput:
    """Run one lateral planning cycle from a measured state.

    ``v_star_prev`` / ``vo_star_prev`` are the speed plans kept from the
    previous cycle (shifted internally); pass None on the first cycle to
    fall back to constant-speed holds.  ``sigma2`` is the current driver
    acceleration variance; when given, the boundary is lifted by the
    matching stochastic back-off (see ``build_coupling``).
    """
    N = cfg.horizon
    if v_star_prev is None:
        v_star_prev = np.full(N + 1, state.v)
    if vo_star_prev is None:
        vo_star_prev = np.full(N + 1, state.v_o)
    x_o = np.array([state.s_x, state.v_o])
    x_y = np.array([state.s_y, state.psi])
    follower = build_follower(x_o, v_star_prev, cfg)
    leader = build_leader(x_y, state.s_x, v_star_prev, cfg, s_y_target)
    coupling = build_coupling(state.s_x, v_star_prev, vo_star_prev, cfg,
                              backoff_seq=boundary_backoff(sigma2, cfg))
    problem = assemble_mpec(leader, follower, coupling)
    sol = solve_mpec(problem, warm_pattern,
                     use_follower_cut=cfg.use_follower_cut,
                     node_budget=cfg.node_budget)
    lim = cfg.limits
    x_o_stack = (follower.system.A_tilde @ x_o
                 + follower.system.B_tilde @ sol.u_o
                 + follower.system.E_tilde @ follower.system.u_e)
    x_y_stack = leader.system.A_tilde @ x_y + leader.system.B_tilde @ sol.u_y
    return LateralOutput(
        delta_star_seq=np.clip(sol.u_y, lim.delta_min, lim.delta_max),
        a_o_star_seq=np.clip(sol.u_o, lim.a_min, lim.a_max),
        v_o_star_seq=np.clip(x_o_stack[1::2], lim.vo_min, lim.vo_max),
        s_y_star_seq=x_y_stack[0::2].copy(),
        s_x_pred_seq=x_o_stack[0::2].copy(),
        psi_star_seq=x_y_stack[1::2].copy(),
        s_y_target=leader.s_y_target,
        headway_gate=follower.headway_gate,
        solution=sol)


class LateralController:
    """Stateful wrapper that recycles the active-set pattern between cycles."""

    def __init__(self, cfg: LateralConfig):
        self.cfg = cfg
        self._warm = None

    def reset(self):
        self._warm = None

    def step(self, state: WorldState, v_star_prev=None,
             vo_star_prev=None, sigma2: float | None = None) -> LateralOutput:
        out = lateral_step(state, v_star_prev, vo_star_prev, self.cfg,
                           warm_pattern=self._warm, sigma2=sigma2)
        self._warm = out.solution.pattern
        return out
