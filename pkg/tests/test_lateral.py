import numpy as np
import pytest

from overtake.geometry import (accel_noise_position_std, chance_quantile,
                               derive_params, line_for_phase, road_bounds)
from overtake.lateral import (
    LateralConfig,
    LateralController,
    LateralWeights,
    MpecProblem,
    assemble_mpec,
    boundary_backoff,
    build_coupling,
    build_follower,
    build_leader,
    lateral_step,
    shift_hold,
    solve_mpec,
)
from overtake.vehicles import SimParams, VehicleLimits, WorldState

import oracles

GEOM = derive_params()
S_XB = GEOM.s_Xb          # ~ -4.2246
S_XD = GEOM.s_Xd          # ~ +4.3318


def _cfg(N=20, **kw):
    return LateralConfig(sim=SimParams(), limits=VehicleLimits(), geom=GEOM,
                         horizon=N, **kw)


def _hand_problem():
    """Follower min (u_o - 2)^2 s.t. u_o <= 1; leader min (u_y - u_o)^2."""
    return MpecProblem(
        N=1, H_lead=np.array([[2.0, -2.0], [-2.0, 2.0]]), g_lead=[0.0, 0.0],
        const_lead=0.0, A_lead=None, lead_lb=None, lead_ub=None,
        A_cpl=None, cpl_ub=None, H_fol=[[2.0]], g_fol=[-4.0],
        F=[[1.0]], f_c=[0.0], f_lo=[-np.inf], f_hi=[1.0])


def _vehicle_problem(state, N, v_prev=18.0, vo_prev=16.0, s_y_target=None):
    cfg = _cfg(N)
    vp = np.full(N + 1, v_prev)
    vop = np.full(N + 1, vo_prev)
    fol = build_follower(np.array([state.s_x, state.v_o]), vp, cfg)
    led = build_leader(np.array([state.s_y, state.psi]), state.s_x, vp, cfg,
                       s_y_target=s_y_target)
    cpl = build_coupling(state.s_x, vp, vop, cfg)
    return assemble_mpec(led, fol, cpl), fol, led, cpl


def test_shift_hold():
    assert np.allclose(shift_hold([1.0, 2.0, 3.0], 4), [2.0, 3.0, 3.0, 3.0])
    assert np.allclose(shift_hold([1.0, 2.0, 3.0], 2), [2.0, 3.0])
    assert np.allclose(shift_hold([5.0], 3), [5.0, 5.0, 5.0])
    with pytest.raises(ValueError):
        shift_hold([], 2)


def test_follower_gate_window():
    cfg = _cfg(4)
    vp = np.full(5, 18.0)
    fol = build_follower([10.0, 17.88], vp, cfg)
    assert fol.s_x_target == pytest.approx(41.84, abs=1e-12)
    assert fol.headway_gate
    assert fol.Q_step[0, 0] == cfg.weights.q_gap
    assert np.allclose(fol.z_ref, [41.84, 17.88, 0.0])
    # closed interval on both ends (use the computed target to stay exact)
    assert build_follower([S_XD, 17.88], vp, cfg).headway_gate
    assert build_follower([fol.s_x_target, 17.88], vp, cfg).headway_gate
    # outside: behind the crossing point, or already beyond the target gap
    for s_x in (2.0, -5.0, 41.85):
        off = build_follower([s_x, 17.88], vp, cfg)
        assert not off.headway_gate
        assert off.Q_step[0, 0] == 0.0


def test_follower_bounds_and_exogenous_shift():
    cfg = _cfg(3)
    vp = np.array([10.0, 11.0, 12.0, 13.0])
    fol = build_follower([0.0, 15.0], vp, cfg)
    lim = cfg.limits
    assert np.allclose(fol.f_lo, [lim.vo_min, lim.a_min])
    assert np.allclose(fol.f_hi, [lim.vo_max, lim.a_max])
    assert fol.system.N == 3
    assert np.allclose(fol.system.u_e, [11.0, 12.0, 13.0])


def test_leader_reference_switch():
    cfg = _cfg(4)
    vp = np.full(5, 18.0)
    x_y = [0.0, 0.0]
    for s_x in (S_XB, 0.0, S_XD):
        assert build_leader(x_y, s_x, vp, cfg).s_y_target == GEOM.W_l
    for s_x in (S_XB - 1e-6, S_XD + 1e-6, -30.0, 40.0):
        assert build_leader(x_y, s_x, vp, cfg).s_y_target == 0.0
    led = build_leader(x_y, 0.0, vp, cfg, s_y_target=1.23)
    assert led.s_y_target == 1.23
    assert np.allclose(led.z_ref, [1.23, 0.0, 0.0])


def test_leader_bounds_from_geometry_and_limits():
    cfg = _cfg(2)
    led = build_leader([0.1, 0.0], 0.0, np.full(3, 15.0), cfg)
    lo, hi = road_bounds(GEOM)
    lim = cfg.limits
    assert np.allclose(led.f_lo, [lo, -lim.psi_max, -lim.delta_max])
    assert np.allclose(led.f_hi, [hi, lim.psi_max, lim.delta_max])


def test_coupling_sequences_match_geometry():
    cfg = _cfg(2)
    vp = np.full(3, 18.0)
    vop = np.full(3, 16.0)
    cpl = build_coupling(-30.0, vp, vop, cfg)
    assert np.allclose(cpl.s_x_pred, [-30.0, -29.8, -29.6])
    assert list(cpl.phase_seq) == [1, 1, 1]
    s_Xa = -(GEOM.d_X0 + 18.0 * GEOM.t_min)
    s_Xe = GEOM.d_X0 + 16.0 * GEOM.t_min
    ref = line_for_phase(1, s_Xa, s_Xe, GEOM)
    assert cpl.k_seq[0] == pytest.approx(ref.k, abs=1e-14)
    assert cpl.b_seq[0] == pytest.approx(ref.b, abs=1e-14)
    # straddling the footprint: phase flips to the exit line
    cpl3 = build_coupling(4.2, vp, vop, cfg)
    assert list(cpl3.phase_seq) == [2, 3, 3]
    ref3 = line_for_phase(3, s_Xa, s_Xe, GEOM)
    assert cpl3.k_seq[2] == pytest.approx(ref3.k, abs=1e-14)


def test_hand_mpec_upper_bound_active():
    prob = _hand_problem()
    for cut in (True, False):
        sol = solve_mpec(prob, use_follower_cut=cut)
        assert sol.status == "optimal"
        assert not sol.soft
        assert sol.u_o[0] == pytest.approx(1.0, abs=1e-7)
        assert sol.u_y[0] == pytest.approx(1.0, abs=1e-7)
        assert sol.lam_hi[0] == pytest.approx(2.0, abs=1e-6)
        assert sol.objective == pytest.approx(0.0, abs=1e-8)
        assert list(sol.pattern) == [0, 1]
        assert sol.max_comp_product <= 1e-6


def test_hand_mpec_interior_response():
    # follower optimum strictly inside its box: all multipliers vanish
    prob = MpecProblem(
        N=1, H_lead=np.array([[2.0, -4.0], [-4.0, 8.0]]), g_lead=[0.0, 0.0],
        const_lead=0.0, A_lead=None, lead_lb=None, lead_ub=None,
        A_cpl=None, cpl_ub=None, H_fol=[[2.0]], g_fol=[-0.6],
        F=[[1.0]], f_c=[0.0], f_lo=[-1.0], f_hi=[1.0])
    for cut in (True, False):
        sol = solve_mpec(prob, use_follower_cut=cut)
        assert sol.u_o[0] == pytest.approx(0.3, abs=1e-7)
        assert sol.u_y[0] == pytest.approx(0.6, abs=1e-6)
        assert np.abs(np.r_[sol.lam_lo, sol.lam_hi]).max() <= 1e-6


def test_absent_bounds_are_prefixed():
    prob = _hand_problem()
    assert prob.prefix[0] == 0          # no lower bound -> multiplier pinned
    assert prob.prefix[1] == -1
    sol = solve_mpec(prob)
    assert sol.lam_lo[0] == pytest.approx(0.0, abs=1e-8)


def test_vehicle_problem_dimensions_n1():
    st = WorldState(s_x=0.0, s_y=2.5, psi=0.0, v=18.0, v_o=16.0)
    prob, fol, led, _ = _vehicle_problem(st, N=1)
    assert prob.n_f == 4
    assert prob.n_pairs == 8            # two decisions, eight multipliers
    assert prob.H_lead.shape == (2, 2)
    sol = solve_mpec(prob)
    assert sol.status == "optimal"
    assert sol.u_y.size == 1 and sol.u_o.size == 1


@pytest.mark.parametrize("state", [
    WorldState(s_x=1.0, s_y=2.5, psi=0.02, v=18.0, v_o=16.0),   # alongside
    WorldState(s_x=5.0, s_y=3.0, psi=-0.01, v=18.0, v_o=16.0),  # passed, gate on
    WorldState(s_x=4.0, s_y=2.6, psi=0.0, v=18.0, v_o=16.0),    # phase mix 2->3
])
def test_exhaustive_pattern_enumeration_n2(state):
    prob, *_ = _vehicle_problem(state, N=2)
    ref = oracles.enumerate_mpec(prob)
    assert np.isfinite(ref)
    for cut in (True, False):
        sol = solve_mpec(prob, use_follower_cut=cut)
        assert sol.status == "optimal"
        assert not sol.soft
        assert sol.objective == pytest.approx(ref, abs=1e-5)


def test_follower_cut_matches_full_search_full_horizon():
    st = WorldState(s_x=0.5, s_y=2.2, psi=0.01, v=18.0, v_o=15.0)
    vp = np.full(21, 18.0)
    vop = np.full(21, 15.0)
    out_cut = lateral_step(st, vp, vop, _cfg(20, use_follower_cut=True))
    out_bb = lateral_step(st, vp, vop, _cfg(20, use_follower_cut=False))
    assert out_cut.solution.objective == pytest.approx(
        out_bb.solution.objective, abs=1e-6)
    assert np.allclose(out_cut.delta_star_seq, out_bb.delta_star_seq, atol=1e-5)


def test_far_behind_at_matched_speed_stays_put():
    st = WorldState(s_x=-40.0, s_y=0.0, psi=0.0, v=14.0, v_o=14.0)
    out = lateral_step(st, None, None, _cfg(20))
    assert np.abs(out.delta_star_seq).max() <= 1e-6
    assert np.abs(out.a_o_star_seq).max() <= 1e-6
    assert out.solution.objective <= 1e-8
    assert out.s_y_target == 0.0
    assert not out.headway_gate


def test_output_sequences_satisfy_recursions():
    st = WorldState(s_x=2.0, s_y=2.8, psi=0.015, v=18.5, v_o=15.5)
    N = 12
    vp = np.linspace(18.5, 17.5, N + 1)
    vop = np.full(N + 1, 15.5)
    cfg = _cfg(N)
    out = lateral_step(st, vp, vop, cfg)
    dt, l = cfg.sim.dt, cfg.sim.l
    v_sh = shift_hold(vp, N)
    s_y, psi = st.s_y, st.psi
    s_x, v_o = st.s_x, st.v_o
    for k in range(N):
        s_y = s_y + v_sh[k] * dt * psi
        psi = psi + v_sh[k] * dt / l * out.delta_star_seq[k]
        s_x = s_x + (v_sh[k] - v_o) * dt
        v_o = v_o + dt * out.a_o_star_seq[k]
        assert out.s_y_star_seq[k + 1] == pytest.approx(s_y, abs=1e-9)
        assert out.psi_star_seq[k + 1] == pytest.approx(psi, abs=1e-9)
        assert out.s_x_pred_seq[k + 1] == pytest.approx(s_x, abs=1e-9)
        assert out.v_o_star_seq[k + 1] == pytest.approx(v_o, abs=1e-9)


def test_planned_offsets_respect_boundary():
    st = WorldState(s_x=1.5, s_y=2.4, psi=0.02, v=18.0, v_o=15.0)
    N = 20
    vp = np.full(N + 1, 18.0)
    vop = np.full(N + 1, 15.0)
    cfg = _cfg(N)
    out = lateral_step(st, vp, vop, cfg)
    assert not out.solution.soft
    cpl = build_coupling(st.s_x, vp, vop, cfg)
    for k in out.solution.diagnostics["coupling_steps"]:
        floor = cpl.k_seq[k] * out.s_x_pred_seq[k] + cpl.b_seq[k]
        assert out.s_y_star_seq[k] >= floor - 1e-6


def test_target_sign_mirrors_steering():
    cfg = _cfg(10)
    vp = np.full(11, 15.0)
    x_y = np.array([0.0, 0.0])
    fol = build_follower([-40.0, 15.0], vp, cfg)
    sols = []
    for tgt in (0.5, -0.5):
        led = build_leader(x_y, -40.0, vp, cfg, s_y_target=tgt)
        sols.append(solve_mpec(assemble_mpec(led, fol, None)))
    assert np.allclose(sols[0].u_y, -sols[1].u_y, atol=1e-8)


def test_boundary_rows_only_tighten():
    st = WorldState(s_x=1.5, s_y=2.4, psi=0.02, v=18.0, v_o=15.0)
    prob, fol, led, cpl = _vehicle_problem(st, N=8, vo_prev=15.0)
    with_rows = solve_mpec(prob)
    without = solve_mpec(assemble_mpec(led, fol, None))
    assert with_rows.objective >= without.objective - 1e-9


def test_soft_fallback_when_already_in_conflict():
    # alongside below the minimum clearance: no hard plan exists; the
    # planner must still steer away rather than give up
    st = WorldState(s_x=1.0, s_y=1.0, psi=0.02, v=18.0, v_o=16.0)
    out = lateral_step(st, None, None, _cfg(6))
    sol = out.solution
    assert sol.soft
    assert sol.slack > 0.1
    assert out.delta_star_seq[0] >= 0.05       # near full climb authority


def test_node_budget_reported():
    st = WorldState(s_x=1.0, s_y=2.5, psi=0.02, v=18.0, v_o=16.0)
    prob, *_ = _vehicle_problem(st, N=2)
    sol = solve_mpec(prob, use_follower_cut=False, node_budget=1)
    assert sol.status == "budget"
    assert sol.u_y.size == 2               # incumbent from the seeded dive
    ref = solve_mpec(prob, use_follower_cut=False)
    assert ref.status == "optimal"
    assert sol.objective >= ref.objective - 1e-9


def test_warm_pattern_reuse_same_answer():
    st = WorldState(s_x=4.0, s_y=2.6, psi=0.0, v=18.0, v_o=16.0)
    prob, *_ = _vehicle_problem(st, N=2)
    first = solve_mpec(prob, use_follower_cut=False)
    again = solve_mpec(prob, warm_pattern=first.pattern, use_follower_cut=False)
    assert again.objective == pytest.approx(first.objective, abs=1e-8)


def test_out_of_range_heading_is_flagged_not_fatal():
    st = WorldState(s_x=-30.0, s_y=0.5, psi=0.1, v=18.0, v_o=16.0)  # 5.7 deg
    prob, *_ = _vehicle_problem(st, N=6)
    tags = [v[0] for v in prob.meta["const_violations"]]
    assert "leader" in tags
    sol = solve_mpec(prob)
    assert sol.status == "optimal"


def test_controller_bootstrap_and_shapes():
    cfg = _cfg(20)
    ctl = LateralController(cfg)
    st = WorldState(s_x=-35.0, s_y=0.2, psi=0.0, v=16.0, v_o=14.0)
    out = ctl.step(st)
    assert out.delta_star_seq.shape == (20,)
    assert out.a_o_star_seq.shape == (20,)
    assert out.v_o_star_seq.shape == (21,)
    assert out.s_y_star_seq.shape == (21,)
    assert out.s_x_pred_seq.shape == (21,)
    assert ctl._warm is not None
    out2 = ctl.step(st, np.full(21, 16.0), np.full(21, 14.0))
    assert out2.solution.status == "optimal"
    lim = cfg.limits
    assert np.all(out.delta_star_seq >= lim.delta_min - 1e-12)
    assert np.all(out.delta_star_seq <= lim.delta_max + 1e-12)


def test_random_behind_states_solve_clean(rng_seed=20240817):
    rng = np.random.default_rng(rng_seed)
    cfg = _cfg(20)
    for _ in range(12):
        v_o = rng.uniform(11.0, 16.0)
        st = WorldState(s_x=rng.uniform(-45.0, -38.0),
                        s_y=rng.uniform(0.3, 1.0),
                        psi=rng.uniform(-0.03, 0.03),
                        v=v_o + rng.uniform(0.0, 3.5), v_o=v_o)
        out = lateral_step(st, None, None, cfg)
        sol = out.solution
        assert sol.status == "optimal"
        assert not sol.soft
        assert sol.max_comp_product <= 1e-6
        lim = cfg.limits
        assert np.all(np.abs(out.delta_star_seq) <= lim.delta_max + 1e-12)
        assert np.all(out.v_o_star_seq <= lim.vo_max + 1e-9)
        assert np.all(out.v_o_star_seq >= lim.vo_min - 1e-9)


# ---------------------------------------------------------------- cushion

def test_boundary_backoff_gating():
    cfg = _cfg(20)
    assert boundary_backoff(None, cfg) is None
    assert boundary_backoff(0.0, cfg) is None
    off = _cfg(20, chance_cushion=False)
    assert boundary_backoff(0.3, off) is None


def test_boundary_backoff_matches_stochastic_margin_form():
    cfg = _cfg(20, beta=0.05)
    back = boundary_backoff(0.3, cfg)
    assert back.shape == (21,)
    ref = chance_quantile(0.05) * accel_noise_position_std(0.3, 20,
                                                           cfg.sim.dt)
    np.testing.assert_allclose(back, ref, atol=1e-15)
    # the first two entries carry no uncertainty yet
    assert back[0] == back[1] == 0.0
    assert np.all(np.diff(back[1:]) > 0.0)


def test_coupling_lift_scales_with_boundary_slope():
    cfg = _cfg(20)
    vp = np.full(21, 16.0)
    vop = np.full(21, 14.0)
    back = boundary_backoff(0.3, cfg)
    bare = build_coupling(-12.0, vp, vop, cfg)
    lifted = build_coupling(-12.0, vp, vop, cfg, backoff_seq=back)
    np.testing.assert_allclose(lifted.b_seq - bare.b_seq,
                               np.abs(bare.k_seq) * back, atol=1e-12)
    # alongside rows are flat (k = 0): the lift vanishes there
    flat = bare.k_seq == 0.0
    assert np.array_equal(lifted.b_seq[flat], bare.b_seq[flat])
    with pytest.raises(ValueError, match="match the horizon"):
        build_coupling(-12.0, vp, vop, cfg, backoff_seq=back[:-1])


def test_lateral_step_consumes_variance():
    cfg = _cfg(20)
    st = WorldState(s_x=-12.0, s_y=1.8, psi=0.0, v=16.0, v_o=14.0)
    vp = np.full(21, 16.0)
    vop = np.full(21, 14.0)
    bare = lateral_step(st, vp, vop, cfg)
    lifted = lateral_step(st, vp, vop, cfg, sigma2=0.3)
    # same tracking problem against a raised approach line: the planned
    # lateral path may only move up where the back-off is active
    gap = lifted.s_y_star_seq - bare.s_y_star_seq
    assert gap[2:].min() > -1e-8
    assert gap.max() > 1e-3
