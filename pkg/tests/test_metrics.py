import math

import numpy as np
import pytest

from overtake.geometry import derive_params
from overtake.metrics import (
    CRITICAL_CLEARANCE,
    CRITICAL_HEADWAY,
    Metrics,
    compute_metrics,
    cut_in_window,
)
from overtake.traceio import TraceLog, TraceRecord

GEOM = derive_params()
DIVIDER = GEOM.W_l / 2.0      # 1.825


def _trace(s_y, s_x=None, targets=None, psi=0.0, v=17.0, v_o=14.0,
           delta=0.0, overlap=None, dt=0.1, echo=None, aborted=False):
    """Trace with the given kinematic columns; everything else benign."""
    n = len(s_y)

    def seq(value):
        arr = np.broadcast_to(np.asarray(value, dtype=float), (n,))
        return arr.astype(float)

    s_x = seq(np.linspace(-10.0, 10.0, n) if s_x is None else s_x)
    s_y = seq(s_y)
    targets = seq(0.0 if targets is None else targets)
    psi, v, v_o, delta = seq(psi), seq(v), seq(v_o), seq(delta)
    overlap = [False] * n if overlap is None else list(overlap)
    records = [
        TraceRecord(
            step=k, t=k * dt, s_x=s_x[k], s_y=s_y[k], psi=psi[k],
            v=v[k], v_o=v_o[k], a_cmd=0.0, delta_cmd=delta[k], a_ov=0.0,
            s_y_target=targets[k], headway_gate=False, phase=1, sigma2=0.04,
            boundary_margin=1.0, chance_margin_max=0.0,
            mpec_status="optimal", mpec_nodes=1, mpec_soft=False,
            qp_status="optimal", qp_soft=False, qp_slack=0.0,
            overlap=overlap[k], wall_time=0.01)
        for k in range(n)
    ]
    return TraceLog(records=records, config_echo=echo or {}, aborted=aborted)


# -------------------------------------------------------------- window

def test_cut_in_window_bounds():
    s_y = [2.0, 2.0, 2.0, 1.0, 0.6, 0.3, 0.1, 0.04, 0.0, 0.0]
    targets = [2.2] * 3 + [0.0] * 7
    trace = _trace(s_y, targets=targets)
    # starts after the last away cycle, stops one past the settle cycle
    assert cut_in_window(trace) == (3, 8)


def test_cut_in_window_none_without_pass():
    assert cut_in_window(_trace([0.0] * 5)) is None
    # target still away on the final cycle: the maneuver never started
    assert cut_in_window(_trace([2.0] * 5, targets=[2.2] * 5)) is None


def test_cut_in_window_runs_to_end_without_settling():
    trace = _trace([2.0, 1.5, 1.0, 0.8], targets=[2.2, 0.0, 0.0, 0.0])
    assert cut_in_window(trace) == (1, 4)


# -------------------------------------------------------------- rms pair

def test_rms_closed_form_inside_window():
    n = 10
    s_y = [2.0, 2.0, 2.0, 1.0, 0.6, 0.3, 0.1, 0.04, 0.0, 0.0]
    targets = [2.2] * 3 + [0.0] * 7
    # loud outside the window, quiet inside: the window must mask it
    psi = np.where(np.arange(n) < 3, 0.5, 0.01)
    delta = np.where(np.arange(n) < 3, 0.2, 0.01)
    trace = _trace(s_y, targets=targets, psi=psi, v=17.0, delta=delta)
    m = compute_metrics(trace)
    assert m.rms_heading_deg == pytest.approx(math.degrees(0.01), rel=1e-12)
    # a_y = v^2 delta / wheelbase = 17^2 * 0.01 / 2.5
    assert m.rms_lateral_accel == pytest.approx(1.156, rel=1e-12)


def test_rms_nan_without_cut_in():
    m = compute_metrics(_trace([0.0] * 5))
    assert math.isnan(m.rms_heading_deg)
    assert math.isnan(m.rms_lateral_accel)


def test_wheelbase_from_echo_scales_lateral_accel():
    s_y = [2.0, 1.0, 0.0]
    targets = [2.2, 0.0, 0.0]
    base = compute_metrics(_trace(s_y, targets=targets, delta=0.01))
    doubled = compute_metrics(_trace(s_y, targets=targets, delta=0.01,
                                     echo={"sim": {"wheelbase": 5.0}}))
    assert doubled.rms_lateral_accel == pytest.approx(
        0.5 * base.rms_lateral_accel)


# -------------------------------------------------------------- occupancy

def test_lane_occupancy_counts_cycles_past_divider():
    s_y = [0.0, 1.9, 2.2, 2.2, 1.8, 0.0]
    m = compute_metrics(_trace(s_y, dt=0.1))
    assert m.lane_occupancy_time == pytest.approx(0.3)   # 1.9, 2.2, 2.2
    assert compute_metrics(_trace([0.0] * 6)).lane_occupancy_time == 0.0


# -------------------------------------------------------------- headway

def test_min_headway_after_merge_back():
    s_y = [0.0, 2.0, 2.0, 2.0, 0.5, 0.0, 0.0]
    s_x = [-10.0, -5.0, 0.0, 5.0, 8.0, 12.0, 16.0]
    m = compute_metrics(_trace(s_y, s_x=s_x, v_o=14.0))
    assert m.min_headway_time == pytest.approx(8.0 / 14.0)
    assert m.completed_overtake


def test_min_headway_none_cases():
    # never leaves the lane
    assert compute_metrics(_trace([0.0] * 5)).min_headway_time is None
    # leaves but never comes back
    m = compute_metrics(_trace([0.0, 2.0, 2.0, 2.0]))
    assert m.min_headway_time is None
    assert not m.completed_overtake


def test_min_headway_infinite_behind_stopped_vehicle():
    s_y = [2.0, 2.0, 0.0]
    s_x = [0.0, 3.0, 6.0]
    m = compute_metrics(_trace(s_y, s_x=s_x, v_o=0.05))
    assert math.isinf(m.min_headway_time)


# -------------------------------------------------------------- clearance

def test_min_lateral_distance_center_to_center():
    s_y = [0.0, 2.6, 2.2, 2.4, 0.0]
    s_x = [-20.0, -4.0, 0.0, 4.0, 20.0]
    m = compute_metrics(_trace(s_y, s_x=s_x))
    assert m.min_lateral_distance == pytest.approx(2.2)


def test_min_lateral_distance_none_when_never_alongside():
    m = compute_metrics(_trace([0.0, 2.0, 0.0],
                               s_x=[-50.0, -30.0, -10.0]))
    assert m.min_lateral_distance is None


def test_alongside_window_follows_echo_footprint():
    s_y = [2.5, 2.0]
    s_x = [0.0, 3.0]
    wide = compute_metrics(_trace(s_y, s_x=s_x))
    # footprint shorter than 3 m: the second cycle leaves the window
    narrow = compute_metrics(_trace(s_y, s_x=s_x,
                                    echo={"footprint": {"length": 2.0}}))
    assert wide.min_lateral_distance == pytest.approx(2.0)
    assert narrow.min_lateral_distance == pytest.approx(2.5)


# -------------------------------------------------------------- verdicts

def test_collision_and_abort_block_completion():
    s_y = [0.0, 2.0, 2.0, 0.0]
    s_x = [-5.0, 0.0, 5.0, 10.0]
    crash = compute_metrics(_trace(s_y, s_x=s_x,
                                   overlap=[False, True, False, False]))
    assert crash.collision
    assert not crash.completed_overtake
    aborted = compute_metrics(_trace(s_y, s_x=s_x, aborted=True))
    assert not aborted.collision
    assert not aborted.completed_overtake
    assert aborted.aborted


def test_empty_trace_scores_blank():
    m = compute_metrics(TraceLog())
    assert math.isnan(m.rms_heading_deg)
    assert m.lane_occupancy_time == 0.0
    assert m.min_headway_time is None
    assert m.min_lateral_distance is None
    assert m.n_steps == 0
    assert not m.completed_overtake


def test_as_dict_round_trips_fields():
    m = compute_metrics(_trace([0.0] * 3))
    d = m.as_dict()
    assert d["n_steps"] == 3
    assert set(d) == set(Metrics.__dataclass_fields__)


# -------------------------------------------------------------- critical

def _metrics(headway, lateral, collision=False):
    return Metrics(rms_heading_deg=0.2, rms_lateral_accel=0.1,
                   lane_occupancy_time=20.0, min_headway_time=headway,
                   min_lateral_distance=lateral, collision=collision,
                   completed_overtake=True, mean_wall_time=0.01,
                   max_wall_time=0.02, n_steps=500, aborted=False)


def test_critical_flag_thresholds():
    assert not _metrics(1.2, 2.2).critical
    assert _metrics(CRITICAL_HEADWAY - 1e-6, 2.2).critical
    assert _metrics(1.2, CRITICAL_CLEARANCE - 1e-6).critical
    assert _metrics(1.2, 2.2, collision=True).critical
    # missing margins alone never flag
    assert not _metrics(None, None).critical
