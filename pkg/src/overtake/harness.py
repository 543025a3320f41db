"""Closed-loop experiment harness.

One control cycle measures the relative state, runs the lateral game,
feeds its plan to the stochastic longitudinal stage, lets the other
vehicle pick its own acceleration from the same measurement, then
applies the first planned inputs to the nonlinear plant.  The exact
occupancy oracle runs on every measured state.  A controller failure
that survives the built-in fallbacks aborts the run and returns the
partial trace instead of raising.

Everything random sits inside the other vehicle's noise stream, so a
given scenario document and seed reproduce a trace bit for bit.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from time import perf_counter

import numpy as np

from .config import ScenarioConfig, merge_overrides, scenario_from_dict
from .geometry import active_phase, anchor_x, line_for_phase, polygons_overlap
from .lateral import (LateralController, assemble_mpec, boundary_backoff,
                      build_coupling,
                      build_follower, build_leader, _solve_follower)
from .longitudinal import LongitudinalController
from .metrics import compute_metrics
from .ov_sim import OvSimulator
from .traceio import TraceLog, TraceRecord
from .uncertainty import variance_for_state
from .vehicles import ControlInput, WorldState, step_plant

log = logging.getLogger(__name__)

_BOUND_TOL = 1e-7


def _boundary_margin(state: WorldState, geom) -> tuple[int, float]:
    """Clearance of the current pose above the active boundary line."""
    s_Xa, s_Xe = anchor_x(state.v, state.v_o, geom)
    phase = active_phase(state.s_x, geom)
    line = line_for_phase(phase, s_Xa, s_Xe, geom)
    return phase, float(state.s_y - line.value(state.s_x))


def run_closed_loop(cfg: ScenarioConfig, n_steps: int | None = None,
                    keep_sequences: bool = True) -> TraceLog:
    """Simulate one scenario end to end and return its trace."""
    n_steps = cfg.n_steps if n_steps is None else int(n_steps)
    lateral = LateralController(cfg.lateral_config())
    longitudinal = LongitudinalController(cfg.longitudinal_config())
    other = OvSimulator(cfg.ov_behavior, cfg.ov_config(),
                        noise_curve=cfg.curve if cfg.ov_noise else None,
                        seed=cfg.seed)
    trace = TraceLog(config_echo=cfg.doc)
    state = cfg.initial
    vo_prev = None
    dt = cfg.sim.dt

    for k in range(n_steps):
        t = k * dt
        tic = perf_counter()
        sigma2 = variance_for_state(state.s_x, state.v_o, cfg.curve)
        try:
            lat = lateral.step(state, longitudinal.v_star_prev, vo_prev,
                               sigma2=sigma2)
            lon = longitudinal.step(state, lat, sigma2)
        except RuntimeError as exc:
            trace.aborted = True
            trace.abort_reason = f"cycle {k}: {exc}"
            log.warning("run aborted at cycle %d: %s", k, exc)
            break
        a_cmd = float(lon.a_star_seq[0])
        delta_cmd = float(lat.delta_star_seq[0])
        a_ov = other.step(t, state)
        nxt = step_plant(state, ControlInput(a=a_cmd, delta=delta_cmd),
                         a_ov, cfg.sim, cfg.limits)
        wall = perf_counter() - tic

        phase, margin = _boundary_margin(state, cfg.geom)
        record = TraceRecord(
            step=k, t=t,
            s_x=state.s_x, s_y=state.s_y, psi=state.psi,
            v=state.v, v_o=state.v_o,
            a_cmd=a_cmd, delta_cmd=delta_cmd, a_ov=a_ov,
            s_y_target=lat.s_y_target, headway_gate=lat.headway_gate,
            phase=phase, sigma2=sigma2,
            boundary_margin=margin,
            chance_margin_max=float(lon.margins.max()),
            mpec_status=lat.solution.status,
            mpec_nodes=lat.solution.node_count,
            mpec_soft=lat.solution.soft,
            qp_status=str(lon.diagnostics.get("qp_status", "")),
            qp_soft=lon.soft, qp_slack=lon.slack,
            overlap=polygons_overlap((state.s_x, state.s_y), (0.0, 0.0),
                                     cfg.geom),
            wall_time=wall)
        if keep_sequences:
            record.v_star_seq = lon.v_star_seq
            record.v_o_star_seq = lat.v_o_star_seq
            record.a_star_seq = lon.a_star_seq
            record.delta_star_seq = lat.delta_star_seq
            record.a_o_star_seq = lat.a_o_star_seq
        trace.records.append(record)
        state = nxt
        vo_prev = lat.v_o_star_seq
    return trace


def follower_deviation(trace: TraceLog, cfg: ScenarioConfig) -> np.ndarray:
    """Per-cycle optimality audit of the predicted driver response.

    Rebuilds the follower stage exactly as the planner saw it (same
    measured state, same recycled speed plans) and re-solves it alone,
    with the leader's plan held fixed.  Returns the max deviation
    between that best response and the logged follower plan, one entry
    per cycle.  Requires a trace that kept its planned sequences.
    """
    lat_cfg = cfg.lateral_config()
    N = cfg.horizon
    devs = np.empty(len(trace))
    v_prev = None
    vo_prev = None
    for i, rec in enumerate(trace.records):
        if rec.a_o_star_seq is None:
            raise ValueError("trace does not carry planned sequences")
        state_v = np.array([rec.s_x, rec.v_o])
        vp = np.full(N + 1, rec.v) if v_prev is None else v_prev
        vop = np.full(N + 1, rec.v_o) if vo_prev is None else vo_prev
        follower = build_follower(state_v, vp, lat_cfg)
        leader = build_leader(np.array([rec.s_y, rec.psi]), rec.s_x, vp,
                              lat_cfg)
        coupling = build_coupling(rec.s_x, vp, vop, lat_cfg,
                                  backoff_seq=boundary_backoff(rec.sigma2,
                                                               lat_cfg))
        problem = assemble_mpec(leader, follower, coupling)
        best = _solve_follower(problem)
        if best.status != "optimal":
            devs[i] = np.inf
        else:
            devs[i] = float(np.abs(best.u_star - rec.a_o_star_seq).max())
        v_prev = rec.v_star_seq
        vo_prev = rec.v_o_star_seq
    return devs


def validate_trace(trace: TraceLog, cfg: ScenarioConfig | None = None) -> list:
    """Invariant suite over a trace.  Returns a list of violations."""
    problems: list[str] = []
    n = len(trace)
    if n == 0:
        return ["trace is empty"]

    steps = trace.column("step")
    if not np.array_equal(steps, np.arange(n)):
        problems.append("step indices are not 0..n-1")
    t = trace.column("t")
    if n > 1:
        dts = np.diff(t)
        if not (dts > 0).all():
            problems.append("timestamps are not strictly increasing")
        elif np.abs(dts - dts[0]).max() > 1e-9:
            problems.append("timestamps are not uniformly spaced")

    for name in ("s_x", "s_y", "psi", "v", "v_o", "a_cmd", "delta_cmd",
                 "a_ov", "sigma2", "boundary_margin", "chance_margin_max",
                 "qp_slack", "wall_time"):
        if not np.isfinite(trace.column(name)).all():
            problems.append(f"column {name} holds non-finite values")

    phase = trace.column("phase")
    if not np.isin(phase, (1, 2, 3)).all():
        problems.append("phase outside {1, 2, 3}")
    if (trace.column("sigma2") < 0).any():
        problems.append("negative driver variance")
    if (trace.column("wall_time") < 0).any():
        problems.append("negative wall time")

    if cfg is not None:
        lim = cfg.limits
        checks = [
            ("v", lim.v_min, lim.v_max),
            ("v_o", lim.vo_min, lim.vo_max),
            ("a_cmd", lim.a_min, lim.a_max),
            ("a_ov", lim.a_min, lim.a_max),
            ("delta_cmd", lim.delta_min, lim.delta_max),
        ]
        for name, lo, hi in checks:
            col = trace.column(name)
            if (col < lo - _BOUND_TOL).any() or (col > hi + _BOUND_TOL).any():
                problems.append(f"column {name} leaves [{lo:.4g}, {hi:.4g}]")
        if not trace.aborted and n != cfg.n_steps:
            problems.append(
                f"expected {cfg.n_steps} records, found {n}")

    has_seqs = all(r.a_star_seq is not None and r.delta_star_seq is not None
                   for r in trace.records)
    if has_seqs:
        for rec in trace.records:
            if abs(float(rec.a_star_seq[0]) - rec.a_cmd) > 1e-12 \
                    or abs(float(rec.delta_star_seq[0])
                           - rec.delta_cmd) > 1e-12:
                problems.append(
                    f"cycle {rec.step}: applied input is not the first "
                    "planned element")
                break
    return problems


def _sweep_point(task) -> dict:
    doc, base_dir, overrides, n_steps = task
    result = {"overrides": dict(overrides), "error": None,
              "metrics": None, "critical": None}
    try:
        cfg = scenario_from_dict(merge_overrides(doc, overrides),
                                 base_dir=Path(base_dir))
        trace = run_closed_loop(cfg, n_steps=n_steps, keep_sequences=False)
        scored = compute_metrics(trace, geom=cfg.geom, wheelbase=cfg.sim.l)
        result["metrics"] = scored.as_dict()
        result["critical"] = scored.critical
        if trace.aborted:
            result["error"] = trace.abort_reason
    except Exception as exc:  # a failed point must not sink the sweep
        result["error"] = f"{type(exc).__name__}: {exc}"
    return result


def pareto_sweep(doc: dict, grid: list, jobs: int | None = None,
                 base_dir=None, n_steps: int | None = None) -> list:
    """Run one closed loop per weight setting; never let one point fail
    the batch.  ``jobs=1`` stays in-process, anything else fans out to
    worker processes."""
    base = str(base_dir) if base_dir is not None else str(Path.cwd())
    tasks = [(doc, base, overrides, n_steps) for overrides in grid]
    if jobs == 1 or len(tasks) <= 1:
        return [_sweep_point(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_sweep_point, tasks))
