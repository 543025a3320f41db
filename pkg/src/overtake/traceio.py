"""Closed-loop trace records and their on-disk forms.

A run produces one record per control cycle.  The delimited trace holds
the scalar columns below, in this order; the planned sequences ride
along in memory only (they back the plumbing audits but would bloat a
flat file).  A JSON sidecar summarizes the run: metrics, solver
statistics, the scenario document and the library versions.

Column order::

    step         control cycle index
    t            wall-clock time of the measurement [s]
    s_x, s_y     EV center offsets from the OV center [m]
    psi          EV relative heading [rad]
    v, v_o       EV / OV speeds [m/s]
    a_cmd        applied EV acceleration (first planned element) [m/s^2]
    delta_cmd    applied EV steering (first planned element) [rad]
    a_ov         acceleration the OV actually applied [m/s^2]
    s_y_target   lateral reference the planner tracked [m]
    headway_gate 1 while the follower's gap-restoration term is active
    phase        occupancy phase at the measured offset (1/2/3)
    sigma2       driver-variance level fed to the stochastic planner
    boundary_margin   s_y clearance above the active boundary line [m]
    chance_margin_max largest chance back-off along the horizon [m]
    mpec_status  lateral solver outcome ("optimal" | "budget")
    mpec_nodes   nodes expanded by the lateral solver
    mpec_soft    1 if the lateral stage needed the penalty fallback
    qp_status    longitudinal solver outcome
    qp_soft      1 if the longitudinal stage needed the penalty fallback
    qp_slack     slack spent by the longitudinal fallback [m]
    overlap      1 if the exact occupancy oracle reports interior overlap
    wall_time    wall time of the full cycle (plan + plant) [s]
"""

from __future__ import annotations

import csv
import json
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRACE_COLUMNS = [
    "step", "t", "s_x", "s_y", "psi", "v", "v_o",
    "a_cmd", "delta_cmd", "a_ov",
    "s_y_target", "headway_gate", "phase", "sigma2",
    "boundary_margin", "chance_margin_max",
    "mpec_status", "mpec_nodes", "mpec_soft",
    "qp_status", "qp_soft", "qp_slack",
    "overlap", "wall_time",
]

_INT_COLUMNS = {"step", "headway_gate", "phase", "mpec_nodes", "mpec_soft",
                "qp_soft", "overlap"}
_STR_COLUMNS = {"mpec_status", "qp_status"}


@dataclass
class TraceRecord:
    step: int
    t: float
    s_x: float
    s_y: float
    psi: float
    v: float
    v_o: float
    a_cmd: float
    delta_cmd: float
    a_ov: float
    s_y_target: float
    headway_gate: bool
    phase: int
    sigma2: float
    boundary_margin: float
    chance_margin_max: float
    mpec_status: str
    mpec_nodes: int
    mpec_soft: bool
    qp_status: str
    qp_soft: bool
    qp_slack: float
    overlap: bool
    wall_time: float
    # planned sequences, kept in memory for the plumbing audits
    v_star_seq: np.ndarray | None = None
    v_o_star_seq: np.ndarray | None = None
    a_star_seq: np.ndarray | None = None
    delta_star_seq: np.ndarray | None = None
    a_o_star_seq: np.ndarray | None = None

    def row(self) -> list:
        out = []
        for name in TRACE_COLUMNS:
            value = getattr(self, name)
            if name in _STR_COLUMNS:
                out.append(value)
            elif name in _INT_COLUMNS:
                out.append(int(value))
            else:
                out.append(repr(float(value)))
        return out


@dataclass
class TraceLog:
    """Every control cycle of one run, in order, plus the scenario echo."""

    records: list[TraceRecord] = field(default_factory=list)
    config_echo: dict = field(default_factory=dict)
    aborted: bool = False
    abort_reason: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        if name in _STR_COLUMNS:
            return np.array([getattr(r, name) for r in self.records])
        dtype = int if name in _INT_COLUMNS else float
        return np.array([dtype(getattr(r, name)) for r in self.records])


def write_trace_csv(trace: TraceLog, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for record in trace.records:
            writer.writerow(record.row())
    return path


def _coerce(name: str, text: str):
    if name in _STR_COLUMNS:
        return text
    if name in _INT_COLUMNS:
        return int(text)
    return float(text)


def read_trace_csv(path) -> TraceLog:
    path = Path(path)
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACE_COLUMNS:
            raise ValueError(f"{path} is not a trace file (header mismatch)")
        for row in reader:
            fields = {name: _coerce(name, text)
                      for name, text in zip(TRACE_COLUMNS, row)}
            fields["headway_gate"] = bool(fields["headway_gate"])
            fields["mpec_soft"] = bool(fields["mpec_soft"])
            fields["qp_soft"] = bool(fields["qp_soft"])
            fields["overlap"] = bool(fields["overlap"])
            records.append(TraceRecord(**fields))
    return TraceLog(records=records)


def write_trace_json(trace: TraceLog, path) -> Path:
    path = Path(path)
    payload = {
        "columns": TRACE_COLUMNS,
        "records": [dict(zip(TRACE_COLUMNS,
                             [getattr(r, c) if c in _STR_COLUMNS
                              else (int(getattr(r, c))
                                    if c in _INT_COLUMNS
                                    else float(getattr(r, c)))
                              for c in TRACE_COLUMNS]))
                    for r in trace.records],
        "aborted": trace.aborted,
        "abort_reason": trace.abort_reason,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
    return path


def read_trace_json(path) -> TraceLog:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("columns") != TRACE_COLUMNS:
        raise ValueError(f"{path} is not a trace file (column mismatch)")
    records = []
    for entry in payload["records"]:
        fields = dict(entry)
        for name in ("headway_gate", "mpec_soft", "qp_soft", "overlap"):
            fields[name] = bool(fields[name])
        records.append(TraceRecord(**fields))
    return TraceLog(records=records, aborted=bool(payload.get("aborted")),
                    abort_reason=str(payload.get("abort_reason", "")))


def solver_stats(trace: TraceLog) -> dict:
    """Aggregate solver diagnostics over a trace."""
    if not trace.records:
        return {"steps": 0}
    nodes = trace.column("mpec_nodes")
    wall = trace.column("wall_time")
    return {
        "steps": len(trace),
        "mpec_nodes_median": float(np.median(nodes)),
        "mpec_nodes_max": int(nodes.max()),
        "mpec_soft_steps": int(trace.column("mpec_soft").sum()),
        "qp_soft_steps": int(trace.column("qp_soft").sum()),
        "wall_time_mean": float(wall.mean()),
        "wall_time_max": float(wall.max()),
    }


def _versions() -> dict:
    import matplotlib
    import pandas
    import scipy

    from . import __version__

    return {
        "overtake": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pandas.__version__,
        "matplotlib": matplotlib.__version__,
    }


def write_summary(trace: TraceLog, metrics_dict: dict, path,
                  extra: dict | None = None) -> Path:
    """JSON run summary: metrics, solver stats, scenario echo, versions."""
    path = Path(path)
    payload = {
        "metrics": metrics_dict,
        "solver": solver_stats(trace),
        "aborted": trace.aborted,
        "abort_reason": trace.abort_reason,
        "config": trace.config_echo,
        "versions": _versions(),
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=_json_default)
    return path


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating, np.bool_)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def read_summary(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
