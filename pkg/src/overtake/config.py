"""Scenario configuration: one document that seeds a whole closed-loop run.

A scenario is a nested key-value document (YAML on disk) covering the
plant, the actuator limits, the occupancy footprint, both controller
weight sets, the other vehicle's behavior, the driver-variance source,
the initial relative state and the experiment seed.  ``load_scenario``
deep-merges the document over the built-in defaults so scenario files
only spell out what they change.
"""

from __future__ import annotations

import copy
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .geometry import OccupancyParams, derive_params
from .lateral import LateralConfig, LateralWeights
from .longitudinal import LongitudinalConfig, LongitudinalWeights
from .ov_sim import OvBehavior, OvConfig, SpeedProfile, load_speed_profile, make_behavior
from .uncertainty import VarianceCurve, default_curve, load_curve
from .vehicles import SimParams, VehicleLimits, WorldState

DEFAULT_DOC: dict = {
    "sim": {"dt": 0.1, "wheelbase": 2.5, "t_total": 50.0},
    "limits": {
        "v_max": 19.67, "v_min": 0.0,
        "vo_max": 17.88, "vo_min": 0.0,
        "a_max": 2.33, "a_min": -6.5,
        "delta_max_deg": 5.0, "psi_max_deg": 5.0,
    },
    "footprint": {
        "length": 4.4, "width": 1.82, "lane_width": 3.65,
        "standstill_gap": 6.08, "min_headway_time": 1.5,
    },
    "lateral": {
        "w_lat": 1.0, "w_heading": 24000.0, "w_steer": 48000.0,
        "q_gap": 0.05, "q_speed": 1.0, "q_accel": 8.0,
        "t_target": 2.0, "node_budget": 5000, "follower_cut": True,
        "chance_cushion": True,
    },
    "longitudinal": {"p_dist": 5.0, "q_speed": 1.0, "q_accel": 2.0,
                     "beta": 0.05},
    "horizon": 20,
    "ov": {"mode": "polite", "profile": 14.0, "noise": True},
    "variance_curve": None,
    "initial": {"s_x": -40.0, "s_y": 0.0, "psi": 0.0, "v": 14.0, "v_o": 14.0},
    "seed": 0,
}

# Keys an ``ov`` block may carry beyond the baseline three.
_OV_TUNABLES = ("w_gap", "w_speed", "w_accel", "t_target")


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def merge_overrides(doc: dict, overrides: dict) -> dict:
    """Apply dotted-path overrides (``{"longitudinal.p_dist": 16}``)."""
    out = copy.deepcopy(doc)
    for path, value in overrides.items():
        node = out
        parts = str(path).split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"override path {path!r} crosses a scalar")
        node[parts[-1]] = value
    return out


@dataclass
class ScenarioConfig:
    """Fully resolved scenario: built parameter objects plus the source doc."""

    sim: SimParams
    limits: VehicleLimits
    geom: OccupancyParams
    lateral_weights: LateralWeights
    longitudinal_weights: LongitudinalWeights
    beta: float
    horizon: int
    node_budget: int
    follower_cut: bool
    chance_cushion: bool
    ov_behavior: OvBehavior
    ov_noise: bool
    curve: VarianceCurve
    initial: WorldState
    seed: int
    doc: dict = field(default_factory=dict, repr=False)

    @property
    def n_steps(self) -> int:
        return self.sim.n_steps

    def lateral_config(self) -> LateralConfig:
        return LateralConfig(sim=self.sim, limits=self.limits, geom=self.geom,
                             weights=self.lateral_weights,
                             horizon=self.horizon,
                             use_follower_cut=self.follower_cut,
                             node_budget=self.node_budget,
                             beta=self.beta,
                             chance_cushion=self.chance_cushion)

    def longitudinal_config(self) -> LongitudinalConfig:
        return LongitudinalConfig(sim=self.sim, limits=self.limits,
                                  geom=self.geom,
                                  weights=self.longitudinal_weights,
                                  beta=self.beta, horizon=self.horizon)

    def ov_config(self) -> OvConfig:
        return OvConfig(sim=self.sim, limits=self.limits, geom=self.geom,
                        horizon=self.horizon)


def _build_profile(spec, base_dir: Path, v_cap: float) -> SpeedProfile:
    if isinstance(spec, (int, float)):
        return SpeedProfile(times=[0.0], speeds=[min(float(spec), v_cap)])
    if isinstance(spec, str):
        return load_speed_profile(base_dir / spec, v_cap=v_cap)
    if isinstance(spec, dict) and {"times", "speeds"} <= set(spec):
        speeds = [min(float(v), v_cap) for v in spec["speeds"]]
        return SpeedProfile(times=[float(t) for t in spec["times"]],
                            speeds=speeds)
    raise ValueError("ov profile must be a constant speed, a csv path, or "
                     "a {times, speeds} table")


def scenario_from_dict(doc: dict, base_dir=None) -> ScenarioConfig:
    """Resolve a scenario document into built parameter objects.

    Relative paths (speed profile, variance curve) are taken against
    ``base_dir``, normally the directory the document was loaded from.
    """
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    merged = _deep_merge(DEFAULT_DOC, doc or {})

    sim_doc = merged["sim"]
    sim = SimParams(dt=float(sim_doc["dt"]), l=float(sim_doc["wheelbase"]),
                    t_total=float(sim_doc["t_total"]))
    lim_doc = merged["limits"]
    limits = VehicleLimits(
        v_max=float(lim_doc["v_max"]), v_min=float(lim_doc["v_min"]),
        vo_max=float(lim_doc["vo_max"]), vo_min=float(lim_doc["vo_min"]),
        a_max=float(lim_doc["a_max"]), a_min=float(lim_doc["a_min"]),
        delta_max=math.radians(float(lim_doc["delta_max_deg"])),
        psi_max=math.radians(float(lim_doc["psi_max_deg"])))
    if limits.v_max <= limits.vo_max:
        raise ValueError("the ego speed cap must exceed the overtaken "
                         f"vehicle's ({limits.v_max} <= {limits.vo_max}); "
                         "a pass is impossible otherwise")

    fp = merged["footprint"]
    geom = derive_params(L_v=float(fp["length"]), W_v=float(fp["width"]),
                         psi_max=limits.psi_max,
                         d_X0=float(fp["standstill_gap"]),
                         t_min=float(fp["min_headway_time"]),
                         W_l=float(fp["lane_width"]))

    lat = merged["lateral"]
    lateral_weights = LateralWeights(
        w_lat=float(lat["w_lat"]), w_heading=float(lat["w_heading"]),
        w_steer=float(lat["w_steer"]), q_gap=float(lat["q_gap"]),
        q_speed=float(lat["q_speed"]), q_accel=float(lat["q_accel"]),
        t_target=float(lat["t_target"]))

    lon = merged["longitudinal"]
    longitudinal_weights = LongitudinalWeights(
        P_x=float(lon["p_dist"]),
        Q_x=[[float(lon["q_speed"]), 0.0], [0.0, float(lon["q_accel"])]])

    horizon = int(merged["horizon"])
    if horizon < 1:
        raise ValueError("horizon must be at least one step")
    if horizon * sim.dt > sim.t_total + 1e-12:
        raise ValueError(
            f"planning horizon ({horizon * sim.dt:.1f} s) exceeds the "
            f"simulated span ({sim.t_total:.1f} s)")

    ov_doc = merged["ov"]
    profile = _build_profile(ov_doc.get("profile", 14.0), base_dir,
                             v_cap=limits.vo_max)
    tweaks = {k: float(ov_doc[k]) for k in _OV_TUNABLES if k in ov_doc}
    behavior = make_behavior(str(ov_doc["mode"]), profile, **tweaks)

    curve_spec = merged["variance_curve"]
    curve = default_curve() if curve_spec is None \
        else load_curve(base_dir / str(curve_spec))

    init = merged["initial"]
    initial = WorldState(s_x=float(init["s_x"]), s_y=float(init["s_y"]),
                         psi=float(init["psi"]), v=float(init["v"]),
                         v_o=float(init["v_o"]))

    return ScenarioConfig(
        sim=sim, limits=limits, geom=geom,
        lateral_weights=lateral_weights,
        longitudinal_weights=longitudinal_weights,
        beta=float(lon["beta"]), horizon=horizon,
        node_budget=int(lat["node_budget"]),
        follower_cut=bool(lat["follower_cut"]),
        chance_cushion=bool(lat["chance_cushion"]),
        ov_behavior=behavior, ov_noise=bool(ov_doc["noise"]),
        curve=curve, initial=initial, seed=int(merged["seed"]),
        doc=merged)


def load_scenario(path, overrides: dict | None = None) -> ScenarioConfig:
    path = Path(path)
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path} does not hold a scenario mapping")
    if overrides:
        doc = merge_overrides(doc, overrides)
    return scenario_from_dict(doc, base_dir=path.parent)


def default_scenario(overrides: dict | None = None,
                     base_dir=None) -> ScenarioConfig:
    doc = merge_overrides({}, overrides) if overrides else {}
    return scenario_from_dict(doc, base_dir=base_dir)


def expand_grid(grid_doc) -> list[dict]:
    """Turn a sweep grid document into a list of override mappings.

    Accepts either an explicit point list (``points: [{...}, ...]``) or
    a cross product over per-key value lists (``product: {key: [...]}``).
    A bare list is read as a point list.
    """
    if isinstance(grid_doc, list):
        grid_doc = {"points": grid_doc}
    if not isinstance(grid_doc, dict):
        raise ValueError("sweep grid must be a list or a mapping")
    if "points" in grid_doc:
        points = grid_doc["points"]
        if not all(isinstance(p, dict) for p in points):
            raise ValueError("each sweep point must be an override mapping")
        return [dict(p) for p in points]
    if "product" in grid_doc:
        axes = grid_doc["product"]
        if not isinstance(axes, dict) or not axes:
            raise ValueError("product grid needs at least one axis")
        keys = sorted(axes)
        combos = itertools.product(*(axes[k] for k in keys))
        return [dict(zip(keys, combo)) for combo in combos]
    raise ValueError("sweep grid needs a 'points' or 'product' entry")


def load_grid(path) -> list[dict]:
    with open(path) as fh:
        return expand_grid(yaml.safe_load(fh))
