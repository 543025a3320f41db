"""Statistical model of the overtaken driver's longitudinal response.

The overtaken vehicle's acceleration, conditioned on the headway time
between the two cars, is close to Gaussian with a variance that rises
while the passing car pulls alongside, peaks just after it noses ahead,
and decays exponentially as it escapes.  This module fits that variance
curve from trajectory recordings (highD-style track CSVs) and evaluates
it online for the chance-constrained speed planner.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np
import pandas as pd
from scipy.interpolate import BSpline, make_smoothing_spline
from scipy.optimize import curve_fit
from scipy.stats import norm

log = logging.getLogger(__name__)

__all__ = [
    "BAND", "PEAK_T", "VarianceCurve", "BinStats", "headway_time",
    "variance_lookup", "variance_for_state", "ingest_tracks", "fit_bins",
    "fit_variance_curve", "default_curve", "save_curve", "load_curve",
]

# interaction band of headway times where the passed driver reacts [s];
# outside it the response variance is held at the band-edge values
BAND = (-0.6, 3.0)
PEAK_T = 0.5              # variance maximum location within the band [s]
_V_FLOOR = 0.1            # below this OV speed the headway time saturates
_JOIN_TOL = 1e-6
_PEAK_EXCESS_FRAC = 0.1   # interior bumps above the junction beyond this
                          # fraction mean the data's peak is elsewhere

_DEFAULT_SCHEMA = {
    "frame": "frame",
    "id": "id",
    "x": "x",
    "lane": "laneId",
    "v": "xVelocity",
    "a": "xAcceleration",
}


@dataclass
class VarianceCurve:
    """Two-branch headway-conditioned acceleration variance, (m/s^2)^2.

    A cubic smoothing spline covers the approach side of the band, an
    exponential ``amplitude * exp(-rate * t) + offset`` the escape side,
    and constant plateaus extend both ends.
    """

    knots: np.ndarray
    coeffs: np.ndarray
    degree: int
    amplitude: float
    rate: float
    offset: float
    left_plateau: float
    right_plateau: float
    cap: float = np.inf       # junction value; the spline branch is clipped
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=float)
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        self._bs = BSpline(self.knots, self.coeffs, int(self.degree),
                           extrapolate=True)

    def __call__(self, t_x):
        return variance_lookup(t_x, self)


@dataclass
class BinStats:
    """Empirical acceleration distribution inside one headway-time bin."""

    t_x: float
    count: int
    mean: float
    variance: float
    r_squared: float          # NaN when the fit is degenerate
    degenerate: bool = False


def headway_time(s_x, v_o, v_floor=_V_FLOOR):
    """Gap between the cars expressed in travel time of the rear one.

    A (near-)standing overtaken vehicle saturates to +inf, which the
    lookup maps onto the right plateau.
    """
    s_x = np.asarray(s_x, dtype=float)
    v_o = np.asarray(v_o, dtype=float)
    out = np.where(v_o > v_floor, s_x / np.where(v_o > v_floor, v_o, 1.0),
                   np.inf)
    return float(out) if out.ndim == 0 else out


def variance_lookup(t_x, curve: VarianceCurve):
    """Evaluate the curve anywhere on the real line (plateaus outside)."""
    t = np.asarray(t_x, dtype=float)
    scalar = t.ndim == 0
    t = np.atleast_1d(t)
    out = np.empty_like(t)
    lo, hi = BAND
    left = t < lo
    right = t > hi
    spline_part = (~left & (t < PEAK_T))
    exp_part = ~left & ~right & ~spline_part
    out[left] = curve.left_plateau
    out[right] = curve.right_plateau
    if spline_part.any():
        out[spline_part] = np.minimum(curve._bs(t[spline_part]), curve.cap)
    if exp_part.any():
        out[exp_part] = (curve.amplitude * np.exp(-curve.rate * t[exp_part])
                         + curve.offset)
    out = np.maximum(out, 0.0)
    return float(out[0]) if scalar else out


def variance_for_state(s_x, v_o, curve: VarianceCurve, v_floor=_V_FLOOR):
    """Convenience composition used by the closed loop every cycle."""
    return variance_lookup(headway_time(s_x, v_o, v_floor), curve)


def ingest_tracks(path, schema=None, window=BAND, v_floor=_V_FLOOR):
    """Extract (headway time, overtaken-vehicle acceleration) samples.

    Overtaking pairs are vehicle pairs whose longitudinal positions
    cross while the faster car runs in an adjacent lane.  Rows that fail
    numeric parsing are skipped and counted; tracks recorded against the
    driving direction are mirrored first.
    """
    cols = dict(_DEFAULT_SCHEMA)
    cols.update(schema or {})
    df = pd.read_csv(path)
    missing = [c for c in cols.values() if c not in df.columns]
    if missing:
        raise ValueError(f"missing columns: {missing}")
    sub = df[list(cols.values())].apply(pd.to_numeric, errors="coerce")
    n_bad = int(sub.isna().any(axis=1).sum())
    if n_bad:
        log.warning("ingest_tracks: skipped %d malformed rows", n_bad)
    sub = sub.dropna().rename(columns={v: k for k, v in cols.items()})

    tracks = {}
    for vid, grp in sub.groupby("id"):
        grp = grp.sort_values("frame")
        flip = -1.0 if grp["v"].mean() < 0 else 1.0
        tracks[vid] = {
            "frame": grp["frame"].to_numpy(),
            "x": flip * grp["x"].to_numpy(),
            "lane": grp["lane"].to_numpy(),
            "v": flip * grp["v"].to_numpy(),
            "a": flip * grp["a"].to_numpy(),
        }

    samples = []
    for i, j in permutations(tracks, 2):          # i passes j
        ti, tj = tracks[i], tracks[j]
        common, ii, jj = np.intersect1d(ti["frame"], tj["frame"],
                                        return_indices=True)
        if common.size < 2:
            continue
        d = ti["x"][ii] - tj["x"][jj]
        if not (d[0] < 0 < d[-1]):
            continue
        if ti["v"][ii].mean() <= tj["v"][jj].mean():
            continue
        kc = int(np.argmax(d >= 0))
        if abs(ti["lane"][ii][kc] - tj["lane"][jj][kc]) != 1:
            continue
        v_o = tj["v"][jj]
        ok = v_o > v_floor
        t_x = np.where(ok, d / np.where(ok, v_o, 1.0), np.inf)
        keep = ok & (t_x >= window[0]) & (t_x <= window[1])
        samples.extend(zip(t_x[keep], tj["a"][jj][keep]))
    if not samples:
        raise ValueError("no overtaking interactions found in the file")
    return [(float(t), float(a)) for t, a in samples]


def _gaussian_r2(values, mean, var):
    """Histogram-vs-normal-density agreement on Freedman-Diaconis bins."""
    dens, edges = np.histogram(values, bins="fd", density=True)
    centers = 0.5 * (edges[:-1] + edges[1:])
    fitted = norm.pdf(centers, loc=mean, scale=np.sqrt(var))
    ss_tot = float(np.sum((dens - dens.mean()) ** 2))
    if ss_tot == 0.0:
        return float("nan")
    return 1.0 - float(np.sum((dens - fitted) ** 2)) / ss_tot


def fit_bins(samples, bin_width=0.1, min_count=50, band=BAND):
    """Group samples into headway-time bins and summarize each one."""
    arr = np.asarray(samples, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("samples must be (t_x, a_o) pairs")
    t, a = arr[:, 0], arr[:, 1]
    edges = np.arange(band[0], band[1] + 0.5 * bin_width, bin_width)
    out = []
    for k in range(edges.size - 1):
        sel = (t >= edges[k]) & (t < edges[k + 1])
        n = int(sel.sum())
        if n < min_count:
            continue
        vals = a[sel]
        mean = float(vals.mean())
        var = float(vals.var(ddof=1))
        if var <= 0.0:
            out.append(BinStats(t_x=float(edges[k] + 0.5 * bin_width),
                                count=n, mean=mean, variance=max(var, 0.0),
                                r_squared=float("nan"), degenerate=True))
            continue
        r2 = _gaussian_r2(vals, mean, var)
        out.append(BinStats(t_x=float(edges[k] + 0.5 * bin_width), count=n,
                            mean=mean, variance=var, r_squared=r2,
                            degenerate=bool(np.isnan(r2))))
    if not out:
        raise ValueError("every headway-time bin is underpopulated")
    return out


def _region_r2(y, y_hat):
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    if ss_tot == 0.0:
        return float("nan")
    return 1.0 - float(np.sum((y - y_hat) ** 2)) / ss_tot


def fit_variance_curve(bins, lam=None, min_per_region=4) -> VarianceCurve:
    """Fit the two-branch curve through binned variances.

    The spline covers the approach side (its data may straddle the
    junction for support); the escape side is an exponential pinned to
    the spline value at the junction, making the curve continuous there
    by construction.  Sampling noise can push the spline slightly above
    the junction value inside the band; the lookup clips those bumps at
    the junction value so the maximum is always attained there.  Data
    whose interior clearly exceeds the junction is rejected instead —
    its peak is genuinely elsewhere.
    """
    pts = sorted((b.t_x, b.variance) for b in bins)
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    width = float(np.min(np.diff(x))) if x.size > 1 else 0.1
    left = x < PEAK_T
    right = ~left
    if left.sum() < min_per_region or right.sum() < min_per_region:
        raise ValueError("need bins on both sides of the variance peak")
    support = x <= PEAK_T + width     # straddle the junction for support
    xr, yr = x[right], y[right]

    bs = make_smoothing_spline(x[support], y[support], lam=lam)
    g = float(max(bs(PEAK_T), 0.0))
    interior = np.linspace(BAND[0], PEAK_T, 441)
    excess = float(np.max(bs(interior))) - g
    if excess > _PEAK_EXCESS_FRAC * max(g, 1e-12):
        raise ValueError(
            "binned variances do not peak at the branch junction "
            f"(interior excess {excess:.3g} over {g:.3g})")

    def pinned(tt, b, c):
        return (g - c) * np.exp(-b * (tt - PEAK_T)) + c

    c0 = float(min(yr.min(), g))
    (b_fit, c_fit), _ = curve_fit(
        pinned, xr, yr, p0=[1.0, 0.5 * c0],
        bounds=([0.0, 0.0], [50.0, max(g, 1e-12)]), maxfev=20000)
    amp = float((g - c_fit) * np.exp(b_fit * PEAK_T))

    curve = VarianceCurve(
        knots=bs.t, coeffs=bs.c, degree=int(bs.k),
        amplitude=amp, rate=float(b_fit), offset=float(c_fit),
        left_plateau=float(np.clip(bs(BAND[0]), 0.0, g)),
        right_plateau=float(max(amp * np.exp(-b_fit * BAND[1]) + c_fit, 0.0)),
        cap=g,
        meta={
            "spline_r2": _region_r2(y[left], np.maximum(bs(x[left]), 0.0)),
            "exp_r2": _region_r2(yr, pinned(xr, b_fit, c_fit)),
            "lam": lam, "n_bins": len(bins),
        })

    join_gap = abs(variance_lookup(PEAK_T - 1e-9, curve)
                   - variance_lookup(PEAK_T, curve))
    if join_gap > _JOIN_TOL:
        raise ValueError(f"branches disagree at the junction by {join_gap:.2e}")
    return curve


def default_curve() -> VarianceCurve:
    """Shipped fallback curve used when no dataset has been fitted.

    Smooth monotone rise from 0.04 to a 0.49 peak, then an exponential
    decay through 0.045 at the right band edge.  The magnitudes are
    package defaults chosen to exercise the safety margins visibly, not
    measured values.
    """
    x = np.linspace(BAND[0], PEAK_T, 23)
    u = (x - BAND[0]) / (PEAK_T - BAND[0])
    y = 0.04 + 0.45 * (3.0 * u ** 2 - 2.0 * u ** 3)
    bs = make_smoothing_spline(x, y, lam=1e-8)
    g = float(bs(PEAK_T))
    c = 0.04
    b = float(np.log((g - c) / 0.005) / (BAND[1] - PEAK_T))
    amp = float((g - c) * np.exp(b * PEAK_T))
    return VarianceCurve(
        knots=bs.t, coeffs=bs.c, degree=int(bs.k),
        amplitude=amp, rate=b, offset=c,
        left_plateau=float(max(bs(BAND[0]), 0.0)),
        right_plateau=float(amp * np.exp(-b * BAND[1]) + c),
        cap=g, meta={"source": "default"})


def save_curve(curve: VarianceCurve, path):
    doc = {
        "spline": {"knots": curve.knots.tolist(),
                   "coeffs": curve.coeffs.tolist(),
                   "degree": int(curve.degree)},
        "exponential": {"amplitude": curve.amplitude, "rate": curve.rate,
                        "offset": curve.offset},
        "left_plateau": curve.left_plateau,
        "right_plateau": curve.right_plateau,
        "cap": None if np.isinf(curve.cap) else curve.cap,
        "meta": curve.meta,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)


def load_curve(path) -> VarianceCurve:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return VarianceCurve(
        knots=doc["spline"]["knots"], coeffs=doc["spline"]["coeffs"],
        degree=doc["spline"]["degree"],
        amplitude=doc["exponential"]["amplitude"],
        rate=doc["exponential"]["rate"],
        offset=doc["exponential"]["offset"],
        left_plateau=doc["left_plateau"],
        right_plateau=doc["right_plateau"],
        cap=np.inf if doc.get("cap") is None else doc["cap"],
        meta=doc.get("meta", {}))
