"""Scoring of probabilistic and deterministic forecasts.

CRPS integrates the squared gap between the predicted CDF and the unit
step at the observed value; a point prediction is treated as a step CDF,
for which CRPS reduces to the absolute error. Interval quality is
summarized by the mean total width (avg_width) and the mean absolute gap
between nominal confidence and empirical coverage (calib_error), both
averaged over a set of confidence levels.

Scoring is chunked over elements in a fixed order, so results are
deterministic and the chunks could be farmed out concurrently.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from . import intervals as iv
from .gmm import MixtureBatch, PointPrediction, cdf_values

DEFAULT_LEVELS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 10))
MAPE_EPSILON = 1e-3
_TAIL_SIGMAS = 8.0
_CHUNK = 2048


@dataclass
class ScoringConfig:
    """Grid and level choices for batch evaluation.

    The interval grid (default 500 points) is intentionally coarser than
    the CRPS grid (default 2001 points); interval_range is the shared
    evaluation range, e.g. (0, max speed) in raw units, and is derived
    from the mixtures' 8-sigma support when omitted.
    """

    levels: tuple = DEFAULT_LEVELS
    interval_points: int = 500
    interval_range: tuple | None = None
    crps_points: int = 2001


@dataclass
class EvaluationReport:
    crps_mean: float
    avg_width: float
    calib_error: float
    mae: float
    mape: float
    rmse: float
    per_horizon: list = field(default_factory=list)  # (step, crps, avg_width, calib_error)
    calibration_curve: list = field(default_factory=list)  # (level, coverage)
    meta: dict = field(default_factory=dict)


def crps_point(p: PointPrediction | float, y: float) -> float:
    """CRPS of a point prediction: exactly |value - y|."""
    value = p.value if isinstance(p, PointPrediction) else float(p)
    if not (np.isfinite(value) and np.isfinite(y)):
        raise ValueError("crps_point needs finite inputs")
    return abs(value - y)


def crps_mixture(m, y: float, range_lo: float, range_hi: float, points: int) -> float:
    """CRPS of a mixture by trapezoidal integration of (F - H)^2.

    The grid must cover y; otherwise the integrand's step would be
    clipped and the score biased, so such calls are rejected.
    """
    if not range_lo <= y <= range_hi:
        raise ValueError(f"y={y!r} outside integration range [{range_lo!r}, {range_hi!r}]")
    if points < 2:
        raise ValueError(f"need at least 2 integration points, got {points}")
    x = np.linspace(range_lo, range_hi, points)
    f = cdf_values(m.weights, m.means, m.variances, x)
    h = (x >= y).astype(float)
    total = float(np.trapezoid((f - h) ** 2, x))
    # The integrand jumps inside the cell holding y; splitting that one
    # cell at y removes an O(dx) bias the node trapezoid would carry.
    j = int(np.searchsorted(x, y, side="left"))
    if j > 0:
        fy = cdf_values(m.weights, m.means, m.variances, np.asarray(y, float))
        total += _jump_cell_correction(
            float(x[j - 1]), float(x[j]), y, float(f[j - 1]), float(f[j]), float(fy)
        )
    return total


def _jump_cell_correction(x_left, x_right, y, f_left, f_right, f_y):
    """Replace the node trapezoid of the cell [x_left, x_right] containing
    y (x_left < y <= x_right) with the two sub-trapezoids split at y."""
    old = (x_right - x_left) * ((f_left**2) + (f_right - 1.0) ** 2) / 2.0
    left = (y - x_left) * (f_left**2 + f_y**2) / 2.0
    right = (x_right - y) * ((f_y - 1.0) ** 2 + (f_right - 1.0) ** 2) / 2.0
    return left + right - old


def crps_range(m, y: float):
    """Default integration bounds: the mixture's 8-sigma support union
    the same padding around y."""
    smax = math.sqrt(float(np.max(m.variances)))
    pad = _TAIL_SIGMAS * smax
    lo = min(float(np.min(m.means)) - pad, y - pad)
    hi = max(float(np.max(m.means)) + pad, y + pad)
    return lo, hi


def crps_mixture_batch(mb: MixtureBatch, y: np.ndarray, points: int = 2001) -> np.ndarray:
    """Per-element CRPS with per-element 8-sigma integration bounds.

    mb holds flat element mixtures (M, K); y is (M,). Elements are scored
    in fixed-size chunks, reduced in index order.
    """
    y = np.asarray(y, dtype=float)
    m_count = y.size
    out = np.empty(m_count)
    smax = np.sqrt(mb.variances.max(axis=-1))
    pad = _TAIL_SIGMAS * smax
    lo = np.minimum(mb.means.min(axis=-1) - pad, y - pad)
    hi = np.maximum(mb.means.max(axis=-1) + pad, y + pad)
    step = (hi - lo) / (points - 1)
    base = np.arange(points)
    f_y = cdf_values(mb.weights, mb.means, mb.variances, y)
    for start in range(0, m_count, _CHUNK):
        sl = slice(start, min(start + _CHUNK, m_count))
        x = lo[sl, None] + step[sl, None] * base[None, :]
        # Accumulate the CDF component by component to keep temporaries
        # at (chunk, points) rather than (chunk, points, K).
        f = np.zeros_like(x)
        for k in range(mb.k):
            sd = np.sqrt(mb.variances[sl, k])[:, None]
            f += mb.weights[sl, k][:, None] * ndtr((x - mb.means[sl, k][:, None]) / sd)
        g = (f - (x >= y[sl, None])) ** 2
        out[sl] = step[sl] * (g.sum(axis=1) - 0.5 * (g[:, 0] + g[:, -1]))
        # Same jump-cell split as the scalar path. lo < y < hi holds by
        # construction of the bounds, so 1 <= j <= points - 1.
        t = (y[sl] - lo[sl]) / step[sl]
        j = np.ceil(t - 1e-12).astype(int)
        rows = np.arange(x.shape[0])
        out[sl] += _jump_cell_correction(
            x[rows, j - 1], x[rows, j], y[sl], f[rows, j - 1], f[rows, j], f_y[sl]
        )
    return out


def deterministic_scores(points: np.ndarray, targets: np.ndarray):
    """(mae, mape, rmse); mape in percent, excluding |target| < 1e-3.

    mape is NaN (an explicit undefined marker, never 0) when every target
    is excluded.
    """
    points = np.asarray(points, dtype=float).ravel()
    targets = np.asarray(targets, dtype=float).ravel()
    if points.size == 0 or points.size != targets.size:
        raise ValueError(f"length mismatch: {points.size} points vs {targets.size} targets")
    err = points - targets
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err**2)))
    keep = np.abs(targets) >= MAPE_EPSILON
    if np.any(keep):
        mape = float(100.0 * np.mean(np.abs(err[keep] / targets[keep])))
    else:
        mape = float("nan")
    return mae, mape, rmse


def _density_rows(mb: MixtureBatch, sl: slice, x: np.ndarray) -> np.ndarray:
    """Mixture densities for a chunk of elements on a shared grid.

    Plain component sums (no log space): grid densities may underflow to
    zero in far tails, which the interval selection handles. One scratch
    buffer per chunk keeps the memory traffic flat in K."""
    dens = np.zeros((sl.stop - sl.start, x.size))
    buf = np.empty_like(dens)
    for k in range(mb.k):
        var = mb.variances[sl, k]
        np.subtract(x[None, :], mb.means[sl, k][:, None], out=buf)
        np.multiply(buf, buf, out=buf)
        buf *= (-0.5 / var)[:, None]
        np.exp(buf, out=buf)
        buf *= (mb.weights[sl, k] / np.sqrt(2.0 * np.pi * var))[:, None]
        dens += buf
    return dens


def _flatten_batch(batch):
    """Flat targets, horizon shape, and mixtures-or-points from a batch."""
    targets = np.asarray(batch.targets, dtype=float)
    if targets.size == 0:
        raise ValueError("empty batch")
    t_f = targets.shape[-1]
    flat_targets = targets.reshape(-1, t_f)
    mixtures = getattr(batch, "mixtures", None)
    points = getattr(batch, "point_preds", None)
    if (mixtures is None) == (points is None):
        raise ValueError("batch must carry exactly one of mixtures / point_preds")
    if mixtures is not None and mixtures.shape != targets.shape:
        raise ValueError(f"mixtures shape {mixtures.shape} vs targets {targets.shape}")
    if points is not None and points.shape != targets.shape:
        raise ValueError(f"point_preds shape {points.shape} vs targets {targets.shape}")
    return flat_targets, t_f, mixtures, points


def evaluate(batch, scoring: ScoringConfig | None = None, meta: dict | None = None) -> EvaluationReport:
    """Score a batch of predictions against its targets.

    Probabilistic batches get CRPS, interval width and coverage at every
    level, plus deterministic scores of their probability-weighted point
    estimates. Point-prediction batches get CRPS == absolute error and
    NaN ("not applicable") interval metrics.
    """
    cfg = scoring or ScoringConfig()
    levels = np.asarray(cfg.levels, dtype=float)
    flat_targets, t_f, mixtures, points = _flatten_batch(batch)
    n_elem = flat_targets.size
    y = flat_targets.ravel()

    if points is not None:
        pts = np.asarray(points, dtype=float).reshape(-1, t_f)
        crps_elem = np.abs(pts.ravel() - y)
        width_elem = contained_elem = None
        point_est = pts.ravel()
    else:
        mb_flat = mixtures.reshape(n_elem)
        crps_elem = crps_mixture_batch(mb_flat, y, cfg.crps_points)
        point_est = mb_flat.point_estimates()
        if cfg.interval_range is not None:
            lo, hi = cfg.interval_range
        else:
            smax = float(np.sqrt(mb_flat.variances.max()))
            lo = float(mb_flat.means.min()) - _TAIL_SIGMAS * smax
            hi = float(mb_flat.means.max()) + _TAIL_SIGMAS * smax
        x = np.linspace(lo, hi, cfg.interval_points)
        dx = float(x[1] - x[0])
        width_elem = np.empty((n_elem, levels.size))
        contained_elem = np.empty((n_elem, levels.size), dtype=bool)
        for start in range(0, n_elem, _CHUNK):
            sl = slice(start, min(start + _CHUNK, n_elem))
            dens = _density_rows(mb_flat, sl, x)
            masks = iv.hpd_select_batch(dens, levels)
            w, c, _ = iv.interval_stats_batch(masks, lo, dx, y[sl], dens, want_mass=False)
            width_elem[sl] = w
            contained_elem[sl] = c

    crps_mean = float(crps_elem.mean())
    mae, mape, rmse = deterministic_scores(point_est, y)

    crps_by_step = crps_elem.reshape(-1, t_f).mean(axis=0)
    if width_elem is None:
        avg_width = calib_error = float("nan")
        curve = []
        per_horizon = [(s + 1, float(crps_by_step[s]), float("nan"), float("nan")) for s in range(t_f)]
    else:
        coverage = contained_elem.mean(axis=0)
        curve = [(float(c), float(v)) for c, v in zip(levels, coverage)]
        avg_width = float(width_elem.mean())
        calib_error = float(np.mean(np.abs(coverage - levels)))
        w_step = width_elem.reshape(-1, t_f, levels.size).mean(axis=(0, 2))
        cov_step = contained_elem.reshape(-1, t_f, levels.size).mean(axis=0)
        ce_step = np.mean(np.abs(cov_step - levels[None, :]), axis=1)
        per_horizon = [
            (s + 1, float(crps_by_step[s]), float(w_step[s]), float(ce_step[s]))
            for s in range(t_f)
        ]

    return EvaluationReport(
        crps_mean=crps_mean,
        avg_width=avg_width,
        calib_error=calib_error,
        mae=mae,
        mape=mape,
        rmse=rmse,
        per_horizon=per_horizon,
        calibration_curve=curve,
        meta=dict(meta or {}),
    )


# ----------------------------------------------------------------------
# Structured-text report files (diffable, byte-deterministic).
# ----------------------------------------------------------------------


def _fmt(v: float) -> str:
    return "na" if isinstance(v, float) and math.isnan(v) else repr(float(v))


def _parse(s: str) -> float:
    return float("nan") if s == "na" else float(s)


def report_to_text(r: EvaluationReport) -> str:
    lines = ["# evaluation report v1"]
    for k in sorted(r.meta):
        lines.append(f"meta.{k} = {r.meta[k]}")
    for k in ("crps_mean", "avg_width", "calib_error", "mae", "mape", "rmse"):
        lines.append(f"{k} = {_fmt(getattr(r, k))}")
    lines.append("")
    lines.append("[per_horizon]")
    lines.append("# step crps avg_width calib_error")
    for step, crps, w, ce in r.per_horizon:
        lines.append(f"{step} {_fmt(crps)} {_fmt(w)} {_fmt(ce)}")
    lines.append("")
    lines.append("[calibration]")
    lines.append("# level coverage")
    for level, cov in r.calibration_curve:
        lines.append(f"{_fmt(level)} {_fmt(cov)}")
    return "\n".join(lines) + "\n"


def report_from_text(text: str) -> EvaluationReport:
    scalars, meta = {}, {}
    per_horizon, curve = [], []
    section = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            section = line.strip("[]")
            continue
        if section is None:
            key, _, val = line.partition(" = ")
            if key.startswith("meta."):
                meta[key[5:]] = val
            else:
                scalars[key] = _parse(val)
        elif section == "per_horizon":
            parts = line.split()
            per_horizon.append((int(parts[0]), *(_parse(p) for p in parts[1:])))
        elif section == "calibration":
            level, cov = line.split()
            curve.append((_parse(level), _parse(cov)))
    return EvaluationReport(
        crps_mean=scalars["crps_mean"],
        avg_width=scalars["avg_width"],
        calib_error=scalars["calib_error"],
        mae=scalars["mae"],
        mape=scalars["mape"],
        rmse=scalars["rmse"],
        per_horizon=per_horizon,
        calibration_curve=curve,
        meta=meta,
    )
