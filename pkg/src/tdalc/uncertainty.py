"""Credible bands and clinical statistics for estimated BrAC curves.

Bands follow the sampling construction: draw parameter pairs from the fitted
population distribution, keep the ones inside the central credible disk, and
take pointwise extrema of the per-sample curves.  The tensor-basis estimate
is piecewise constant in the parameters, so a sample's curve is a cell
lookup; the single-input variant instead re-solves a deterministic
deconvolution per kept sample.

All statistics are reported in percent-alcohol and hours.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import density
from .deconvolution import DeconvolutionResult, deconvolve_deterministic
from .errors import ConfigurationError, NumericalError, SamplingError
from .forward_model import deterministic_ops
from .grid_basis import (DiscretizationGrid, ParamMesh,
                         temporal_basis_matrices)

DEFAULT_ALPHA = 0.75
DEFAULT_SAMPLES = 1000
DEFAULT_THRESHOLD = 0.001

STAT_NAMES = ("peak", "peak_time", "auc", "elimination_rate", "absorption_rate")


@dataclass(frozen=True)
class CredibleBand:
    """Pointwise envelope of sampled BrAC curves."""

    lower: np.ndarray
    upper: np.ndarray
    alpha: float
    n_samples: int
    seed: int

    def __post_init__(self):
        if np.any(self.lower > self.upper + 1e-15):
            raise NumericalError("band lower edge exceeds upper edge")


def kept_samples(params: density.PopulationParams, alpha: float,
                 n_samples: int, seed: int) -> np.ndarray:
    """Draw from the population density and keep the points inside the
    central credible disk.  The population mean is always appended so every
    band and interval contains the value at q = mu."""
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1), got {alpha}")
    draws = density.sample(params, n_samples, seed)
    radius = density.credible_region_radius(params, alpha).radius
    inside = np.linalg.norm(draws - params.mu, axis=1) <= radius
    kept = draws[inside]
    if kept.shape[0] == 0:
        raise SamplingError(
            f"no samples fell inside the {alpha:.2f} credible disk; "
            f"increase n_samples (got {n_samples})")
    return np.vstack([kept, params.mu])


def _cell_curves(result: DeconvolutionResult) -> np.ndarray:
    """Curve of every parameter cell on the time grid, K x m1 x m2."""
    if result.variant != "tq":
        raise ConfigurationError(
            "cell-lookup bands need a tensor-variant result")
    sample = temporal_basis_matrices(result.time_mesh)[2]
    return np.einsum("km,mij->kij", sample, result.coeffs)


def credible_band(result: DeconvolutionResult, params: density.PopulationParams,
                  alpha: float = DEFAULT_ALPHA,
                  n_samples: int = DEFAULT_SAMPLES, seed: int = 0) -> CredibleBand:
    """Band for a tensor-variant estimate by cell lookup over kept samples."""
    curves = _cell_curves(result)
    _, m1, m2 = curves.shape
    pm1 = ParamMesh(m1, params.a[0], params.b[0])
    pm2 = ParamMesh(m2, params.a[1], params.b[1])
    kept = kept_samples(params, alpha, n_samples, seed)
    i1 = pm1.cell_index(kept[:, 0])
    i2 = pm2.cell_index(kept[:, 1])
    picked = curves[:, i1, i2]          # K x n_kept
    return CredibleBand(lower=picked.min(axis=1), upper=picked.max(axis=1),
                        alpha=alpha, n_samples=n_samples, seed=seed)


def credible_band_scalar(tac: np.ndarray, params: density.PopulationParams,
                         grid: DiscretizationGrid, r1: float, r2: float,
                         alpha: float = DEFAULT_ALPHA,
                         n_samples: int = DEFAULT_SAMPLES, seed: int = 0,
                         m: int | None = None) -> CredibleBand:
    """Band by per-sample deterministic deconvolution of the same TAC.

    Each kept parameter pair gets its own single-subject inverse problem;
    failed solves are tolerated up to 10% of the kept set.
    """
    tac = np.asarray(tac, dtype=float)
    kept = kept_samples(params, alpha, n_samples, seed)
    curves = []
    failures = 0
    for q in kept:
        det = deterministic_ops(q, grid.spatial, grid.tau)
        curve, sol = deconvolve_deterministic(det, tac, r1, r2, m=m)
        if sol.converged:
            curves.append(curve)
        else:
            failures += 1
    if failures > 0.10 * kept.shape[0]:
        raise NumericalError(
            f"{failures} of {kept.shape[0]} per-sample deconvolutions failed")
    stack = np.vstack(curves)
    return CredibleBand(lower=stack.min(axis=0), upper=stack.max(axis=0),
                        alpha=alpha, n_samples=n_samples, seed=seed)


# ---------------------------------------------------------------------------
# clinical statistics


@dataclass(frozen=True)
class EpisodeStats:
    """Summary statistics of one BrAC curve.

    Rates are None when the defining threshold crossing does not exist
    within the record.
    """

    peak: float               # percent alcohol
    peak_time: float          # hours
    auc: float                # percent * hours
    elimination_rate: float | None   # percent per hour
    absorption_rate: float | None    # percent per hour
    threshold: float

    def values(self) -> tuple:
        return (self.peak, self.peak_time, self.auc,
                self.elimination_rate, self.absorption_rate)


def episode_stats(curve: np.ndarray, tau: float,
                  threshold: float = DEFAULT_THRESHOLD) -> EpisodeStats:
    """Peak, peak time, area, and entry/exit rates of a curve on a tau grid.

    The elimination rate divides the peak by the time from the peak to the
    first later sample below the threshold; the absorption rate divides it
    by the time from the last below-threshold sample preceding the peak.
    Peak ties break to the earliest time.
    """
    curve = np.asarray(curve, dtype=float)
    if curve.ndim != 1 or curve.size == 0:
        raise ConfigurationError("curve must be a nonempty 1-d array")
    if tau <= 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    peak_idx = int(np.argmax(curve))
    peak = float(curve[peak_idx])
    peak_time = peak_idx * tau / 60.0
    auc = float(np.trapezoid(curve, dx=tau)) / 60.0

    elimination = None
    after = np.flatnonzero(curve[peak_idx + 1:] < threshold)
    if peak > 0.0 and after.size:
        dt_h = (after[0] + 1) * tau / 60.0
        elimination = peak / dt_h

    absorption = None
    before = np.flatnonzero(curve[:peak_idx] < threshold)
    if peak > 0.0 and before.size:
        dt_h = (peak_idx - before[-1]) * tau / 60.0
        absorption = peak / dt_h

    return EpisodeStats(peak=peak, peak_time=peak_time, auc=auc,
                        elimination_rate=elimination,
                        absorption_rate=absorption, threshold=threshold)


@dataclass(frozen=True)
class StatsIntervals:
    """Per-statistic (lo, hi) ranges over the kept sample set."""

    intervals: dict
    undefined_counts: dict
    n_kept: int
    alpha: float
    seed: int


def stats_credible_intervals(result: DeconvolutionResult,
                             params: density.PopulationParams,
                             alpha: float = DEFAULT_ALPHA,
                             n_samples: int = DEFAULT_SAMPLES, seed: int = 0,
                             threshold: float = DEFAULT_THRESHOLD,
                             tau: float | None = None) -> StatsIntervals:
    """Ranges of the clinical statistics over kept population samples."""
    curves = _cell_curves(result)
    _, m1, m2 = curves.shape
    pm1 = ParamMesh(m1, params.a[0], params.b[0])
    pm2 = ParamMesh(m2, params.a[1], params.b[1])
    kept = kept_samples(params, alpha, n_samples, seed)
    if tau is None:
        tau = result.time_mesh.tau
    i1 = pm1.cell_index(kept[:, 0])
    i2 = pm2.cell_index(kept[:, 1])
    # one stats evaluation per distinct cell; samples map onto cells
    flat = i1 * m2 + i2
    cells, inverse = np.unique(flat, return_inverse=True)
    per_cell = []
    for f in cells:
        c1, c2 = divmod(int(f), m2)
        per_cell.append(episode_stats(curves[:, c1, c2], tau, threshold))
    values = {name: [] for name in STAT_NAMES}
    undefined = {name: 0 for name in STAT_NAMES}
    for s_idx in inverse:
        stats = per_cell[s_idx]
        for name, val in zip(STAT_NAMES, stats.values()):
            if val is None:
                undefined[name] += 1
            else:
                values[name].append(val)
    intervals = {}
    for name in STAT_NAMES:
        vals = values[name]
        intervals[name] = (float(min(vals)), float(max(vals))) if vals else None
    return StatsIntervals(intervals=intervals, undefined_counts=undefined,
                          n_kept=kept.shape[0], alpha=alpha, seed=seed)


# ---------------------------------------------------------------------------
# report rendering


def format_stat(value: float | None) -> str:
    return "" if value is None else f"{value:.4f}"


def format_stats_row(stats: EpisodeStats) -> str:
    """Five comma-separated statistics, fixed 4-decimal rendering."""
    return ",".join(format_stat(v) for v in stats.values())


def format_interval(lo: float, hi: float) -> str:
    return f"[{lo:.4f}, {hi:.4f}]"


def band_overlap_fraction(band_a: CredibleBand, band_b: CredibleBand) -> float:
    """Fraction of time points where the two band intervals intersect."""
    if band_a.lower.size != band_b.lower.size:
        raise ConfigurationError("bands must share one time grid")
    meet = np.minimum(band_a.upper, band_b.upper) >= \
        np.maximum(band_a.lower, band_b.lower)
    return float(np.mean(meet))


def write_stats_report(path, rows) -> None:
    """Write the statistics table: one row per episode with measured,
    estimated, and interval columns for each statistic.

    ``rows`` yields (ident, measured: EpisodeStats | None,
    estimated: EpisodeStats, intervals: StatsIntervals | None).
    """
    header = ["episode"]
    header += [f"measured_{n}" for n in STAT_NAMES]
    header += [f"estimated_{n}" for n in STAT_NAMES]
    for n in STAT_NAMES:
        header += [f"{n}_lo", f"{n}_hi"]
    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(header) + "\n")
        for ident, measured, estimated, intervals in rows:
            cells = [str(ident)]
            if measured is None:
                cells += [""] * len(STAT_NAMES)
            else:
                cells += [format_stat(v) for v in measured.values()]
            cells += [format_stat(v) for v in estimated.values()]
            for n in STAT_NAMES:
                pair = None if intervals is None else intervals.intervals[n]
                if pair is None:
                    cells += ["", ""]
                else:
                    cells += [format_stat(pair[0]), format_stat(pair[1])]
            fh.write(",".join(cells) + "\n")
