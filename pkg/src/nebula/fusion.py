"""Combine per-channel conditionals into a calibrated log-posterior map.

Per frame, channel conditionals are averaged in log domain over a
log-spaced frequency grid, de-biased by a white-noise calibration
table, and normalized so each row integrates to one under the
log-frequency measure.  The map is then smoothed in time with a
frequency-dependent moving average before tracking.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .gmm import Conditional1D, log_density_1d


@dataclass(frozen=True)
class FrequencyGrid:
    """Log-spaced frequency bins over [f_min, f_max]."""

    f_min: float
    f_max: float
    n_bins: int = 128

    def __post_init__(self):
        if not (0 < self.f_min < self.f_max):
            raise ValueError("need 0 < f_min < f_max")
        if self.n_bins < 2:
            raise ValueError("need at least two bins")

    @property
    def centers(self) -> np.ndarray:
        return self.f_min * (self.f_max / self.f_min) ** (
            np.arange(self.n_bins) / (self.n_bins - 1))

    @property
    def log_span(self) -> float:
        """Total width in natural-log frequency."""
        return float(np.log(self.f_max / self.f_min))

    @property
    def delta(self) -> float:
        """Per-bin log-frequency measure used for row normalization."""
        return self.log_span / self.n_bins


@dataclass(frozen=True)
class LikelihoodMap:
    """Normalized log posterior over (frame, frequency bin), in nats."""

    values: np.ndarray  # (n_frames, n_bins)
    grid: FrequencyGrid
    t_hop: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != self.grid.n_bins:
            raise ValueError("map shape does not match the grid")
        if not np.all(np.isfinite(v)):
            raise ValueError("likelihood map must be finite")
        object.__setattr__(self, "values", v)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def fuse(conditionals: list[Conditional1D], centers_hz: np.ndarray,
         grid: FrequencyGrid) -> np.ndarray:
    """Average of channel log conditionals on the grid (one frame).

    Each conditional lives in its channel's octave coordinate, so grid
    frequencies are converted per channel with ``log2(f / fc_k)``.
    Averaging (rather than summing) the channel logs keeps correlated
    neighbors from over-sharpening the result.
    """
    if len(conditionals) != len(centers_hz):
        raise ValueError("one conditional per channel center required")
    f = grid.centers
    acc = np.zeros(grid.n_bins)
    for cond, fc in zip(conditionals, centers_hz):
        acc += log_density_1d(cond, np.log2(f / fc))
    return acc / len(conditionals)


def normalize(row: np.ndarray, cal: np.ndarray, grid: FrequencyGrid) -> np.ndarray:
    """Subtract the calibration table and renormalize one frame's row.

    The output L satisfies ``sum(exp(L)) * grid.delta == 1``, i.e. it
    is a density in natural-log frequency.
    """
    debiased = np.asarray(row, dtype=np.float64) - cal
    return debiased - logsumexp(debiased) - np.log(grid.delta)


def smooth(lmap: LikelihoodMap) -> LikelihoodMap:
    """Moving-average the map in time, window inversely proportional to f.

    Bin at frequency f is averaged over ``max(1, round(3 / (f * t_hop)))``
    frames, centered, truncated at the map edges (averaging whatever
    frames exist rather than zero-padding, which would depress the
    boundary likelihoods).
    """
    v = lmap.values
    n = lmap.n_frames
    out = np.empty_like(v)
    csum = np.vstack([np.zeros(v.shape[1]), np.cumsum(v, axis=0)])
    for b, f in enumerate(lmap.grid.centers):
        win = max(1, int(np.floor(3.0 / (f * lmap.t_hop) + 0.5)))
        back = (win - 1) // 2
        fwd = win // 2
        lo = np.clip(np.arange(n) - back, 0, n)
        hi = np.clip(np.arange(n) + fwd + 1, 0, n)
        out[:, b] = (csum[hi, b] - csum[lo, b]) / (hi - lo)
    return LikelihoodMap(values=out, grid=lmap.grid, t_hop=lmap.t_hop)


def estimate_calibration(bank, grid: FrequencyGrid, n_frames: int = 2000,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    """Expected uncalibrated fused row under standard-normal noise input.

    Runs the feature front end of ``bank`` on white-noise frames (with
    non-overlapping analysis windows, so every frame is an independent
    sample) and averages the fused rows per bin.  Subtracting this
    table during inference removes the systematic low-frequency bias
    that the log-uniform training priors leave behind.
    """
    from .pipeline import white_noise_independent_rows

    if n_frames < 100:
        raise ValueError("calibration needs at least 100 noise frames")
    if rng is None:
        rng = np.random.default_rng()
    rows = white_noise_independent_rows(bank, grid, n_frames, rng)
    return rows.mean(axis=0)
