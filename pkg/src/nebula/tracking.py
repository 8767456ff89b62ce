"""Viterbi search over the likelihood map plus quadratic peak refinement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fusion import LikelihoodMap


@dataclass(frozen=True)
class TransitionModel:
    """Gaussian prior on the log-F0 slew rate, in octaves per second."""

    sigma: float = 2.0
    t_hop: float = 0.005

    def __post_init__(self):
        if self.sigma <= 0 or self.t_hop <= 0:
            raise ValueError("sigma and t_hop must be positive")

    def log_transition_matrix(self, centers_hz: np.ndarray) -> np.ndarray:
        """(n_bins, n_bins) matrix of log N(rate | 0, sigma) per bin pair.

        Entry [i, j] scores moving from bin i to bin j in one hop; the
        rows are deliberately not normalized (the normalization would
        be path-independent on a uniform log grid).
        """
        oct_pos = np.log2(centers_hz)
        rate = (oct_pos[None, :] - oct_pos[:, None]) / self.t_hop
        return -0.5 * (rate / self.sigma) ** 2 - np.log(
            self.sigma * np.sqrt(2.0 * np.pi))


@dataclass(frozen=True)
class F0Trajectory:
    """Continuous per-frame pitch estimate along the tracked path."""

    f0_hz: np.ndarray        # (n_frames,)
    bin_index: np.ndarray    # (n_frames,) grid bin of the Viterbi path
    peak_loglik: np.ndarray  # (n_frames,) map value at the refined peak

    def __post_init__(self):
        if not (len(self.f0_hz) == len(self.bin_index) == len(self.peak_loglik)):
            raise ValueError("trajectory fields must have equal length")
        if not np.all(np.isfinite(self.f0_hz)) or np.any(self.f0_hz <= 0):
            raise ValueError("f0 must be finite and positive")


def viterbi_track(lmap: LikelihoodMap, tm: TransitionModel) -> np.ndarray:
    """Most likely bin path under map scores plus slew-rate penalties.

    Maximizes ``sum_t L(b_t, t) + sum_t log N(doct(b_t, b_{t-1})/t_hop
    | 0, sigma)``.  Ties resolve toward the lower bin index so the
    result is deterministic.
    """
    obs = lmap.values
    n_frames, n_bins = obs.shape
    trans = tm.log_transition_matrix(lmap.grid.centers)

    score = obs[0].copy()
    back = np.empty((n_frames, n_bins), dtype=np.int32)
    for t in range(1, n_frames):
        cand = score[:, None] + trans          # (from, to)
        back[t] = np.argmax(cand, axis=0)      # first max = lowest bin
        score = cand[back[t], np.arange(n_bins)] + obs[t]

    path = np.empty(n_frames, dtype=np.int64)
    path[-1] = int(np.argmax(score))
    for t in range(n_frames - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def refine_quadratic(lmap: LikelihoodMap, path: np.ndarray) -> F0Trajectory:
    """Refine each path bin with a parabola through its map neighbors.

    The vertex offset ``p = 0.5*(L- - L+) / (L- - 2*L0 + L+)`` is
    clamped to half a bin; edge bins and non-concave triples keep the
    bin center.  Frequencies shift by ``p`` bins in log-frequency and
    the reported likelihood is the parabola value at the vertex.
    """
    v = lmap.values
    n_frames, n_bins = v.shape
    path = np.asarray(path, dtype=np.int64)
    if path.shape != (n_frames,) or np.any(path < 0) or np.any(path >= n_bins):
        raise ValueError("path does not index the map")

    frames = np.arange(n_frames)
    l0 = v[frames, path]
    interior = (path > 0) & (path < n_bins - 1)
    lm = np.where(interior, v[frames, np.maximum(path - 1, 0)], l0)
    lp = np.where(interior, v[frames, np.minimum(path + 1, n_bins - 1)], l0)

    denom = lm - 2.0 * l0 + lp
    concave = denom < 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(interior & concave, 0.5 * (lm - lp) / denom, 0.0)
    p = np.clip(p, -0.5, 0.5)

    log_step = np.log(lmap.grid.f_max / lmap.grid.f_min) / (lmap.grid.n_bins - 1)
    f0 = lmap.grid.centers[path] * np.exp(p * log_step)
    # parabola evaluated at the (possibly clamped) vertex offset; equals
    # l0 - 0.25*(lm - lp)*p whenever the clamp was inactive
    peak = l0 + 0.5 * (lp - lm) * p + 0.5 * denom * p * p
    return F0Trajectory(f0_hz=f0, bin_index=path, peak_loglik=peak)
