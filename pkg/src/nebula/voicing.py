"""Two-state HMM over the peak-likelihood sequence.

The unvoiced observation model is a Normal measured once, by running
the whole front end on white noise; the voiced model is refit on every
utterance with Baum-Welch (only the voiced Normal moves, transitions
and the unvoiced Normal stay frozen).  Decoding is a two-state Viterbi
with symmetric switch probability ``t_hop / 0.2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

# fallback unvoiced statistics for a 128-bin grid, used until a model
# carries values simulated with its own front end
DEFAULT_UNVOICED_MEAN = -4.78
DEFAULT_UNVOICED_VAR = 0.02
VOICED_INIT_MEAN = -2.0
VOICED_INIT_VAR = 1.0
VAR_FLOOR = 1e-4


@dataclass(frozen=True)
class BaumWelchReport:
    log_likelihoods: tuple[float, ...] = ()
    degenerate: bool = False


@dataclass(frozen=True)
class VoicingHmm:
    """Observation Normals for both states plus the switch probability."""

    unvoiced_mean: float = DEFAULT_UNVOICED_MEAN
    unvoiced_var: float = DEFAULT_UNVOICED_VAR
    voiced_mean: float = VOICED_INIT_MEAN
    voiced_var: float = VOICED_INIT_VAR
    p_switch: float = 0.005 / 0.2
    fit_report: BaumWelchReport | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.unvoiced_var <= 0 or self.voiced_var <= 0:
            raise ValueError("observation variances must be positive")
        if not 0.0 < self.p_switch < 0.5:
            raise ValueError("switch probability must lie in (0, 0.5)")

    @classmethod
    def for_hop(cls, t_hop: float, unvoiced_mean: float = DEFAULT_UNVOICED_MEAN,
                unvoiced_var: float = DEFAULT_UNVOICED_VAR) -> "VoicingHmm":
        return cls(unvoiced_mean=unvoiced_mean, unvoiced_var=unvoiced_var,
                   p_switch=t_hop / 0.2)


@dataclass(frozen=True)
class VoicingSequence:
    voiced: np.ndarray  # (n_frames,) booleans

    def __post_init__(self):
        object.__setattr__(self, "voiced", np.asarray(self.voiced, dtype=bool))


def _log_normal(x: np.ndarray, mean: float, var: float) -> np.ndarray:
    return -0.5 * (np.log(2.0 * np.pi * var) + (x - mean) ** 2 / var)


def fit_voiced_obs(peaks: np.ndarray, hmm: VoicingHmm,
                   max_iter: int = 100, tol: float = 1e-6) -> VoicingHmm:
    """Baum-Welch re-estimation of the voiced observation Normal only.

    Starts from the hmm's current voiced parameters; the unvoiced
    Normal and the transition matrix never move.  A constant peak
    sequence cannot be fit and comes back unchanged with the report
    flagged degenerate.

    Returns a new VoicingHmm whose ``fit_report`` carries the data
    log-likelihood trace.
    """
    peaks = np.asarray(peaks, dtype=np.float64)
    if peaks.ndim != 1 or peaks.size < 2:
        raise ValueError("need at least two frames to fit the voiced state")

    if np.ptp(peaks) == 0.0:
        return replace(hmm, fit_report=BaumWelchReport(degenerate=True))

    p = hmm.p_switch
    log_trans = np.log(np.array([[1.0 - p, p], [p, 1.0 - p]]))
    log_init = np.log(np.array([0.5, 0.5]))
    obs_u = _log_normal(peaks, hmm.unvoiced_mean, hmm.unvoiced_var)

    mean_v = hmm.voiced_mean
    var_v = hmm.voiced_var
    lls: list[float] = []
    n = peaks.size

    for _ in range(max_iter):
        obs_v = _log_normal(peaks, mean_v, var_v)
        log_obs = np.stack([obs_u, obs_v], axis=1)  # (n, 2)

        alpha = np.empty((n, 2))
        alpha[0] = log_init + log_obs[0]
        for t in range(1, n):
            alpha[t] = log_obs[t] + logsumexp(alpha[t - 1][:, None] + log_trans, axis=0)
        beta = np.zeros((n, 2))
        for t in range(n - 2, -1, -1):
            beta[t] = logsumexp(log_trans + (log_obs[t + 1] + beta[t + 1])[None, :], axis=1)

        ll = float(logsumexp(alpha[-1]))
        gamma_v = np.exp(alpha[:, 1] + beta[:, 1] - ll)

        if lls and ll - lls[-1] < tol:
            lls.append(ll)
            break
        lls.append(ll)

        mass = gamma_v.sum()
        if mass <= 0:
            break
        mean_v = float(gamma_v @ peaks / mass)
        var_v = float(max(gamma_v @ (peaks - mean_v) ** 2 / mass, VAR_FLOOR))

    return replace(hmm, voiced_mean=mean_v, voiced_var=var_v,
                   fit_report=BaumWelchReport(log_likelihoods=tuple(lls)))


def decode_from_loglik(log_obs_unvoiced: np.ndarray, log_obs_voiced: np.ndarray,
                       p_switch: float) -> np.ndarray:
    """Two-state Viterbi on precomputed observation log densities.

    Symmetric transition matrix, uniform initial distribution, ties
    decided unvoiced.
    """
    lu = np.asarray(log_obs_unvoiced, dtype=np.float64)
    lv = np.asarray(log_obs_voiced, dtype=np.float64)
    if lu.shape != lv.shape or lu.ndim != 1:
        raise ValueError("observation log densities must be equal-length vectors")
    n = lu.size
    log_stay = np.log1p(-p_switch)
    log_move = np.log(p_switch)

    score_u = np.log(0.5) + lu[0]
    score_v = np.log(0.5) + lv[0]
    back = np.empty((n, 2), dtype=np.int8)
    for t in range(1, n):
        from_u_u = score_u + log_stay
        from_v_u = score_v + log_move
        # ties prefer the unvoiced predecessor (index 0)
        if from_v_u > from_u_u:
            new_u, back[t, 0] = from_v_u, 1
        else:
            new_u, back[t, 0] = from_u_u, 0
        from_u_v = score_u + log_move
        from_v_v = score_v + log_stay
        if from_v_v > from_u_v:
            new_v, back[t, 1] = from_v_v, 1
        else:
            new_v, back[t, 1] = from_u_v, 0
        score_u = new_u + lu[t]
        score_v = new_v + lv[t]

    states = np.empty(n, dtype=np.int8)
    states[-1] = 1 if score_v > score_u else 0
    for t in range(n - 1, 0, -1):
        states[t - 1] = back[t, states[t]]
    return states.astype(bool)


def decode(peaks: np.ndarray, hmm: VoicingHmm) -> VoicingSequence:
    """Viterbi voicing decision for a peak-likelihood sequence."""
    peaks = np.asarray(peaks, dtype=np.float64)
    lu = _log_normal(peaks, hmm.unvoiced_mean, hmm.unvoiced_var)
    lv = _log_normal(peaks, hmm.voiced_mean, hmm.voiced_var)
    return VoicingSequence(voiced=decode_from_loglik(lu, lv, hmm.p_switch))


def simulate_unvoiced_stats(bank, grid, n_frames: int = 2000,
                            rng: np.random.Generator | None = None,
                            t_hop: float = 0.005) -> tuple[float, float]:
    """Peak-likelihood Normal under white-noise input, via the full front end.

    Runs feature extraction, fusion, calibration, smoothing and
    tracking on standard-normal noise and fits a Normal to the peak
    log likelihoods along the tracked trajectory.  The result should
    replace the grid-size defaults whenever a trained bank is at hand.

    Returns:
        (mean, variance) of the fitted Normal.
    """
    from .pipeline import white_noise_peaks

    if rng is None:
        rng = np.random.default_rng()
    peaks = white_noise_peaks(bank, grid, n_frames, rng, t_hop=t_hop)
    mean = float(np.mean(peaks))
    var = float(max(np.var(peaks), VAR_FLOOR))
    return mean, var
