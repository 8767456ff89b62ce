"""End-to-end pipelines: training a model bank and analyzing audio with one.

Analysis runs load -> DC removal -> dither -> feature extraction ->
per-channel conditioning -> log-average fusion -> calibration +
normalization -> time smoothing -> Viterbi tracking -> quadratic
refinement -> voicing HMM.  Training renders Monte-Carlo draws once
and reuses every rendered signal for all channels, then fits the
per-channel mixtures, measures the white-noise calibration table and
simulates the unvoiced peak-likelihood statistics with the freshly
calibrated front end.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import fusion, gmm, synth, tracking, voicing
from .features import ChannelSpec, channel_feature_matrix, make_filterbank
from .fusion import FrequencyGrid, LikelihoodMap
from .metrics import PitchTrack
from .model import ChannelModel, ModelBank, standardize
from .signal import FrameClock, Waveform, dither, remove_dc

DEFAULT_F_MIN = 55.0
DEFAULT_F_MAX = 400.0
DEFAULT_T_HOP = 0.005
DEFAULT_N_BINS = 128
RENDER_CHUNK = 500


def worker_count() -> int:
    """Thread cap for per-channel training, honoring NEBULA_THREADS."""
    env = os.environ.get("NEBULA_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return max(1, os.cpu_count() or 1)


@dataclass(frozen=True)
class AnalyzeConfig:
    """Search range, frame rate and reproducibility knobs for analysis."""

    f_min: float = DEFAULT_F_MIN
    f_max: float = DEFAULT_F_MAX
    t_hop: float = DEFAULT_T_HOP
    n_bins: int = DEFAULT_N_BINS
    seed: int = 0
    use_dither: bool = True

    def __post_init__(self):
        if not 0 < self.f_min < self.f_max:
            raise ValueError("need 0 < f_min < f_max")
        if not 0 < self.t_hop < 0.1:
            raise ValueError("t_hop must lie in (0, 0.1) seconds")

    def validate_against(self, bank: ModelBank) -> None:
        lo, hi = bank.generator.f0_range_hz
        if self.f_min < lo or self.f_max > hi:
            raise ValueError(
                f"search range [{self.f_min}, {self.f_max}] Hz exceeds the "
                f"model's trained range [{lo}, {hi}] Hz")

    def grid(self) -> FrequencyGrid:
        return FrequencyGrid(f_min=self.f_min, f_max=self.f_max, n_bins=self.n_bins)


@dataclass(frozen=True)
class AnalysisResult:
    track: PitchTrack
    trajectory: tracking.F0Trajectory
    voicing_hmm: voicing.VoicingHmm
    smoothed_map: LikelihoodMap
    peaks_mass: np.ndarray  # peak likelihood per frame on the per-bin mass scale


def fused_rows(bank: ModelBank, feats: np.ndarray, grid: FrequencyGrid) -> np.ndarray:
    """Uncalibrated fused log likelihood for every frame.

    Args:
        feats: (n_frames, n_channels, 5) feature tensor.

    Returns:
        (n_frames, grid.n_bins) array: per frame, the average over
        channels of the conditional log density evaluated on the grid.
    """
    n_frames = feats.shape[0]
    if feats.shape[1] != len(bank.channels):
        raise ValueError("feature tensor does not match the bank's channel count")
    acc = np.zeros((n_frames, grid.n_bins))
    f = grid.centers
    for k, cm in enumerate(bank.channels):
        w, mu, var = cm.conditional_batch(feats[:, k, :])
        g = np.log2(f / cm.spec.fc)  # (n_bins,)
        z = g[None, None, :] - mu[:, :, None]
        with np.errstate(divide="ignore"):  # zero weights are fine under logsumexp
            log_w = np.log(w)
        comp = (log_w[:, :, None]
                - 0.5 * (gmm.LOG_2PI + np.log(var))[None, :, None]
                - 0.5 * z * z / var[None, :, None])
        acc += logsumexp(comp, axis=1)
    return acc / len(bank.channels)


def normalized_map(bank: ModelBank, feats: np.ndarray, grid: FrequencyGrid,
                   t_hop: float) -> LikelihoodMap:
    """Fuse, calibrate and row-normalize into a likelihood map."""
    rows = fused_rows(bank, feats, grid)
    debiased = rows - bank.calibration_for(grid)
    values = debiased - logsumexp(debiased, axis=1)[:, None] - np.log(grid.delta)
    return LikelihoodMap(values=values, grid=grid, t_hop=t_hop)


def analyze_waveform(bank: ModelBank, wav: Waveform, cfg: AnalyzeConfig,
                     rng: np.random.Generator | None = None) -> AnalysisResult:
    """Full inference for one waveform."""
    cfg.validate_against(bank)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    w = remove_dc(wav)
    if cfg.use_dither:
        w = dither(w, rng)
    clock = FrameClock.for_waveform(w, cfg.t_hop)
    specs = [cm.spec for cm in bank.channels]

    centers = np.round(clock.times() * w.fs).astype(np.int64)
    feats = np.empty((clock.n_frames, len(specs), 5))
    for k, ch in enumerate(specs):
        feats[:, k, :] = channel_feature_matrix(w.samples, w.fs, centers, ch)

    grid = cfg.grid()
    lmap = normalized_map(bank, feats, grid, cfg.t_hop)
    smap = fusion.smooth(lmap)

    tm = tracking.TransitionModel(t_hop=cfg.t_hop)
    path = tracking.viterbi_track(smap, tm)
    traj = tracking.refine_quadratic(smap, path)

    # the voicing HMM lives on the per-bin probability-mass scale, where a
    # flat posterior sits at log(1/n_bins)
    peaks_mass = traj.peak_loglik + np.log(grid.delta)
    if bank.unvoiced_mean is not None:
        hmm = voicing.VoicingHmm.for_hop(cfg.t_hop, bank.unvoiced_mean, bank.unvoiced_var)
    else:
        hmm = voicing.VoicingHmm.for_hop(cfg.t_hop)
    if peaks_mass.size >= 2 and np.ptp(peaks_mass) > 0:
        fitted = voicing.fit_voiced_obs(peaks_mass, hmm)
        # on all-unvoiced input Baum-Welch collapses the voiced state onto
        # the noise cluster; keep the initial voiced model in that case so
        # the two states stay distinguishable
        margin = 2.0 * np.sqrt(hmm.unvoiced_var)
        if fitted.voiced_mean > hmm.unvoiced_mean + margin:
            hmm = fitted
    vseq = voicing.decode(peaks_mass, hmm)

    track = PitchTrack(times=clock.times(), f0=traj.f0_hz, voiced=vseq.voiced)
    return AnalysisResult(track=track, trajectory=traj, voicing_hmm=hmm,
                          smoothed_map=smap, peaks_mass=peaks_mass)


def _noise_feature_frames(bank: ModelBank, n_frames: int, rng: np.random.Generator,
                          t_hop: float, independent: bool = False) -> np.ndarray:
    """Feature tensor of interior frames taken from white-noise signals.

    With ``independent=True`` the frames are spaced so their analysis
    windows never overlap, which is what expectation estimates (the
    calibration table) want; the default overlapping spacing mimics a
    real analysis pass and is what the tracking-based simulation wants.
    """
    gen = bank.generator
    fs = gen.fs
    specs = [cm.spec for cm in bank.channels]
    margin = max(s.window_len for s in specs) / 2 + 0.01
    spacing = 2.0 * margin if independent else t_hop
    dur = 1.0 if not independent else min(1.0, n_frames * spacing + 2 * margin)
    t_lo, t_hi = margin, dur - margin
    per_signal = max(1, int(np.floor((t_hi - t_lo) / spacing)) + 1)

    feats = np.empty((n_frames, len(specs), 5))
    done = 0
    while done < n_frames:
        x = rng.standard_normal(int(dur * fs))
        take = min(per_signal, n_frames - done)
        times = t_lo + np.arange(take) * spacing
        centers = np.round(times * fs).astype(np.int64)
        for k, ch in enumerate(specs):
            feats[done:done + take, k, :] = channel_feature_matrix(x, fs, centers, ch)
        done += take
    return feats


def white_noise_independent_rows(bank: ModelBank, grid: FrequencyGrid, n_frames: int,
                                 rng: np.random.Generator) -> np.ndarray:
    """Uncalibrated fused rows on non-overlapping white-noise frames."""
    feats = _noise_feature_frames(bank, n_frames, rng, DEFAULT_T_HOP, independent=True)
    return fused_rows(bank, feats, grid)


def white_noise_fused_rows(bank: ModelBank, grid: FrequencyGrid, n_frames: int,
                           rng: np.random.Generator,
                           t_hop: float = DEFAULT_T_HOP) -> np.ndarray:
    """Uncalibrated fused rows on standard-normal noise frames."""
    feats = _noise_feature_frames(bank, n_frames, rng, t_hop)
    return fused_rows(bank, feats, grid)


def white_noise_peaks(bank: ModelBank, grid: FrequencyGrid, n_frames: int,
                      rng: np.random.Generator,
                      t_hop: float = DEFAULT_T_HOP) -> np.ndarray:
    """Tracked peak likelihoods (mass scale) on white-noise utterances."""
    tm = tracking.TransitionModel(t_hop=t_hop)
    peaks = []
    chunk = 200  # frames per synthetic utterance
    done = 0
    while done < n_frames:
        take = min(chunk, n_frames - done)
        feats = _noise_feature_frames(bank, take, rng, t_hop)
        lmap = normalized_map(bank, feats, grid, t_hop)
        smap = fusion.smooth(lmap)
        path = tracking.viterbi_track(smap, tm)
        traj = tracking.refine_quadratic(smap, path)
        peaks.append(traj.peak_loglik + np.log(grid.delta))
        done += take
    return np.concatenate(peaks)


@dataclass
class TrainReport:
    """Per-channel EM traces plus bookkeeping from one training run."""

    em_reports: list[gmm.EmReport] = field(default_factory=list)
    channel_lls: list[float] = field(default_factory=list)


def _single_threaded_blas():
    """Workers must not oversubscribe the cores the pool already uses."""
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


def _fit_channel_job(job) -> tuple:
    """Worker for one channel's EM fit (runs in a separate process)."""
    k, std_data, n_components, seed_seq, _shift, _scale = job
    em_report = gmm.EmReport()
    try:
        with _single_threaded_blas():
            mix = gmm.fit_em(std_data, n_components, np.random.default_rng(seed_seq),
                             report=em_report)
    except gmm.TrainingError as exc:
        return None, em_report, str(exc)
    return mix, em_report, None


def _render_extract_chunk(job) -> np.ndarray:
    """Render one chunk of draws and extract all channel features from it."""
    draws, cfg, specs, seed_seq = job
    with _single_threaded_blas():
        signals = synth.render_batch(draws, cfg, np.random.default_rng(seed_seq))
        flat = signals.reshape(-1)
        n_sig = int(round(cfg.duration * cfg.fs))
        centers = np.arange(len(draws), dtype=np.int64) * n_sig + n_sig // 2
        out = np.empty((len(draws), len(specs), 5))
        for k, ch in enumerate(specs):
            out[:, k, :] = channel_feature_matrix(flat, cfg.fs, centers, ch)
    return out


def training_matrix(cfg: synth.GeneratorConfig, specs: list[ChannelSpec],
                    n_samples: int, rng_draws: np.random.Generator,
                    render_seed: np.random.SeedSequence) -> tuple[np.ndarray, np.ndarray]:
    """Render draws once and extract every channel's features from them.

    Chunks render with independent children of ``render_seed`` and are
    processed in parallel, so the result does not depend on worker
    scheduling.

    Returns:
        (features (n_samples, n_channels, 5), f0 (n_samples,)).
    """
    draws = [synth.sample_prior(cfg, rng_draws) for _ in range(n_samples)]
    f0 = np.array([d.f0 for d in draws])

    starts = list(range(0, n_samples, RENDER_CHUNK))
    chunk_seeds = render_seed.spawn(len(starts))
    jobs = [(draws[s:s + RENDER_CHUNK], cfg, specs, chunk_seeds[i])
            for i, s in enumerate(starts)]

    feats = np.empty((n_samples, len(specs), 5))
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for s, chunk in zip(starts, pool.map(_render_extract_chunk, jobs)):
                feats[s:s + chunk.shape[0]] = chunk
    else:
        # same single-threaded BLAS as the workers, so results do not
        # depend on the configured degree of parallelism
        for s, job in zip(starts, jobs):
            chunk = _render_extract_chunk(job)
            feats[s:s + chunk.shape[0]] = chunk
    return feats, f0


def train_bank(generator: synth.GeneratorConfig | None = None,
               n_channels: int = 36, n_samples: int = 100_000,
               n_components: int = 16, seed: int = 0,
               calibration_frames: int = 2000, unvoiced_frames: int = 2000,
               report: TrainReport | None = None,
               log=None) -> ModelBank:
    """Train a complete model bank from scratch.

    Rendering/extraction chunks and channel EM fits run in worker
    processes (capped by NEBULA_THREADS); every random stage draws from
    its own child of the master seed, so results are byte-reproducible
    regardless of worker count.

    Raises:
        gmm.TrainingError: if EM fails on any channel (message names it).
    """
    if generator is None:
        generator = synth.GeneratorConfig()
    if n_samples < 10 * n_components:
        raise ValueError(
            f"n_samples={n_samples} is below 10*M={10 * n_components}; "
            "not enough data to fit the mixtures")
    if report is None:
        report = TrainReport()

    f_lo, f_hi = generator.f0_range_hz
    specs = make_filterbank(f_lo, f_hi, n_channels)

    ss = np.random.SeedSequence(seed)
    ss_draws, ss_render, ss_cal, ss_unvoiced, ss_em = ss.spawn(5)
    rng_draws = np.random.default_rng(ss_draws)
    em_seeds = ss_em.spawn(n_channels)

    if log:
        log(f"rendering {n_samples} Monte-Carlo draws for {n_channels} channels")
    feats, f0 = training_matrix(generator, specs, n_samples, rng_draws, ss_render)
    if not np.all(np.isfinite(feats)):
        raise gmm.TrainingError("feature extraction produced non-finite values")

    jobs = []
    for k in range(n_channels):
        data = np.column_stack([feats[:, k, :], np.log2(f0 / specs[k].fc)])
        shift, scale, std_data = standardize(data)
        jobs.append((k, std_data, n_components, em_seeds[k], shift, scale))

    channels: list[ChannelModel | None] = [None] * n_channels
    reports: list[gmm.EmReport | None] = [None] * n_channels
    workers = min(worker_count(), n_channels)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fit_channel_job, jobs))
    else:
        results = [_fit_channel_job(job) for job in jobs]
    for k, (mix, em_report, err) in enumerate(results):
        if err is not None:
            raise gmm.TrainingError(f"channel {k} (fc={specs[k].fc:.1f} Hz): {err}")
        channels[k] = ChannelModel(spec=specs[k], shift=jobs[k][4],
                                   scale=jobs[k][5], gmm=mix)
        reports[k] = em_report
        if log:
            log(f"channel {k:2d} fc={specs[k].fc:7.1f} Hz: "
                f"ll={em_report.log_likelihoods[-1]:+.4f} "
                f"iters={em_report.n_iter} "
                f"{'converged' if em_report.converged else 'max-iter'}")
    report.em_reports = reports
    report.channel_lls = [r.log_likelihoods[-1] for r in reports]

    cal_grid = FrequencyGrid(f_min=f_lo, f_max=f_hi, n_bins=DEFAULT_N_BINS)
    bank = ModelBank(
        generator=generator, channels=tuple(channels), cal_grid=cal_grid,
        calibration=np.zeros(cal_grid.n_bins),
        meta={"n_samples": n_samples, "n_components": n_components, "seed": seed},
    )
    if log:
        log(f"estimating calibration table on {calibration_frames} noise frames")
    table = fusion.estimate_calibration(bank, cal_grid, calibration_frames,
                                        np.random.default_rng(ss_cal))
    bank = bank.with_calibration(table)

    if log:
        log(f"simulating unvoiced statistics on {unvoiced_frames} noise frames")
    mean, var = voicing.simulate_unvoiced_stats(
        bank, FrequencyGrid(DEFAULT_F_MIN, DEFAULT_F_MAX, DEFAULT_N_BINS),
        unvoiced_frames, np.random.default_rng(ss_unvoiced), t_hop=DEFAULT_T_HOP)
    bank = bank.with_unvoiced_stats(mean, var)
    if log:
        log(f"unvoiced peak likelihood: mean={mean:.3f} var={var:.4f}")
    return bank
