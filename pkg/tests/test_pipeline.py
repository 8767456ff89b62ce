import numpy as np
import pytest

from nebula import pipeline
from nebula.fusion import FrequencyGrid
from nebula.signal import Waveform
from nebula.voicing import simulate_unvoiced_stats

FS = 16000


def harmonic_utterance(f0, snr_db, seed, dur=0.5, fs=FS):
    """Harmonic comb with random +-10 dB amplitudes at a given overall SNR."""
    r = np.random.default_rng(seed)
    t = np.arange(int(dur * fs)) / fs
    k_n = min(int(0.45 * fs / f0), 24)
    amps = 10.0 ** r.uniform(-0.5, 0.5, size=k_n)
    x = sum(a * np.sin(2 * np.pi * (k + 1) * f0 * t + r.uniform(-np.pi, np.pi))
            for k, a in enumerate(amps))
    harm_power = np.sum(amps**2) / 2.0
    noise_gain = np.sqrt(harm_power) / 10.0 ** (snr_db / 20.0)
    return Waveform(x + noise_gain * r.standard_normal(t.size), fs)


class TestAnalyzeConfig:
    def test_defaults(self):
        cfg = pipeline.AnalyzeConfig()
        assert cfg.f_min == 55.0 and cfg.f_max == 400.0 and cfg.t_hop == 0.005

    def test_rejects_bad_range(self):
        with pytest.raises(ValueError):
            pipeline.AnalyzeConfig(f_min=300.0, f_max=100.0)
        with pytest.raises(ValueError):
            pipeline.AnalyzeConfig(t_hop=0.2)

    def test_range_must_fit_model(self, unit_bank):
        cfg = pipeline.AnalyzeConfig(f_min=30.0, f_max=400.0)
        with pytest.raises(ValueError, match="trained range"):
            cfg.validate_against(unit_bank)


class TestAnalyzeWaveform:
    def test_frame_count_and_columns(self, unit_bank):
        w = harmonic_utterance(150.0, 30.0, seed=1, dur=1.0)
        res = pipeline.analyze_waveform(unit_bank, w, pipeline.AnalyzeConfig())
        assert res.track.times.size == 201
        assert res.track.f0.shape == (201,)
        assert res.peaks_mass.shape == (201,)
        assert res.smoothed_map.values.shape == (201, 128)

    def test_clean_tone_tracked_and_voiced(self, unit_bank):
        w = harmonic_utterance(120.0, 30.0, seed=2)
        res = pipeline.analyze_waveform(unit_bank, w, pipeline.AnalyzeConfig())
        tr = res.track
        inner = (tr.times >= 0.1) & (tr.times <= 0.4)
        assert tr.voiced[inner].all()
        assert np.all(np.abs(tr.f0[inner] - 120.0) / 120.0 < 0.01)

    def test_white_noise_mostly_unvoiced(self, unit_bank):
        w = Waveform(np.random.default_rng(3).standard_normal(FS // 2), FS)
        res = pipeline.analyze_waveform(unit_bank, w, pipeline.AnalyzeConfig())
        assert res.track.voiced.mean() <= 0.05

    def test_deterministic_under_seed(self, unit_bank):
        w = harmonic_utterance(200.0, 20.0, seed=4)
        a = pipeline.analyze_waveform(unit_bank, w, pipeline.AnalyzeConfig(seed=7))
        b = pipeline.analyze_waveform(unit_bank, w, pipeline.AnalyzeConfig(seed=7))
        assert np.array_equal(a.track.f0, b.track.f0)
        assert np.array_equal(a.track.voiced, b.track.voiced)
        assert np.array_equal(a.peaks_mass, b.peaks_mass)

    def test_single_frame_input(self, unit_bank):
        w = Waveform(np.random.default_rng(0).standard_normal(60), FS)
        res = pipeline.analyze_waveform(unit_bank, w, pipeline.AnalyzeConfig())
        assert res.track.times.size == 1

    def test_map_rows_normalized(self, unit_bank):
        w = harmonic_utterance(100.0, 15.0, seed=5, dur=0.2)
        res = pipeline.analyze_waveform(unit_bank, w, pipeline.AnalyzeConfig())
        grid = res.smoothed_map.grid
        # the unsmoothed rows integrate to one; smoothing preserves this
        # only approximately, so rebuild the raw map for the check
        from nebula.features import channel_feature_matrix
        from nebula.signal import dither, remove_dc
        ww = dither(remove_dc(w), np.random.default_rng(0))
        centers = np.round(res.track.times * FS).astype(np.int64)
        feats = np.empty((centers.size, len(unit_bank.channels), 5))
        for k, cm in enumerate(unit_bank.channels):
            feats[:, k, :] = channel_feature_matrix(ww.samples, FS, centers, cm.spec)
        lmap = pipeline.normalized_map(unit_bank, feats, grid, 0.005)
        sums = np.exp(lmap.values).sum(axis=1) * grid.delta
        assert np.allclose(sums, 1.0, atol=1e-10)


class TestFusedRowsConsistency:
    def test_batched_path_matches_per_frame_fusion(self, unit_bank, rng):
        # the vectorized inference path and the one-frame reference
        # operation must agree on the same features
        from nebula import fusion
        feats = rng.standard_normal((3, len(unit_bank.channels), 5)) * 8
        grid = FrequencyGrid(55.0, 400.0, 64)
        batched = pipeline.fused_rows(unit_bank, feats, grid)
        centers = unit_bank.centers_hz
        for i in range(3):
            conds = [cm.conditional(feats[i, k])
                     for k, cm in enumerate(unit_bank.channels)]
            row = fusion.fuse(conds, centers, grid)
            assert np.allclose(batched[i], row, rtol=1e-9, atol=1e-9)


class TestSimulateUnvoicedStats:
    def test_stats_near_flat_mass_level(self, unit_bank):
        grid = FrequencyGrid(55.0, 400.0, 128)
        mean, var = simulate_unvoiced_stats(unit_bank, grid, n_frames=400,
                                            rng=np.random.default_rng(0))
        assert -4.85 <= mean <= -4.3
        assert 0.0 < var <= 0.2

    def test_two_seeds_agree(self, unit_bank):
        grid = FrequencyGrid(55.0, 400.0, 128)
        m1, _ = simulate_unvoiced_stats(unit_bank, grid, n_frames=400,
                                        rng=np.random.default_rng(1))
        m2, _ = simulate_unvoiced_stats(unit_bank, grid, n_frames=400,
                                        rng=np.random.default_rng(2))
        assert abs(m1 - m2) < 0.05


class TestTrainBank:
    def test_refuses_insufficient_samples(self):
        with pytest.raises(ValueError, match="10\\*M"):
            pipeline.train_bank(n_samples=50, n_components=8)

    def test_unit_bank_structure(self, unit_bank):
        assert len(unit_bank.channels) == 24
        assert unit_bank.calibration.shape == (128,)
        assert unit_bank.unvoiced_mean is not None
        assert unit_bank.meta["n_samples"] == 3000
        for cm in unit_bank.channels:
            assert cm.gmm.n_components == 4


class TestWorkerCount:
    def test_env_cap_respected(self, monkeypatch):
        monkeypatch.setenv("NEBULA_THREADS", "3")
        assert pipeline.worker_count() == 3

    def test_garbage_env_falls_back(self, monkeypatch):
        monkeypatch.setenv("NEBULA_THREADS", "lots")
        assert pipeline.worker_count() >= 1
