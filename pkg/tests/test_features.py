import numpy as np
import pytest

from nebula.features import (ChannelSpec, estimate_snr_if, extract_all,
                             extract_frame, make_filterbank)
from nebula.signal import FrameClock, Waveform

FS = 16000


def tone(freq, dur=1.0, amp=1.0, phase=0.0, fs=FS):
    t = np.arange(int(dur * fs)) / fs
    return amp * np.sin(2 * np.pi * freq * t + phase)


class TestMakeFilterbank:
    def test_endpoints(self):
        bank = make_filterbank(40.0, 1000.0, 36)
        assert bank[0].fc == pytest.approx(40.0)
        assert bank[-1].fc == pytest.approx(1000.0)
        assert len(bank) == 36

    def test_constant_ratio(self):
        bank = make_filterbank(40.0, 1000.0, 36)
        fcs = np.array([c.fc for c in bank])
        ratios = fcs[1:] / fcs[:-1]
        want = (1000.0 / 40.0) ** (1.0 / 35.0)  # direct computation
        assert np.allclose(ratios, want, rtol=1e-12)
        assert want == pytest.approx(1.0963, abs=1e-4)

    def test_two_channels(self):
        bank = make_filterbank(100.0, 200.0, 2)
        assert [c.fc for c in bank] == [pytest.approx(100.0), pytest.approx(200.0)]

    def test_window_floor(self):
        bank = make_filterbank(40.0, 1000.0, 36)
        for c in bank:
            assert c.window_len == pytest.approx(max(4.0 / c.fc, 0.01))

    def test_invalid_range(self):
        with pytest.raises(ValueError):
            make_filterbank(100.0, 50.0, 4)
        with pytest.raises(ValueError):
            make_filterbank(100.0, 200.0, 1)


class TestEstimateSnrIf:
    def test_pure_tone_at_probe(self):
        f = 200.0
        w = Waveform(tone(f, phase=0.7), FS)
        snr, f_hat = estimate_snr_if(w, 0.5, f, 0.02)
        assert snr == 60.0
        assert abs(f_hat - f) / f < 0.001

    def test_known_inband_snr(self):
        # Monte-Carlo oracle: tone plus white noise constructed so the
        # in-band SNR (window ENBW band convention) is exactly 20 dB
        f = 200.0
        win = 0.02
        L = int(round(win * FS))
        ls = L - L // 4
        h = np.hanning(ls)
        enbw = FS * (h * h).sum() / h.sum() ** 2
        sigma = np.sqrt((0.5) / (10 ** 2.0 * 2 * enbw / FS))
        vals = []
        for i in range(100):
            r = np.random.default_rng(100 + i)
            x = tone(f, phase=r.uniform(0, 6)) + sigma * r.standard_normal(FS)
            snr, _ = estimate_snr_if(Waveform(x, FS), 0.5, f, win)
            vals.append(snr)
        assert abs(np.mean(vals) - 20.0) < 3.0

    def test_noise_only_snr_is_low(self):
        vals = []
        for i in range(100):
            r = np.random.default_rng(500 + i)
            x = r.standard_normal(FS)
            snr, _ = estimate_snr_if(Waveform(x, FS), 0.5, 200.0, 0.02)
            vals.append(snr)
        assert np.mean(vals) < 3.0

    def test_zero_padding_at_edges(self):
        w = Waveform(tone(150.0, dur=0.05), FS)
        snr, f_hat = estimate_snr_if(w, 0.0, 150.0, 0.04)  # half window off signal
        assert np.isfinite(snr) and np.isfinite(f_hat)

    def test_probe_above_nyquist_rejected(self):
        w = Waveform(tone(100.0, dur=0.1), FS)
        with pytest.raises(ValueError):
            estimate_snr_if(w, 0.05, FS, 0.01)


class TestExtractFrame:
    CH = make_filterbank(40.0, 1000.0, 36)[18]  # fc ~ 209 Hz

    def test_tone_at_fc(self):
        w = Waveform(tone(self.CH.fc), FS)
        fv = extract_frame(w, 0.5, self.CH)
        assert abs(fv.if1) < 0.01
        assert fv.snr1 == 60.0

    def test_tone_at_double_fc_orderings(self):
        w = Waveform(tone(2 * self.CH.fc), FS)
        fv = extract_frame(w, 0.5, self.CH)
        assert abs(fv.if2) < 0.02
        assert fv.snr2 > 40.0
        assert fv.snr1 < 20.0
        assert fv.snr2 > fv.snr1 + 20.0

    def test_silence_hits_clamp_floor(self):
        w = Waveform(np.zeros(FS), FS)
        fv = extract_frame(w, 0.5, self.CH)
        assert fv.snr0 == -60.0 and fv.snr1 == -60.0 and fv.snr2 == -60.0

    def test_degenerate_double_probe(self):
        # 2*fc at/above Nyquist: snr2/if2 take their defined floor values
        ch = ChannelSpec(index=0, fc=900.0, window_len=0.01)
        w = Waveform(tone(300.0, fs=3600), 3600)
        fv = extract_frame(w, 0.5, ch)
        assert fv.snr2 == -60.0 and fv.if2 == 0.0
        assert np.isfinite(fv.snr1)

    def test_all_entries_finite_for_random_input(self, rng):
        for _ in range(20):
            x = rng.standard_normal(FS // 4) * rng.uniform(1e-6, 10)
            fv = extract_frame(Waveform(x, FS), 0.125, self.CH)
            assert np.all(np.isfinite(fv.as_array()))


class TestExtractAll:
    BANK = make_filterbank(40.0, 1000.0, 36)

    def test_shape_one_second(self):
        w = Waveform(tone(120.0), FS)
        clock = FrameClock.for_waveform(w, 0.005)
        feats = extract_all(w, clock, self.BANK)
        assert feats.shape == (201, 36, 5)

    def test_single_frame_signal(self):
        w = Waveform(tone(120.0, dur=0.004), FS)
        clock = FrameClock.for_waveform(w, 0.005)
        feats = extract_all(w, clock, self.BANK)
        assert feats.shape == (1, 36, 5)

    def test_matches_extract_frame(self):
        w = Waveform(tone(180.0, dur=0.2) + 0.1, FS)
        clock = FrameClock.for_waveform(w, 0.05)
        feats = extract_all(w, clock, self.BANK)
        for i, t in enumerate(clock.times()):
            for k in (0, 17, 35):
                row = extract_frame(w, t, self.BANK[k]).as_array()
                # BLAS may order the batched reductions differently, so
                # agreement is near-exact rather than bitwise
                assert np.allclose(feats[i, k], row, rtol=0, atol=1e-6)

    def test_no_nan_fuzz(self, rng):
        small = make_filterbank(40.0, 1000.0, 8)
        for _ in range(30):
            kind = rng.integers(4)
            n = int(rng.integers(400, 4000))
            if kind == 0:
                x = rng.standard_normal(n)
            elif kind == 1:
                x = np.zeros(n)
                x[rng.integers(n)] = rng.uniform(-1, 1)  # lone impulse
            elif kind == 2:
                x = np.full(n, rng.uniform(-0.5, 0.5))  # constant
            else:
                x = tone(rng.uniform(30, 2000), dur=n / FS)[:n] * rng.uniform(1e-8, 5)
            w = Waveform(x, FS)
            clock = FrameClock.for_waveform(w, 0.01)
            feats = extract_all(w, clock, small)
            assert np.all(np.isfinite(feats))


class TestProperties:
    CH = make_filterbank(40.0, 1000.0, 36)[20]

    def test_time_locality(self, rng):
        x = rng.standard_normal(FS)
        t = 0.5
        L = int(round(self.CH.window_len * FS))
        center = int(round(t * FS))
        ref = extract_frame(Waveform(x, FS), t, self.CH).as_array()
        y = x.copy()
        y[: center - L // 2 - 1] = rng.standard_normal(center - L // 2 - 1)
        y[center + L:] = 9.99
        got = extract_frame(Waveform(y, FS), t, self.CH).as_array()
        assert np.array_equal(ref, got)

    def test_scale_invariance(self, rng):
        x = tone(177.0) + 0.05 * rng.standard_normal(FS)
        a = extract_frame(Waveform(x, FS), 0.5, self.CH).as_array()
        b = extract_frame(Waveform(x * 123.456, FS), 0.5, self.CH).as_array()
        assert np.max(np.abs(a - b)) < 1e-6

    def test_if_unbiased_near_fc(self):
        rng = np.random.default_rng(0)
        for off in (-0.3, -0.15, 0.0, 0.15, 0.3):
            f = self.CH.fc * 2.0**off
            x = tone(f, phase=1.1) + 1e-2 * rng.standard_normal(FS)  # ~40 dB
            fv = extract_frame(Waveform(x, FS), 0.5, self.CH)
            assert abs(fv.if1 - off) < 0.01
