import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nebula.fusion import (FrequencyGrid, LikelihoodMap, estimate_calibration, fuse,
                           normalize, smooth)
from nebula.gmm import Conditional1D, log_density_1d

GRID = FrequencyGrid(f_min=55.0, f_max=400.0, n_bins=128)


def cond(w, mu, var):
    return Conditional1D(weights=np.atleast_1d(w), means=np.atleast_1d(mu),
                         variances=np.atleast_1d(var))


class TestFrequencyGrid:
    def test_bins_strictly_increasing(self):
        c = GRID.centers
        assert np.all(np.diff(c) > 0)
        assert c[0] == pytest.approx(55.0) and c[-1] == pytest.approx(400.0)

    def test_log_uniform_spacing(self):
        r = np.diff(np.log(GRID.centers))
        assert np.allclose(r, r[0], rtol=1e-12)

    def test_measure(self):
        assert GRID.delta == pytest.approx(np.log(400.0 / 55.0) / 128)

    def test_validation(self):
        with pytest.raises(ValueError):
            FrequencyGrid(f_min=100.0, f_max=50.0)


class TestFuse:
    def test_identical_conditionals_average_to_themselves(self):
        # channels at different centers given conditionals that describe
        # the SAME absolute-frequency density: the average equals it
        centers = np.array([100.0, 150.0, 250.0])
        target_hz = 130.0
        conds = [cond(1.0, np.log2(target_hz / fc), 0.25) for fc in centers]
        row = fuse(conds, centers, GRID)
        want = log_density_1d(conds[0],
                              np.log2(GRID.centers / centers[0]))
        assert np.allclose(row, want, atol=1e-12)

    def test_two_channel_hand_average(self):
        centers = np.array([100.0, 200.0])
        c1 = cond([0.4, 0.6], [0.0, 1.0], [0.3, 0.5])
        c2 = cond(1.0, -0.5, 0.2)
        row = fuse([c1, c2], centers, GRID)
        for b in (0, 31, 64, 101, 127):
            f = GRID.centers[b]
            want = 0.5 * (log_density_1d(c1, np.log2(f / 100.0))
                          + log_density_1d(c2, np.log2(f / 200.0)))
            assert row[b] == pytest.approx(want, abs=1e-12)

    def test_output_shape(self):
        row = fuse([cond(1.0, 0.0, 1.0)], np.array([100.0]), GRID)
        assert row.shape == (128,)

    def test_permutation_invariance(self, rng):
        centers = np.array([80.0, 120.0, 300.0])
        conds = [cond(1.0, rng.standard_normal(), 0.5) for _ in centers]
        a = fuse(conds, centers, GRID)
        perm = [2, 0, 1]
        b = fuse([conds[i] for i in perm], centers[perm], GRID)
        assert np.allclose(a, b, atol=1e-12)


class TestNormalize:
    def test_flat_row(self):
        row = np.full(128, -2.3)
        out = normalize(row, np.zeros(128), GRID)
        want = -np.log(np.log(400.0 / 55.0))
        assert np.allclose(out, want, atol=1e-12)

    def test_rows_integrate_to_one(self, rng):
        for _ in range(200):
            row = rng.standard_normal(128) * rng.uniform(0.5, 10)
            cal = rng.standard_normal(128)
            out = normalize(row, cal, GRID)
            assert abs(np.sum(np.exp(out)) * GRID.delta - 1.0) < 1e-10

    def test_constant_shift_invariance(self, rng):
        row = rng.standard_normal(128)
        cal = rng.standard_normal(128)
        a = normalize(row, cal, GRID)
        b = normalize(row + 7.7, cal, GRID)
        assert np.allclose(a, b, atol=1e-12)

    @given(shift=st.floats(-50, 50), scale=st.floats(0.01, 20), seed=st.integers(0, 2**16))
    @settings(max_examples=50, deadline=None)
    def test_normalization_property(self, shift, scale, seed):
        r = np.random.default_rng(seed)
        row = r.standard_normal(128) * scale + shift
        out = normalize(row, np.zeros(128), GRID)
        assert abs(np.sum(np.exp(out)) * GRID.delta - 1.0) < 1e-10


class TestSmooth:
    def test_constant_in_time_unchanged(self, rng):
        row = rng.standard_normal(128)
        lmap = LikelihoodMap(values=np.tile(row, (40, 1)), grid=GRID, t_hop=0.005)
        out = smooth(lmap)
        assert np.allclose(out.values, lmap.values, atol=1e-12)

    def test_window_size_at_100hz(self):
        # 3 / (100 Hz * 5 ms) = 6 frames
        grid = FrequencyGrid(f_min=100.0, f_max=400.0, n_bins=8)
        vals = np.zeros((41, 8))
        vals[20, 0] = 6.0  # impulse on the 100 Hz bin
        out = smooth(LikelihoodMap(values=vals, grid=grid, t_hop=0.005))
        spread = np.nonzero(out.values[:, 0])[0]
        assert spread.size == 6
        assert np.allclose(out.values[spread, 0], 1.0)

    def test_edges_average_available_frames_only(self):
        grid = FrequencyGrid(f_min=100.0, f_max=400.0, n_bins=8)
        vals = np.zeros((40, 8))
        vals[0, 0] = 1.0
        out = smooth(LikelihoodMap(values=vals, grid=grid, t_hop=0.005))
        # frame 0 window is truncated to frames [0, 3]: mean = 1/4
        assert out.values[0, 0] == pytest.approx(0.25)

    def test_matches_continuous_moving_average(self):
        # oracle: dense numerical evaluation of the continuous-time
        # moving average of a linear ramp, which it reproduces exactly
        # away from the edges; agreement within one-frame discretization
        grid = FrequencyGrid(f_min=100.0, f_max=400.0, n_bins=4)
        t_hop = 0.005
        n = 200
        slope = 3.0
        times = np.arange(n) * t_hop
        vals = np.tile((slope * times)[:, None], (1, 4))
        out = smooth(LikelihoodMap(values=vals, grid=grid, t_hop=t_hop))
        for b, f in enumerate(grid.centers):
            half = 1.5 / f
            tt = np.linspace(-half, half, 10001)
            for i in (50, 100, 149):
                dense = np.mean(slope * (times[i] + tt))  # = slope * t
                assert abs(out.values[i, b] - dense) <= slope * t_hop + 1e-9

    def test_per_bin_windows_differ(self):
        vals = np.zeros((60, 128))
        vals[30, :] = 1.0
        out = smooth(LikelihoodMap(values=vals, grid=GRID, t_hop=0.005))
        low_spread = np.count_nonzero(out.values[:, 0])    # 55 Hz: ~11 frames
        high_spread = np.count_nonzero(out.values[:, -1])  # 400 Hz: ~2 frames
        assert low_spread > high_spread


class TestEstimateCalibration:
    def test_table_length_and_finiteness(self, unit_bank):
        table = estimate_calibration(unit_bank, GRID, n_frames=150,
                                     rng=np.random.default_rng(0))
        assert table.shape == (128,)
        assert np.all(np.isfinite(table))

    def test_repeatability_two_runs(self, unit_bank):
        a = estimate_calibration(unit_bank, GRID, n_frames=2000,
                                 rng=np.random.default_rng(1))
        b = estimate_calibration(unit_bank, GRID, n_frames=2000,
                                 rng=np.random.default_rng(2))
        assert np.max(np.abs(a - b)) < 0.1

    def test_heldout_noise_mean_near_zero(self, unit_bank):
        from nebula.pipeline import white_noise_fused_rows
        table = estimate_calibration(unit_bank, GRID, n_frames=2000,
                                     rng=np.random.default_rng(3))
        rows = white_noise_fused_rows(unit_bank, GRID, 2000,
                                      np.random.default_rng(4))
        residual = rows.mean(axis=0) - table
        assert np.max(np.abs(residual)) < 0.05

    def test_minimum_frames_enforced(self, unit_bank):
        with pytest.raises(ValueError):
            estimate_calibration(unit_bank, GRID, n_frames=50,
                                 rng=np.random.default_rng(0))
