"""Log-spaced filterbank with per-channel SNR and instantaneous-frequency estimators.

Each channel probes the signal at half, one and two times its center
frequency.  A probe is a Hann-windowed complex heterodyne evaluated at
two staggered sub-windows; the phase advance between them gives the
instantaneous-frequency estimate, and the ratio of the power of the
best-fit sinusoid at that frequency to the in-band residual power
gives the SNR estimate.

Concrete conventions (the downstream mixture models are trained on
whatever statistics these estimators produce, so they only need to be
fixed, not optimal):

* the IF sub-windows cover the first and last ``L - L//4`` samples of
  the frame, and the SNR fit uses the full frame, so the total support
  is exactly ``window_len`` seconds;
* the fit frequency is confined to +-0.6 octave around the probe, and
  the fitted power is attenuated by the window's magnitude response at
  the fit offset, so energy far from the probe cannot masquerade as
  in-band signal;
* the residual noise density is sampled two window-bins off the probe
  (between the harmonics of a comb at the channel's own spacing) and
  scaled by ``2*ENBW/fs`` of the full Hann window to express it as
  in-band power;
* SNR is clamped to [-60, 60] dB and IF offsets to +-4 octaves.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal import FrameClock, Waveform

SNR_CLAMP_DB = 60.0
IF_CLAMP_OCT = 4.0
FIT_CLAMP_OCT = 0.6


@dataclass(frozen=True)
class ChannelSpec:
    """One filterbank channel: center frequency and analysis window length."""

    index: int
    fc: float
    window_len: float

    def __post_init__(self):
        if self.fc <= 0:
            raise ValueError("channel center frequency must be positive")
        if self.window_len * self.fc <= 2.0:
            raise ValueError("window must span more than two periods of fc")


@dataclass(frozen=True)
class ChannelFeatureVector:
    """Per-frame feature 5-vector of one channel.

    SNRs in dB (clamped to +-60), IF entries as octave offsets from
    their probe frequency.
    """

    snr0: float
    snr1: float
    snr2: float
    if1: float
    if2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.snr0, self.snr1, self.snr2, self.if1, self.if2])


def make_filterbank(f_lo: float, f_hi: float, n: int) -> list[ChannelSpec]:
    """Geometrically spaced channels over [f_lo, f_hi].

    ``fc_i = f_lo * (f_hi/f_lo)**(i/(n-1))`` with window length four
    periods of fc, floored at 10 ms.
    """
    if not (0 < f_lo < f_hi):
        raise ValueError("need 0 < f_lo < f_hi")
    if n < 2:
        raise ValueError("need at least two channels")
    fcs = f_lo * (f_hi / f_lo) ** (np.arange(n) / (n - 1))
    return [ChannelSpec(index=i, fc=float(fc), window_len=float(max(4.0 / fc, 0.01)))
            for i, fc in enumerate(fcs)]


def _probe_batch(samples: np.ndarray, fs: int, centers: np.ndarray,
                 f_probe: float, window_len: float) -> tuple[np.ndarray, np.ndarray]:
    """SNR (dB) and IF (Hz) at one probe frequency for many frame centers.

    ``centers`` are sample indices; frames running past either end of
    the signal are zero-padded.  IF comes from the phase advance
    between two staggered sub-windows; SNR compares the power of the
    full-window sinusoid fit at the IF estimate against the residual
    noise density measured two window-bins off the probe, i.e. midway
    between the harmonics of a comb whose spacing matches the channel.
    Returns arrays of shape (len(centers),).
    """
    n_total = samples.size
    L = max(int(round(window_len * fs)), 16)
    delta = max(1, L // 4)
    ls = L - delta

    pad = L
    padded = np.zeros(n_total + 2 * pad)
    padded[pad:pad + n_total] = samples
    starts = np.asarray(centers, dtype=np.int64) - L // 2 + pad
    seg = np.lib.stride_tricks.sliding_window_view(padded, L)[starts]  # (F, L)

    h_sub = np.hanning(ls)
    omega_p = 2.0 * np.pi * f_probe / fs
    kern = h_sub * np.exp(-1j * omega_p * np.arange(ls))

    z0 = seg[:, 0:ls] @ kern
    z1 = seg[:, 1:1 + ls] @ kern
    zd = seg[:, delta:delta + ls] @ kern

    # phase advance per sample, coarse (lag 1, unambiguous) then fine
    # (lag delta, unwrapped against the coarse value)
    w_coarse = np.angle(z1 * np.conj(z0))
    phi_d = np.angle(zd * np.conj(z0))
    wraps = np.round((w_coarse * delta - phi_d) / (2.0 * np.pi))
    w_hat = (phi_d + 2.0 * np.pi * wraps) / delta
    f_raw = w_hat * fs / (2.0 * np.pi)

    f_if = np.clip(f_raw, f_probe * 2.0**-IF_CLAMP_OCT, f_probe * 2.0**IF_CLAMP_OCT)
    f_fit = np.clip(f_raw, f_probe * 2.0**-FIT_CLAMP_OCT, f_probe * 2.0**FIT_CLAMP_OCT)

    # weighted least-squares sinusoid fit at the per-frame fit frequency,
    # over the full window for maximum frequency resolution.  The Gram
    # matrix of the {sin, cos} basis under weights u reduces to the
    # heterodyne of u at twice the fit frequency:
    #   ucc/uss = (sum(u) +- Re G)/2,  usc = -Im(G)/2,  G = sum(u exp(-2jwi))
    h = np.hanning(L)
    idx = np.arange(L)
    probe_exp = np.exp(-1j * omega_p * idx)
    w_fit = 2.0 * np.pi * f_fit / fs
    e_fit = np.exp(-1j * np.outer(w_fit, idx))  # (F, L)
    u = h * h
    u_sum = u.sum()

    gram = (e_fit * e_fit) @ u
    ucc = 0.5 * (u_sum + gram.real)
    uss = 0.5 * (u_sum - gram.real)
    usc = -0.5 * gram.imag
    proj = np.einsum("fl,fl->f", e_fit, seg * u)  # sum(u x cos) - j sum(u x sin)
    bc = proj.real
    bs = -proj.imag
    det = uss * ucc - usc * usc
    safe = det > 1e-12 * (uss + ucc) ** 2
    det = np.where(safe, det, 1.0)
    alpha = np.where(safe, (bs * ucc - bc * usc) / det, 0.0)
    beta = np.where(safe, (bc * uss - bs * usc) / det, 0.0)
    resid = seg + alpha[:, None] * e_fit.imag - beta[:, None] * e_fit.real

    # attenuate the fitted power by the window response at the offset
    # between fit and probe frequency so off-band tones score low
    h_sum = h.sum()
    h2_sum = (h * h).sum()
    leak = np.abs((e_fit * (np.conj(probe_exp) * h)[None, :]).sum(axis=1)) / h_sum
    p_sine = 0.5 * (alpha**2 + beta**2) * leak**2

    # in-band noise density: heterodyne the residual two bins off the
    # probe (a Hann null region for comb neighbors one channel away)
    bin_hz = fs / L
    p_noise = np.zeros(seg.shape[0])
    n_probes = 0
    for q in (f_probe - 2.0 * bin_hz, f_probe + 2.0 * bin_hz):
        if not 0.0 < q < 0.499 * fs:
            continue
        kern_q = h * np.exp(-1j * 2.0 * np.pi * q / fs * idx)
        p_noise += np.abs(resid @ kern_q) ** 2 / h2_sum
        n_probes += 1
    if n_probes:
        p_noise /= n_probes
    p_inband = p_noise * 2.0 * h2_sum / h_sum**2  # sigma^2 * 2*ENBW/fs

    with np.errstate(divide="ignore", invalid="ignore"):
        snr = 10.0 * np.log10(p_sine / p_inband)
    snr = np.where(p_sine <= 0.0, -SNR_CLAMP_DB, snr)
    snr = np.where((p_inband <= 0.0) & (p_sine > 0.0), SNR_CLAMP_DB, snr)
    snr = np.clip(snr, -SNR_CLAMP_DB, SNR_CLAMP_DB)
    return snr, f_if


def estimate_snr_if(w: Waveform, t: float, f_probe: float,
                    window_len: float) -> tuple[float, float]:
    """SNR (dB, clamped to +-60) and IF estimate (Hz) at one probe.

    The analysis frame is centered at ``t`` and spans ``window_len``
    seconds; parts of the frame outside the signal read as zeros.
    """
    if not 0 < f_probe < w.fs / 2:
        raise ValueError("probe frequency must lie below Nyquist")
    center = np.array([int(round(t * w.fs))])
    snr, f_hat = _probe_batch(w.samples, w.fs, center, f_probe, window_len)
    return float(snr[0]), float(f_hat[0])


def channel_feature_matrix(samples: np.ndarray, fs: int, centers: np.ndarray,
                           ch: ChannelSpec) -> np.ndarray:
    """Feature rows [snr0, snr1, snr2, if1, if2] for many frame centers.

    This is the batched workhorse behind :func:`extract_frame` and
    :func:`extract_all`; ``centers`` are sample indices.
    """
    out = np.empty((len(centers), 5))
    snr0, _ = _probe_batch(samples, fs, centers, ch.fc / 2.0, ch.window_len)
    snr1, f1 = _probe_batch(samples, fs, centers, ch.fc, ch.window_len)
    out[:, 0] = snr0
    out[:, 1] = snr1
    out[:, 3] = np.log2(f1 / ch.fc)
    if 2.0 * ch.fc < fs / 2.0:
        snr2, f2 = _probe_batch(samples, fs, centers, 2.0 * ch.fc, ch.window_len)
        out[:, 2] = snr2
        out[:, 4] = np.log2(f2 / (2.0 * ch.fc))
    else:
        out[:, 2] = -SNR_CLAMP_DB
        out[:, 4] = 0.0
    return out


def extract_frame(w: Waveform, t: float, ch: ChannelSpec) -> ChannelFeatureVector:
    """One channel's feature vector for the frame centered at ``t``."""
    centers = np.array([int(round(t * w.fs))])
    row = channel_feature_matrix(w.samples, w.fs, centers, ch)[0]
    return ChannelFeatureVector(*row)


def extract_all(w: Waveform, clock: FrameClock, bank: list[ChannelSpec]) -> np.ndarray:
    """Feature tensor of shape (n_frames, n_channels, 5)."""
    centers = np.round(clock.times() * w.fs).astype(np.int64)
    out = np.empty((clock.n_frames, len(bank), 5))
    for k, ch in enumerate(bank):
        out[:, k, :] = channel_feature_matrix(w.samples, w.fs, centers, ch)
    return out
