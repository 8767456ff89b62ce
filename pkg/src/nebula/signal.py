"""Audio ingestion and deterministic preprocessing.

WAV decode, DC removal, dithering and the frame clock that every later
stage runs on.  All operations are pure: randomness comes in through an
explicit generator, waveforms are never mutated in place.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class AudioReadError(Exception):
    """Raised when an input audio file cannot be decoded."""


@dataclass(frozen=True)
class Waveform:
    """Mono sample buffer plus its sample rate.

    Samples are dimensionless amplitudes, nominally in [-1, 1].
    """

    samples: np.ndarray
    fs: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise ValueError("waveform must be a non-empty 1-D sample buffer")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.fs) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.fs}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "fs", int(self.fs))

    @property
    def duration(self) -> float:
        """Length in seconds."""
        return self.samples.size / self.fs


@dataclass(frozen=True)
class FrameClock:
    """Uniform analysis clock: frame i is centered at ``i * t_hop``."""

    t_hop: float
    n_frames: int

    def __post_init__(self):
        if self.t_hop <= 0:
            raise ValueError("t_hop must be positive")
        if self.n_frames < 1:
            raise ValueError("clock needs at least one frame")

    @classmethod
    def for_waveform(cls, w: Waveform, t_hop: float) -> "FrameClock":
        # epsilon guards against 1.0 / 0.005 landing at 199.999... in
        # binary floating point
        n = int(np.floor(w.duration / t_hop + 1e-9)) + 1
        return cls(t_hop=t_hop, n_frames=n)

    def times(self) -> np.ndarray:
        return np.arange(self.n_frames) * self.t_hop


def load_wav(path) -> Waveform:
    """Read a RIFF WAV file into a mono float64 waveform.

    Integer PCM is scaled to [-1, 1] by dividing by 2**(bits-1);
    IEEE-float content is taken as-is.  Multichannel input is mixed
    down by averaging the channels.

    Raises:
        AudioReadError: unreadable file, unsupported codec, or
            zero-length audio.
    """
    from scipy.io import wavfile

    try:
        fs, data = wavfile.read(path)
    except FileNotFoundError:
        raise AudioReadError(f"cannot open audio file: {path}")
    except ValueError as exc:
        raise AudioReadError(f"unsupported or corrupt WAV file {path}: {exc}")
    except Exception as exc:  # struct errors on truncated headers etc.
        raise AudioReadError(f"failed to read WAV file {path}: {exc}")

    if data.size == 0:
        raise AudioReadError(f"zero-length audio: {path}")

    if data.dtype == np.uint8:
        # 8-bit WAV is unsigned with midpoint 128
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # 24-bit PCM arrives left-justified in int32, so this scaling
        # covers both 24- and 32-bit content
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise AudioReadError(f"unsupported WAV sample format {data.dtype} in {path}")

    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return Waveform(samples=samples, fs=int(fs))


def remove_dc(w: Waveform) -> Waveform:
    """Subtract the global sample mean."""
    return Waveform(samples=w.samples - w.samples.mean(), fs=w.fs)


def dither(w: Waveform, rng: np.random.Generator) -> Waveform:
    """Add uniform white noise bounded by 2% of the peak amplitude.

    The noise is i.i.d. uniform on [-0.02*A, +0.02*A] with A the
    maximum absolute sample, so an all-zero input stays all-zero.
    Deterministic under a fixed generator state.
    """
    peak = np.abs(w.samples).max()
    if peak == 0.0:
        return w
    bound = 0.02 * peak
    noise = rng.uniform(-bound, bound, size=w.samples.size)
    return Waveform(samples=w.samples + noise, fs=w.fs)
