"""Monte-Carlo generator of harmonic-plus-noise training signals.

Draws (noise gain, harmonic amplitudes, fundamental, phases) from wide
log-uniform priors, renders them as ``noise + sum of harmonics``, and
pairs the rendered signals with per-channel feature vectors to build
the per-channel training sets.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal import Waveform


@dataclass(frozen=True)
class GeneratorConfig:
    """Fixed generator settings and prior bounds."""

    fs: int = 16000
    duration: float = 0.5
    k_max: int = 24
    snr_db_range: tuple[float, float] = (-50.0, 50.0)
    harm_db_range: tuple[float, float] = (-10.0, 10.0)
    f0_range_hz: tuple[float, float] = (40.0, 1000.0)
    # harmonics above this fraction of fs are dropped from the render
    harmonic_cutoff: float = 0.45

    def __post_init__(self):
        for name in ("snr_db_range", "harm_db_range", "f0_range_hz"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must be (lo, hi) with lo < hi")
        if self.fs <= 2 * self.f0_range_hz[1]:
            raise ValueError("fs must exceed twice the upper F0 bound")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.k_max < 1:
            raise ValueError("need at least one harmonic")


@dataclass(frozen=True)
class PriorDraw:
    """One Monte-Carlo sample of the signal-model random variables."""

    a_t: float
    a_k: np.ndarray
    f0: float
    theta_k: np.ndarray
    snr_db: float  # the drawn overall SNR the gains were solved for

    def __post_init__(self):
        # sampled draws always have a_t > 0; zero is allowed so noiseless
        # signals can be constructed directly
        if self.a_t < 0 or np.any(np.asarray(self.a_k) < 0):
            raise ValueError("gains must be non-negative")
        if len(self.a_k) != len(self.theta_k):
            raise ValueError("amplitude/phase length mismatch")


def sample_prior(cfg: GeneratorConfig, rng: np.random.Generator) -> PriorDraw:
    """Draw one (a_t, a_k, f0, theta_k) tuple from the priors.

    The overall SNR (total harmonic power over noise power) is
    log-uniform over ``cfg.snr_db_range``; per-harmonic amplitudes get
    independent log-uniform shapes within ``cfg.harm_db_range``; f0 is
    log-uniform over ``cfg.f0_range_hz``.  The noise gain is solved so
    that ``10*log10(sum(a_k^2)/2 / a_t^2)`` equals the drawn SNR
    exactly, so neither marginal distorts the other.
    """
    snr_db = rng.uniform(*cfg.snr_db_range)
    f0 = np.exp(rng.uniform(np.log(cfg.f0_range_hz[0]), np.log(cfg.f0_range_hz[1])))

    lo, hi = cfg.harm_db_range
    a_k = 10.0 ** (rng.uniform(lo / 20.0, hi / 20.0, size=cfg.k_max))
    k = np.arange(1, cfg.k_max + 1)
    a_k = np.where(k * f0 <= cfg.harmonic_cutoff * cfg.fs, a_k, 0.0)

    theta_k = rng.uniform(-np.pi, np.pi, size=cfg.k_max)

    harm_power = np.sum(a_k**2) / 2.0
    if harm_power > 0:
        a_t = np.sqrt(harm_power) / 10.0 ** (snr_db / 20.0)
    else:
        # every harmonic above the cutoff: pure-noise draw
        a_t = 1.0
    return PriorDraw(a_t=float(a_t), a_k=a_k, f0=float(f0), theta_k=theta_k, snr_db=float(snr_db))


def render(draw: PriorDraw, cfg: GeneratorConfig, rng: np.random.Generator) -> Waveform:
    """Render a draw: ``x[n] = a_t*u[n] + sum_k a_k*sin(2 pi n k f0/fs + theta_k)``.

    u[n] is i.i.d. standard normal; the output has
    ``round(duration*fs)`` samples.
    """
    n = int(round(cfg.duration * cfg.fs))
    x = draw.a_t * rng.standard_normal(n)
    t = np.arange(n)
    for k, (a, theta) in enumerate(zip(draw.a_k, draw.theta_k), start=1):
        if a == 0.0:
            continue
        x += a * np.sin(2.0 * np.pi * t * k * draw.f0 / cfg.fs + theta)
    return Waveform(samples=x, fs=cfg.fs)


def render_batch(draws: list[PriorDraw], cfg: GeneratorConfig,
                 rng: np.random.Generator) -> np.ndarray:
    """Render several draws into one (n_draws, n_samples) array.

    Same signal model as :func:`render` but vectorized over draws
    (one noise block for the whole batch, one pass per harmonic
    index), which is what makes large training sets affordable.
    """
    n = int(round(cfg.duration * cfg.fs))
    b = len(draws)
    a_t = np.array([d.a_t for d in draws])
    f0 = np.array([d.f0 for d in draws])
    amps = np.stack([d.a_k for d in draws])        # (b, k_max)
    thetas = np.stack([d.theta_k for d in draws])  # (b, k_max)

    out = a_t[:, None] * rng.standard_normal((b, n))
    base = np.outer(2.0 * np.pi * f0 / cfg.fs, np.arange(n))  # (b, n)
    for k in range(1, cfg.k_max + 1):
        col = amps[:, k - 1]
        if not np.any(col):
            continue
        out += col[:, None] * np.sin(k * base + thetas[:, k - 1][:, None])
    return out


def training_targets(draws: list[PriorDraw], fc: float) -> np.ndarray:
    """Regression target per draw: octaves of f0 relative to a channel center."""
    return np.log2(np.array([d.f0 for d in draws]) / fc)


def generate_training_set(cfg: GeneratorConfig, channel, n_samples: int,
                          rng: np.random.Generator):
    """Build one channel's training pairs from fresh Monte-Carlo draws.

    For each draw the rendered signal is analyzed at its midpoint and
    the channel's 5-dim feature vector is paired with the target
    ``log2(f0 / channel.fc)``.  Draws whose f0 is far from the channel
    are kept: the mixture must see them to learn ambiguity.

    Returns:
        (features, targets): arrays of shape (n_samples, 5) and (n_samples,).
    """
    from .features import extract_frame

    feats = np.empty((n_samples, 5))
    targets = np.empty(n_samples)
    t_mid = cfg.duration / 2.0
    for i in range(n_samples):
        draw = sample_prior(cfg, rng)
        w = render(draw, cfg, rng)
        feats[i] = extract_frame(w, t_mid, channel).as_array()
        targets[i] = np.log2(draw.f0 / channel.fc)
    return feats, targets
