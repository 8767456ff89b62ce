"""Trained model bank: per-channel mixtures, calibration table, persistence.

The on-disk format is one self-describing JSON document (see
``model.schema.json`` at the repository root): format version, the
generator configuration the training data came from, channel specs,
per-channel standardization affines and mixture parameters, the
white-noise calibration table, and the simulated unvoiced
peak-likelihood statistics.  Floats are serialized with Python's
shortest round-trip representation, so save/load is lossless and a
saved file is byte-reproducible.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .features import ChannelSpec
from .fusion import FrequencyGrid
from .gmm import LOG_2PI, Conditional1D, GaussianMixture
from .synth import GeneratorConfig

FORMAT_NAME = "nebula-model"
FORMAT_VERSION = 1


class ModelFormatError(Exception):
    """Raised when a model file cannot be loaded or fails validation."""


@dataclass(frozen=True)
class ChannelModel:
    """One channel's mixture plus the affine that standardized its data.

    The mixture lives in standardized coordinates; ``shift`` and
    ``scale`` map raw [snr0, snr1, snr2, if1, if2, target] rows into
    that space.
    """

    spec: ChannelSpec
    shift: np.ndarray   # (6,)
    scale: np.ndarray   # (6,)
    gmm: GaussianMixture

    def __post_init__(self):
        shift = np.asarray(self.shift, dtype=np.float64)
        scale = np.asarray(self.scale, dtype=np.float64)
        if shift.shape != (6,) or scale.shape != (6,):
            raise ValueError("affine must cover the 6 model dimensions")
        if np.any(scale <= 0):
            raise ValueError("affine scales must be positive")
        if self.gmm.dim != 6:
            raise ValueError("channel mixtures are 6-dimensional")
        object.__setattr__(self, "shift", shift)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "_precomp", _precompute(self.gmm))

    def conditional_batch(self, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Condition on many feature rows at once.

        Args:
            feats: (n, 5) raw feature rows.

        Returns:
            (weights (n, M), means (n, M), variances (M,)) of the
            conditional target mixture, in raw target units (octaves
            relative to the channel center).  Rows whose
            responsibilities all underflow fall back to the prior
            weights.
        """
        pc = self._precomp
        xs = (np.atleast_2d(feats) - self.shift[:5]) / self.scale[:5]
        n = xs.shape[0]
        m = self.gmm.n_components
        log_w = np.empty((n, m))
        mu = np.empty((n, m))
        for j in range(m):
            diff = xs - pc.mu_x[j]
            sol = cho_solve((pc.chol[j], True), diff.T)
            maha = np.einsum("ij,ji->i", diff, sol)
            log_w[:, j] = pc.log_prior[j] - 0.5 * (5 * LOG_2PI + pc.logdet[j] + maha)
            mu[:, j] = pc.mu_f[j] + diff @ pc.gain[j]
        total = logsumexp(log_w, axis=1)
        under = ~np.isfinite(total)
        w = np.exp(log_w - np.where(under, 0.0, total)[:, None])
        if np.any(under):
            w[under] = self.gmm.weights
        w /= w.sum(axis=1, keepdims=True)

        t_shift, t_scale = self.shift[5], self.scale[5]
        return w, mu * t_scale + t_shift, pc.var_f * t_scale**2

    def conditional(self, feats_row: np.ndarray) -> Conditional1D:
        """Single-frame conditional in raw octave units."""
        w, mu, var = self.conditional_batch(np.asarray(feats_row)[None, :])
        return Conditional1D(weights=w[0], means=mu[0], variances=var)


@dataclass(frozen=True)
class _Precomp:
    chol: list
    logdet: np.ndarray
    gain: np.ndarray
    mu_x: np.ndarray
    mu_f: np.ndarray
    var_f: np.ndarray
    log_prior: np.ndarray


def _precompute(g: GaussianMixture) -> _Precomp:
    m = g.n_components
    chol = []
    logdet = np.empty(m)
    gain = np.empty((m, 5))
    var_f = np.empty(m)
    for j in range(m):
        s_xx = g.covariances[j, :5, :5]
        s_xf = g.covariances[j, :5, 5]
        c, _ = cho_factor(s_xx, lower=True)
        chol.append(c)
        logdet[j] = 2.0 * np.sum(np.log(np.diag(c)))
        gain[j] = cho_solve((c, True), s_xf)
        var_f[j] = max(g.covariances[j, 5, 5] - gain[j] @ s_xf, 1e-300)
    return _Precomp(chol=chol, logdet=logdet, gain=gain,
                    mu_x=g.means[:, :5].copy(), mu_f=g.means[:, 5].copy(),
                    var_f=var_f, log_prior=np.log(g.weights))


@dataclass(frozen=True)
class ModelBank:
    """Everything inference needs, as trained: channels, calibration, voicing stats."""

    generator: GeneratorConfig
    channels: tuple[ChannelModel, ...]
    cal_grid: FrequencyGrid
    calibration: np.ndarray           # (cal_grid.n_bins,)
    unvoiced_mean: float | None = None
    unvoiced_var: float | None = None
    meta: dict | None = None

    def __post_init__(self):
        cal = np.asarray(self.calibration, dtype=np.float64)
        if cal.shape != (self.cal_grid.n_bins,):
            raise ValueError("calibration table does not match its grid")
        if not np.all(np.isfinite(cal)):
            raise ValueError("calibration table must be finite")
        object.__setattr__(self, "calibration", cal)
        object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def centers_hz(self) -> np.ndarray:
        return np.array([cm.spec.fc for cm in self.channels])

    def calibration_for(self, grid: FrequencyGrid) -> np.ndarray:
        """Calibration values on an analysis grid (interpolated in log f)."""
        return np.interp(np.log(grid.centers), np.log(self.cal_grid.centers),
                         self.calibration)

    def with_calibration(self, table: np.ndarray) -> "ModelBank":
        return replace(self, calibration=np.asarray(table, dtype=np.float64))

    def with_unvoiced_stats(self, mean: float, var: float) -> "ModelBank":
        return replace(self, unvoiced_mean=float(mean), unvoiced_var=float(var))


def _payload(bank: ModelBank) -> dict:
    gen = bank.generator
    return {
        "generator": {
            "fs": gen.fs,
            "duration": gen.duration,
            "k_max": gen.k_max,
            "snr_db_range": list(gen.snr_db_range),
            "harm_db_range": list(gen.harm_db_range),
            "f0_range_hz": list(gen.f0_range_hz),
            "harmonic_cutoff": gen.harmonic_cutoff,
        },
        "channels": [
            {
                "index": cm.spec.index,
                "fc": cm.spec.fc,
                "window_len": cm.spec.window_len,
                "feature_shift": cm.shift.tolist(),
                "feature_scale": cm.scale.tolist(),
                "weights": cm.gmm.weights.tolist(),
                "means": cm.gmm.means.tolist(),
                "covariances": cm.gmm.covariances.tolist(),
            }
            for cm in bank.channels
        ],
        "calibration": {
            "f_min": bank.cal_grid.f_min,
            "f_max": bank.cal_grid.f_max,
            "n_bins": bank.cal_grid.n_bins,
            "values": bank.calibration.tolist(),
        },
        "unvoiced": None if bank.unvoiced_mean is None else {
            "mean": bank.unvoiced_mean,
            "var": bank.unvoiced_var,
        },
        "meta": bank.meta or {},
    }


def _canonical(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def save_bank(bank: ModelBank, path) -> None:
    """Write the bank as versioned, checksummed JSON (byte-reproducible)."""
    payload = _payload(bank)
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "checksum": hashlib.sha256(_canonical(payload).encode()).hexdigest(),
        "payload": payload,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_bank(path) -> ModelBank:
    """Load and validate a saved bank.

    Raises:
        ModelFormatError: unreadable/truncated file, wrong format name,
            unsupported version, or checksum mismatch.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ModelFormatError(f"cannot open model file {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model file {path} is truncated or not JSON: {exc}")

    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise ModelFormatError(f"{path} is not a {FORMAT_NAME} file")
    version = doc.get("version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported model format version {version!r} (supported: {FORMAT_VERSION})")
    payload = doc.get("payload")
    if not isinstance(payload, dict):
        raise ModelFormatError(f"{path}: missing payload")
    digest = hashlib.sha256(_canonical(payload).encode()).hexdigest()
    if digest != doc.get("checksum"):
        raise ModelFormatError(f"{path}: checksum mismatch, file corrupt")

    try:
        g = payload["generator"]
        gen = GeneratorConfig(
            fs=int(g["fs"]), duration=float(g["duration"]), k_max=int(g["k_max"]),
            snr_db_range=tuple(g["snr_db_range"]),
            harm_db_range=tuple(g["harm_db_range"]),
            f0_range_hz=tuple(g["f0_range_hz"]),
            harmonic_cutoff=float(g["harmonic_cutoff"]),
        )
        channels = []
        for c in payload["channels"]:
            spec = ChannelSpec(index=int(c["index"]), fc=float(c["fc"]),
                               window_len=float(c["window_len"]))
            gmm = GaussianMixture(
                weights=np.array(c["weights"]),
                means=np.array(c["means"]),
                covariances=np.array(c["covariances"]),
            )
            channels.append(ChannelModel(
                spec=spec, shift=np.array(c["feature_shift"]),
                scale=np.array(c["feature_scale"]), gmm=gmm))
        cal = payload["calibration"]
        cal_grid = FrequencyGrid(f_min=float(cal["f_min"]), f_max=float(cal["f_max"]),
                                 n_bins=int(cal["n_bins"]))
        uv = payload.get("unvoiced")
        bank = ModelBank(
            generator=gen, channels=tuple(channels), cal_grid=cal_grid,
            calibration=np.array(cal["values"]),
            unvoiced_mean=None if uv is None else float(uv["mean"]),
            unvoiced_var=None if uv is None else float(uv["var"]),
            meta=payload.get("meta") or {},
        )
    except (KeyError, TypeError, ValueError, np.linalg.LinAlgError) as exc:
        raise ModelFormatError(f"{path}: invalid model content: {exc}")
    return bank


def standardize(data: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column z-scoring; near-constant columns keep unit scale.

    Returns (shift, scale, standardized data).
    """
    shift = data.mean(axis=0)
    scale = data.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    return shift, scale, (data - shift) / scale
