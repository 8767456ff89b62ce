"""Pitch-track evaluation: gross pitch error, voicing decision error, frame error.

Tracks are uniform sequences of (time, f0, voiced).  The estimate is
resampled to the reference rate first; metrics then count, over the
overlapping span: frames whose F0 deviates from the reference by more
than 20% among frames voiced in both tracks (GPE), frames with
mismatched voicing (VDE, split into reference-voiced and
reference-unvoiced sides), and their union over all frames (FFE).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

GROSS_ERROR_RATIO = 0.20


class TrackFormatError(Exception):
    """Raised when a track CSV cannot be parsed."""


@dataclass(frozen=True)
class PitchTrack:
    """Uniformly sampled pitch track; f0 is 0 on unvoiced frames."""

    times: np.ndarray
    f0: np.ndarray
    voiced: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        f = np.asarray(self.f0, dtype=np.float64)
        v = np.asarray(self.voiced, dtype=bool)
        if not (t.shape == f.shape == v.shape) or t.ndim != 1 or t.size == 0:
            raise ValueError("track fields must be equal-length non-empty vectors")
        if t.size > 1:
            steps = np.diff(t)
            if steps.min() <= 0 or np.ptp(steps) > 1e-6 * steps.mean():
                raise ValueError("track must be uniformly sampled in time")
        if np.any(f[v] <= 0):
            raise ValueError("voiced frames must carry positive f0")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "f0", f)
        object.__setattr__(self, "voiced", v)

    @property
    def hop(self) -> float:
        if self.times.size < 2:
            return 0.0
        return float((self.times[-1] - self.times[0]) / (self.times.size - 1))


@dataclass(frozen=True)
class EvalReport:
    """Error percentages plus the frame counts they were computed from."""

    ffe: float
    gpe: float
    vde: float
    vde_v: float
    vde_u: float
    n_frames: int
    n_both_voiced: int
    n_gross: int
    n_voicing_mismatch: int
    n_ref_voiced: int
    n_ref_unvoiced: int

    def as_dict(self) -> dict:
        return {
            "ffe_percent": self.ffe,
            "gpe_percent": self.gpe,
            "vde_percent": self.vde,
            "vde_v_percent": self.vde_v,
            "vde_u_percent": self.vde_u,
            "n_frames": self.n_frames,
            "n_both_voiced": self.n_both_voiced,
            "n_gross": self.n_gross,
            "n_voicing_mismatch": self.n_voicing_mismatch,
            "n_ref_voiced": self.n_ref_voiced,
            "n_ref_unvoiced": self.n_ref_unvoiced,
        }


def resample_track(track: PitchTrack, target_hop: float) -> PitchTrack:
    """Resample to a new hop: log-linear f0 inside voiced runs only.

    Voicing is taken from the nearest source frame.  A target frame
    whose bracketing source frames disagree on voicing keeps the f0 of
    its nearest voiced neighbor instead of interpolating across the
    boundary.
    """
    if target_hop <= 0:
        raise ValueError("target hop must be positive")
    src_hop = track.hop
    if src_hop == 0.0 or abs(src_hop - target_hop) < 1e-12:
        return track

    t0 = track.times[0]
    span = track.times[-1] - t0
    n_out = int(np.floor(span / target_hop + 1e-9)) + 1
    times = t0 + np.arange(n_out) * target_hop

    pos = (times - t0) / src_hop
    nearest = np.clip(np.round(pos).astype(np.int64), 0, track.times.size - 1)
    lo = np.clip(np.floor(pos).astype(np.int64), 0, track.times.size - 1)
    hi = np.clip(lo + 1, 0, track.times.size - 1)
    frac = np.clip(pos - lo, 0.0, 1.0)

    voiced = track.voiced[nearest]
    f0 = np.zeros(n_out)
    both = track.voiced[lo] & track.voiced[hi]
    with np.errstate(divide="ignore"):
        log_f = np.where(track.voiced, np.log(np.where(track.voiced, track.f0, 1.0)), 0.0)
    interp = np.exp((1.0 - frac) * log_f[lo] + frac * log_f[hi])
    f0 = np.where(voiced & both, interp, np.where(voiced, track.f0[nearest], 0.0))
    return PitchTrack(times=times, f0=f0, voiced=voiced)


def evaluate(est: PitchTrack, ref: PitchTrack) -> EvalReport:
    """Score an estimated track against a reference at the same hop.

    Only the overlapping time span is scored.  Callers with tracks at
    different rates resample the estimate first.
    """
    if est.times.size > 1 and ref.times.size > 1:
        if abs(est.hop - ref.hop) > 1e-9:
            raise ValueError(
                f"hop mismatch ({est.hop} vs {ref.hop}): resample the estimate first")
    hop = ref.hop if ref.hop else est.hop
    if hop == 0.0:
        # two single-frame tracks: compare if coincident
        hop = 1.0

    start = max(est.times[0], ref.times[0])
    stop = min(est.times[-1], ref.times[-1])
    if stop < start - 1e-9:
        raise ValueError("tracks do not overlap in time")

    def window(track: PitchTrack) -> tuple[int, int]:
        i0 = int(np.round((start - track.times[0]) / hop))
        i1 = int(np.round((stop - track.times[0]) / hop))
        return i0, i1 + 1

    e0, e1 = window(est)
    r0, r1 = window(ref)
    ev, ef = est.voiced[e0:e1], est.f0[e0:e1]
    rv, rf = ref.voiced[r0:r1], ref.f0[r0:r1]
    n = rv.size

    both = ev & rv
    with np.errstate(divide="ignore", invalid="ignore"):
        rel_dev = np.abs(ef - rf) / np.where(rf > 0, rf, 1.0)
    gross = both & (rel_dev > GROSS_ERROR_RATIO)
    mismatch = ev != rv

    n_both = int(both.sum())
    n_gross = int(gross.sum())
    n_mismatch = int(mismatch.sum())
    n_ref_v = int(rv.sum())
    n_ref_u = n - n_ref_v

    def pct(num: int, den: int) -> float:
        return 100.0 * num / den if den else 0.0

    return EvalReport(
        ffe=pct(n_gross + n_mismatch, n),
        gpe=pct(n_gross, n_both),
        vde=pct(n_mismatch, n),
        vde_v=pct(int((rv & ~ev).sum()), n_ref_v),
        vde_u=pct(int((~rv & ev).sum()), n_ref_u),
        n_frames=n,
        n_both_voiced=n_both,
        n_gross=n_gross,
        n_voicing_mismatch=n_mismatch,
        n_ref_voiced=n_ref_v,
        n_ref_unvoiced=n_ref_u,
    )


def write_track_csv(path, track: PitchTrack, peak_loglik: np.ndarray | None = None) -> None:
    """Write ``time_s,f0_hz,voiced[,peak_loglik]`` with round-trip floats."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["time_s", "f0_hz", "voiced"]
        if peak_loglik is not None:
            header.append("peak_loglik")
        writer.writerow(header)
        for i in range(track.times.size):
            row = [repr(float(track.times[i])), repr(float(track.f0[i])),
                   str(int(track.voiced[i]))]
            if peak_loglik is not None:
                row.append(repr(float(peak_loglik[i])))
            writer.writerow(row)


def read_track_csv(path) -> PitchTrack:
    """Parse a ``time_s,f0_hz,voiced`` CSV; f0 == 0 also means unvoiced.

    Extra columns are ignored.  Malformed content raises
    TrackFormatError naming the offending line.
    """
    times, f0, voiced = [], [], []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise TrackFormatError(f"cannot open track file {path}: {exc}")
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TrackFormatError(f"{path}: line 1: empty file")
        cols = [c.strip().lower() for c in header]
        if cols[:3] != ["time_s", "f0_hz", "voiced"]:
            raise TrackFormatError(
                f"{path}: line 1: expected header 'time_s,f0_hz,voiced', got {','.join(cols)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t = float(row[0])
                f = float(row[1])
                v = int(row[2]) != 0
            except (ValueError, IndexError):
                raise TrackFormatError(f"{path}: line {lineno}: malformed row {row!r}")
            if f <= 0:
                v = False
                f = 0.0
            times.append(t)
            f0.append(f)
            voiced.append(v)
    if not times:
        raise TrackFormatError(f"{path}: no data rows")
    try:
        return PitchTrack(times=np.array(times), f0=np.array(f0), voiced=np.array(voiced))
    except ValueError as exc:
        raise TrackFormatError(f"{path}: {exc}")
