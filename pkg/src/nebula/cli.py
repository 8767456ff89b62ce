"""Command-line interface: train, analyze, eval, inspect.

Exit codes: 0 success, 2 usage error, 3 I/O or data-format error,
4 model-file error, 5 training failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import __version__, metrics, pipeline
from .gmm import TrainingError
from .metrics import TrackFormatError, read_track_csv, resample_track
from .model import ModelFormatError, load_bank, save_bank
from .signal import AudioReadError, load_wav
from .synth import GeneratorConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_MODEL = 4
EXIT_TRAINING = 5


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nebula",
        description="F0 and voicing estimation with Monte-Carlo-trained statistics.")
    parser.add_argument("--version", action="version", version=f"nebula {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model bank on synthetic data")
    p_train.add_argument("out", help="output model file (JSON)")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--n-samples", type=int, default=100_000,
                         help="Monte-Carlo draws shared by all channels")
    p_train.add_argument("--components", "-M", type=int, default=16,
                         help="mixture components per channel")
    p_train.add_argument("--channels", type=int, default=36,
                         help="number of filterbank channels")
    p_train.add_argument("--fs", type=int, default=16000,
                         help="generator sample rate")
    p_train.add_argument("--calibration-frames", type=int, default=2000)
    p_train.add_argument("--unvoiced-frames", type=int, default=2000)
    p_train.add_argument("--dump-training", metavar="PATH",
                         help="also write the (features, target) rows as CSV")

    p_an = sub.add_parser("analyze", help="estimate F0 and voicing for a WAV file")
    p_an.add_argument("model", help="trained model file")
    p_an.add_argument("wav", help="input WAV file")
    p_an.add_argument("--out", default="-",
                      help="output track CSV (default: stdout)")
    p_an.add_argument("--f-min", type=float, default=pipeline.DEFAULT_F_MIN)
    p_an.add_argument("--f-max", type=float, default=pipeline.DEFAULT_F_MAX)
    p_an.add_argument("--t-hop", type=float, default=pipeline.DEFAULT_T_HOP,
                      help="frame interval in seconds")
    p_an.add_argument("--seed", type=int, default=0)
    p_an.add_argument("--no-dither", action="store_true",
                      help="disable input dithering")
    p_an.add_argument("--dump-map", metavar="PATH",
                      help="write the smoothed likelihood map as CSV")

    p_ev = sub.add_parser("eval", help="score an estimated track against a reference")
    p_ev.add_argument("est", help="estimated track CSV")
    p_ev.add_argument("ref", help="reference track CSV")
    p_ev.add_argument("--json", metavar="PATH", help="also write the report as JSON")

    p_in = sub.add_parser("inspect", help="print model metadata")
    p_in.add_argument("model", help="trained model file")
    return parser


def _cmd_train(args) -> int:
    if args.n_samples < 10 * args.components:
        print(f"error: --n-samples {args.n_samples} is below 10*M = "
              f"{10 * args.components}; refusing to fit degenerate mixtures",
              file=sys.stderr)
        return EXIT_USAGE
    gen = GeneratorConfig(fs=args.fs)
    report = pipeline.TrainReport()
    try:
        bank = pipeline.train_bank(
            generator=gen, n_channels=args.channels, n_samples=args.n_samples,
            n_components=args.components, seed=args.seed,
            calibration_frames=args.calibration_frames,
            unvoiced_frames=args.unvoiced_frames,
            report=report, log=lambda msg: print(msg, file=sys.stderr))
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING

    if args.dump_training:
        try:
            _dump_training(args, gen, bank)
        except OSError as exc:
            print(f"error writing training dump: {exc}", file=sys.stderr)
            return EXIT_IO
    try:
        save_bank(bank, args.out)
    except OSError as exc:
        print(f"error writing model file: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {args.out}", file=sys.stderr)
    return EXIT_OK


def _dump_training(args, gen: GeneratorConfig, bank) -> None:
    # regenerate a small inspection sample with the same seed lineage
    ss = np.random.SeedSequence(args.seed)
    ss_draws, ss_render = ss.spawn(5)[:2]
    n_dump = min(args.n_samples, 2000)
    specs = [cm.spec for cm in bank.channels]
    feats, f0 = pipeline.training_matrix(
        gen, specs, n_dump, np.random.default_rng(ss_draws), ss_render)
    with open(args.dump_training, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["channel", "snr0", "snr1", "snr2", "if1", "if2", "target_oct"])
        for k, spec in enumerate(specs):
            targets = np.log2(f0 / spec.fc)
            for i in range(n_dump):
                writer.writerow([k] + [repr(float(v)) for v in feats[i, k]]
                                + [repr(float(targets[i]))])


def _cmd_analyze(args) -> int:
    try:
        bank = load_bank(args.model)
    except ModelFormatError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    try:
        wav = load_wav(args.wav)
    except AudioReadError as exc:
        print(f"audio error: {exc}", file=sys.stderr)
        return EXIT_IO

    try:
        cfg = pipeline.AnalyzeConfig(
            f_min=args.f_min, f_max=args.f_max, t_hop=args.t_hop,
            seed=args.seed, use_dither=not args.no_dither)
        cfg.validate_against(bank)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    result = pipeline.analyze_waveform(bank, wav, cfg)

    try:
        if args.out == "-":
            _write_track(sys.stdout, result)
        else:
            with open(args.out, "w", newline="") as fh:
                _write_track(fh, result)
        if args.dump_map:
            _dump_map(args.dump_map, result.smoothed_map)
    except OSError as exc:
        print(f"error writing output: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def _write_track(fh, result) -> None:
    writer = csv.writer(fh)
    writer.writerow(["time_s", "f0_hz", "voiced", "peak_loglik"])
    track = result.track
    for i in range(track.times.size):
        writer.writerow([repr(float(track.times[i])), repr(float(track.f0[i])),
                         str(int(track.voiced[i])),
                         repr(float(result.trajectory.peak_loglik[i]))])


def _dump_map(path, lmap) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([repr(float(f)) for f in lmap.grid.centers])
        for row in lmap.values:
            writer.writerow([repr(float(v)) for v in row])


def _cmd_eval(args) -> int:
    try:
        est = read_track_csv(args.est)
        ref = read_track_csv(args.ref)
    except TrackFormatError as exc:
        print(f"track error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        if ref.hop > 0:
            est = resample_track(est, ref.hop)
        report = metrics.evaluate(est, ref)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    print(f"FFE:   {report.ffe:.3f}%")
    print(f"GPE:   {report.gpe:.3f}%")
    print(f"VDE:   {report.vde:.3f}%")
    print(f"VDE-V: {report.vde_v:.3f}%")
    print(f"VDE-U: {report.vde_u:.3f}%")
    print(f"frames: {report.n_frames} total, {report.n_both_voiced} both-voiced, "
          f"{report.n_ref_voiced} reference-voiced")
    if args.json:
        try:
            with open(args.json, "w") as fh:
                json.dump(report.as_dict(), fh, indent=1, sort_keys=True)
                fh.write("\n")
        except OSError as exc:
            print(f"error writing JSON report: {exc}", file=sys.stderr)
            return EXIT_IO
    return EXIT_OK


def _cmd_inspect(args) -> int:
    try:
        bank = load_bank(args.model)
    except ModelFormatError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    gen = bank.generator
    print(f"format version: 1")
    print(f"channels: {len(bank.channels)} over "
          f"[{bank.channels[0].spec.fc:.1f}, {bank.channels[-1].spec.fc:.1f}] Hz")
    print(f"components per channel: {bank.channels[0].gmm.n_components}")
    print(f"generator: fs={gen.fs} Hz, duration={gen.duration} s, "
          f"k_max={gen.k_max}, f0 range={list(gen.f0_range_hz)} Hz, "
          f"SNR range={list(gen.snr_db_range)} dB")
    print(f"calibration grid: {bank.cal_grid.n_bins} bins over "
          f"[{bank.cal_grid.f_min:.1f}, {bank.cal_grid.f_max:.1f}] Hz")
    if bank.unvoiced_mean is not None:
        print(f"unvoiced peak likelihood: mean={bank.unvoiced_mean:.4f} "
              f"var={bank.unvoiced_var:.5f}")
    else:
        print("unvoiced peak likelihood: not simulated (defaults apply)")
    if bank.meta:
        print(f"training meta: {json.dumps(bank.meta, sort_keys=True)}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "train": _cmd_train,
        "analyze": _cmd_analyze,
        "eval": _cmd_eval,
        "inspect": _cmd_inspect,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
