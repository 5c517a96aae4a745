"""Command line front end: simulate, quantile, detect, idealize, analyze,
bench.

Exit codes: 0 success, 2 argument errors, 3 I/O errors, 4 numerical
failures.  `--json` prints a machine-readable summary to stdout.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import analysis, bench, detect, io as jio
from .deconv import IllConditionedCovariance, jules
from .detect import DetectionConfig, NoFeasibleSegmentation
from .noise import NoiseModel, simulate_trace
from .signal import StepSignal

EXIT_ARGS = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _add_filter_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--poles", type=int, default=4)
    p.add_argument("--cutoff-hz", type=float, default=1000.0)
    p.add_argument("--sample-hz", type=float, default=10000.0)
    p.add_argument("--trunc-threshold", type=float, default=1e-3)


def _filter_from_args(args) -> "jio.TruncatedFilter":
    return jio.filter_from_config({
        "type": "bessel", "poles": args.poles, "cutoff_hz": args.cutoff_hz,
        "sample_hz": args.sample_hz, "trunc_threshold": args.trunc_threshold,
    })


def _detection_config(args) -> DetectionConfig:
    q = getattr(args, "q", None)
    return DetectionConfig(alpha=args.alpha, q=q, mc_reps=args.mc_reps,
                           seed=args.seed,
                           calibration_n=getattr(args, "calibration_n", None))


def _emit(args, payload: dict) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, sort_keys=True))
    else:
        for key, value in payload.items():
            print(f"{key}: {value}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jules",
        description="Idealize lowpass-filtered piecewise-constant recordings "
                    "and reproduce the simulation studies.")
    parser.add_argument("--config", help="key=value file supplying defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthesize a trace from a step signal")
    _add_filter_flags(p)
    p.add_argument("--signal", help="step-signal CSV (default: isolated peak)")
    p.add_argument("--peak-length", type=float, default=5.0,
                   help="peak length in samples for the built-in signal")
    p.add_argument("--n", type=int, default=4000)
    p.add_argument("--noise-kind", default="filtered_white",
                   choices=["filtered_white", "violet_mix", "pink_mix",
                            "heterogeneous"])
    p.add_argument("--sigma0", type=float, default=1.4)
    p.add_argument("--mix-fraction", type=float, default=0.5)
    p.add_argument("--event-sigma", type=float, default=2.8)
    p.add_argument("--oversampling", type=int, default=100)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--format", default="csv", choices=["csv", "binary"])
    p.add_argument("--out", required=True)
    p.add_argument("--truth-out", help="ground-truth step CSV sidecar")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("quantile", help="Monte Carlo critical value")
    _add_filter_flags(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--reps", type=int, default=10000)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("detect", help="detection step only: constrained "
                                      "segmentation plus postfilter")
    _add_filter_flags(p)
    p.add_argument("trace")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--q", type=float, default=None)
    p.add_argument("--mc-reps", type=int, default=10000)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--sigma", type=float, default=None,
                   help="override the estimated noise scale")
    p.add_argument("--calibration-n", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", required=True, help="segmentation CSV")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("idealize", help="full pipeline")
    _add_filter_flags(p)
    p.add_argument("trace")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--q", type=float, default=None)
    p.add_argument("--gamma2", type=float, default=1.0)
    p.add_argument("--mc-reps", type=int, default=10000)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--calibration-n", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", required=True, help="idealization CSV")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("analyze", help="event statistics of an idealization")
    p.add_argument("idealization", help="idealization CSV")
    p.add_argument("--end-time", type=float, required=True,
                   help="recording end time in seconds")
    p.add_argument("--flicker-max-ms", type=float, default=2.6)
    p.add_argument("--dwell-min-ms", type=float, default=0.24)
    p.add_argument("--slow-min-ms", type=float, default=10.0)
    p.add_argument("--amp-min", type=float, default=10.0)
    p.add_argument("--amp-max", type=float, default=30.0)
    p.add_argument("--density-kind", default="histogram",
                   choices=["histogram", "gaussian_kde"])
    p.add_argument("--bandwidth", type=float, default=2.0)
    p.add_argument("--events-out", required=True)
    p.add_argument("--rates-out", help="fitted-rate JSON")
    p.add_argument("--density-out", help="amplitude density CSV")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("bench", help="reproduce the simulation studies")
    _add_filter_flags(p)
    p.add_argument("experiment", choices=["isolated-peak", "separation",
                                          "hmm", "robustness", "null"])
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--q", type=float, default=None)
    p.add_argument("--mc-reps", type=int, default=10000)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--lengths", type=float, nargs="+", default=[2, 3, 5])
    p.add_argument("--distances", type=int, nargs="+",
                   default=list(range(1, 44)))
    p.add_argument("--deltas", type=float, nargs="+", default=[2.0])
    p.add_argument("--kinds", nargs="+",
                   default=["white", "violet_mix", "pink_mix", "heterogeneous"])
    p.add_argument("--traces", type=int, default=5)
    p.add_argument("--hmm-n", type=int, default=600000)
    p.add_argument("--n", type=int, default=4000)
    p.add_argument("--out-dir", default="bench-out")
    p.add_argument("--json", action="store_true")
    return parser


def _builtin_peak(args) -> StepSignal:
    fs = args.sample_hz
    return StepSignal([2000.0 / fs, (2000.0 + args.peak_length) / fs],
                      [40.0, 20.0, 40.0], (args.n + 64) / fs)


def _cmd_simulate(args) -> int:
    filt = _filter_from_args(args)
    if args.signal:
        signal = jio.read_step_csv(args.signal, (args.n + 64) / args.sample_hz)
    else:
        signal = _builtin_peak(args)
    noise = NoiseModel(args.noise_kind, sigma0=args.sigma0,
                       mix_fraction=args.mix_fraction,
                       event_sigma=args.event_sigma,
                       oversampling=args.oversampling)
    trace = simulate_trace(signal, filt, noise, args.n, args.seed)
    jio.write_trace(args.out, trace, fmt=args.format)
    if args.truth_out:
        jio.write_step_csv(args.truth_out, signal)
    _emit(args, {"out": args.out, "n": trace.n,
                 "sample_hz": trace.sampling_rate, "seed": args.seed})
    return 0


def _cmd_quantile(args) -> int:
    filt = _filter_from_args(args)
    q = detect.multiscale_quantile(args.n, filt, args.alpha, args.reps,
                                   args.seed, workers=args.threads,
                                   use_cache=not args.no_cache)
    _emit(args, {"q": q, "n": args.n, "alpha": args.alpha,
                 "reps": args.reps, "seed": args.seed})
    return 0


def _cmd_detect(args) -> int:
    filt = _filter_from_args(args)
    trace = jio.read_trace(args.trace, sampling_rate=args.sample_hz)
    config = _detection_config(args)
    sigma = args.sigma if args.sigma is not None else detect.estimate_sigma(trace, filt)
    q = detect.resolve_q(config, trace.n, filt, workers=args.threads)
    ctx = detect.make_context(trace, filt, sigma=sigma,
                              penalty_n=config.calibration_n)
    seg = detect.postfilter(detect.fit_segmentation(trace, ctx, q), filt)
    jio.write_step_csv(args.out, seg)
    _emit(args, {"out": args.out, "changes": int(seg.change_count),
                 "sigma_hat": sigma, "q": q})
    return 0


def _cmd_idealize(args) -> int:
    filt = _filter_from_args(args)
    trace = jio.read_trace(args.trace, sampling_rate=args.sample_hz)
    config = _detection_config(args)
    ideal = jules(trace, config, filt, gamma2=args.gamma2, sigma=args.sigma,
                  workers=args.threads)
    jio.write_idealization_csv(args.out, ideal)
    _emit(args, {"out": args.out, "changes": int(ideal.signal.change_count),
                 "sigma_hat": ideal.sigma_hat, "q": ideal.q_used,
                 "gamma2": ideal.gamma2})
    return 0


def _cmd_analyze(args) -> int:
    ideal = jio.read_idealization_csv(args.idealization, args.end_time)
    thresholds = analysis.EventThresholds(
        flicker_max=args.flicker_max_ms * 1e-3,
        dwell_min=args.dwell_min_ms * 1e-3,
        slow_min=args.slow_min_ms * 1e-3,
        amp_band=(args.amp_min, args.amp_max))
    table = analysis.extract_events(ideal, thresholds)
    jio.write_events_csv(args.events_out, table)
    summary = {"events": len(table),
               "flicker": len(table.of_class("flicker")),
               "slow": len(table.of_class("slow"))}
    dwell_window = (thresholds.dwell_min, thresholds.flicker_max)
    dwells = table.dwells("flicker")
    if dwells.size >= 2:
        rate = analysis.fit_truncated_exponential(dwells, (0.0, math.inf))
        prob = analysis.truncation_probability(rate, dwell_window)
        summary["dwell_rate_per_s"] = rate
        gaps = table.closing_gaps(thresholds.amp_band[0])
        gaps = gaps[(gaps >= bench.DISTANCE_WINDOW[0])
                    & (gaps <= bench.DISTANCE_WINDOW[1])]
        if gaps.size >= 2:
            drate = analysis.fit_truncated_exponential(gaps, bench.DISTANCE_WINDOW)
            summary["distance_rate_per_s"] = drate
            summary["corrected_rate_per_s"] = drate / prob
    if args.rates_out:
        Path(args.rates_out).write_text(json.dumps(summary, sort_keys=True))
    if args.density_out:
        amps = table.amplitudes("flicker")
        if amps.size:
            curve = analysis.density_export(amps, bandwidth=args.bandwidth,
                                            kind=args.density_kind)
            jio.write_density_csv(args.density_out, curve)
    _emit(args, summary)
    return 0


def _cmd_bench(args) -> int:
    filt = _filter_from_args(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {"experiment": args.experiment, "out_dir": str(out_dir)}
    if args.experiment == "isolated-peak":
        spec = bench.PeakExperimentSpec(lengths=tuple(args.lengths),
                                        reps=args.reps, seed=args.seed,
                                        n=args.n, mc_reps=args.mc_reps)
        rows = bench.run_isolated_peak(spec, filt, q=args.q,
                                       workers=args.threads)
        jio.write_metrics_csv(out_dir / "isolated_peak.csv", rows)
        summary["rows"] = len(rows)
    elif args.experiment == "separation":
        rows = bench.run_separation(args.distances, args.reps, args.seed,
                                    filt, q=args.q, n=args.n,
                                    mc_reps=args.mc_reps,
                                    workers=args.threads)
        jio.write_metrics_csv(out_dir / "separation.csv", rows)
        summary["rows"] = len(rows)
    elif args.experiment == "hmm":
        res = bench.run_hmm_study(args.deltas, filt, traces=args.traces,
                                  n=args.hmm_n, seed=args.seed, q=args.q,
                                  mc_reps=args.mc_reps, workers=args.threads)
        rates = []
        for delta, r in res.items():
            jio.write_density_csv(out_dir / f"hmm_amplitudes_delta{delta:g}.csv",
                                  r["amplitude_hist"])
            rates.append({"delta": delta, "n_flicker": r["n_flicker"],
                          "dwell_rate_per_s": r["dwell_rate_per_s"],
                          "distance_rate_per_s": r["distance_rate_per_s"],
                          "corrected_rate_per_s": r["corrected_rate_per_s"]})
        jio.write_metrics_csv(out_dir / "hmm_rates.csv", rates)
        summary["rows"] = len(rates)
    elif args.experiment == "robustness":
        rows = bench.run_robustness(args.kinds, [int(x) for x in args.lengths],
                                    args.reps, args.seed, filt, q=args.q,
                                    workers=args.threads)
        jio.write_metrics_csv(out_dir / "robustness.csv", rows)
        summary["rows"] = len(rows)
    else:  # null
        if args.q is None:
            args.q = detect.multiscale_quantile(args.n, filt, 0.05,
                                                args.mc_reps, args.seed,
                                                workers=args.threads)
        rate = bench.run_null_rate(args.n, args.reps, args.seed, filt,
                                   q=args.q, workers=args.threads)
        summary["false_positive_rate"] = rate
    _emit(args, summary)
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "quantile": _cmd_quantile,
    "detect": _cmd_detect,
    "idealize": _cmd_idealize,
    "analyze": _cmd_analyze,
    "bench": _cmd_bench,
}


def _config_path(argv) -> str | None:
    for i, token in enumerate(argv):
        if token == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if token.startswith("--config="):
            return token.split("=", 1)[1]
    return None


def _apply_defaults(parser: argparse.ArgumentParser, overrides: dict) -> None:
    """Overrides become defaults on the parser and every subparser, so
    explicit flags still win."""
    parser.set_defaults(**overrides)
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for child in action.choices.values():
                _apply_defaults(child, overrides)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    # config file values become defaults; explicit flags still win
    config = _config_path(argv)
    if config:
        try:
            overrides = jio.read_config_file(config)
        except OSError as err:
            print(f"error: cannot read config: {err}", file=sys.stderr)
            return EXIT_IO
        _apply_defaults(parser, {k.replace("-", "_"): v
                                 for k, v in overrides.items()})
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (NoFeasibleSegmentation, IllConditionedCovariance,
            np.linalg.LinAlgError) as err:
        print(f"error: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"error: I/O failure: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        print(f"error: invalid arguments: {err}", file=sys.stderr)
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())
