"""File formats: traces, step signals, idealizations, events, densities.

CSV files use a mandatory header row and '.' decimals.  The binary trace
format is little-endian float64 throughout: an 8-byte header holding the
sampling rate, then the observations.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .analysis import EventTable
from .deconv import Idealization
from .filters import TruncatedFilter, bessel_filter, truncate
from .signal import StepSignal, Trace

__all__ = [
    "read_trace", "write_trace", "read_step_csv", "write_step_csv",
    "write_idealization_csv", "read_idealization_csv", "write_events_csv",
    "write_density_csv", "write_metrics_csv", "filter_from_config",
    "read_config_file",
]


def write_trace(path, trace: Trace, fmt: str = "csv") -> None:
    path = Path(path)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "value"])
            for i, v in enumerate(trace.values, start=1):
                writer.writerow([i, repr(float(v))])
    elif fmt == "binary":
        with open(path, "wb") as fh:
            fh.write(struct.pack("<d", trace.sampling_rate))
            fh.write(trace.values.astype("<f8").tobytes())
    else:
        raise ValueError(f"unknown trace format {fmt!r}")


def read_trace(path, sampling_rate: float | None = None,
               fmt: str | None = None) -> Trace:
    """Read a trace; format inferred from the suffix unless given.

    CSV traces carry no sampling rate, so one must be supplied for them.
    """
    path = Path(path)
    if fmt is None:
        fmt = "binary" if path.suffix in (".bin", ".dat") else "csv"
    if fmt == "binary":
        blob = path.read_bytes()
        (rate,) = struct.unpack("<d", blob[:8])
        values = np.frombuffer(blob[8:], dtype="<f8")
        return Trace(values.copy(), rate)
    if sampling_rate is None:
        raise ValueError("CSV traces need an explicit sampling rate")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["index", "value"]:
            raise ValueError(f"unexpected trace header {header!r}")
        values = [float(row[1]) for row in reader if row]
    return Trace(np.array(values), sampling_rate)


def write_step_csv(path, signal: StepSignal) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["segment_start_s", "level"])
        for start, level in zip(signal.segment_starts(), signal.levels):
            writer.writerow([repr(float(start)), repr(float(level))])


def read_step_csv(path, end_time: float) -> StepSignal:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["segment_start_s", "level"]:
            raise ValueError(f"unexpected step header {header!r}")
        rows = [(float(r[0]), float(r[1])) for r in reader if r]
    if not rows or rows[0][0] != 0.0:
        raise ValueError("first segment must start at 0")
    return StepSignal(np.array([r[0] for r in rows[1:]]),
                      np.array([r[1] for r in rows]), end_time)


def write_idealization_csv(path, ideal: Idealization) -> None:
    signal = ideal.signal
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["segment_start_s", "level", "provenance"])
        for start, level, prov in zip(signal.segment_starts(), signal.levels,
                                      ideal.provenance):
            writer.writerow([repr(float(start)), repr(float(level)), prov])


def read_idealization_csv(path, end_time: float,
                          sigma_hat: float = float("nan"),
                          q_used: float = float("nan"),
                          gamma2: float = float("nan")) -> Idealization:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["segment_start_s", "level", "provenance"]:
            raise ValueError(f"unexpected idealization header {header!r}")
        rows = [(float(r[0]), float(r[1]), r[2]) for r in reader if r]
    signal = StepSignal(np.array([r[0] for r in rows[1:]]),
                        np.array([r[1] for r in rows]), end_time)
    return Idealization(signal=signal, provenance=tuple(r[2] for r in rows),
                        sigma_hat=sigma_hat, q_used=q_used, gamma2=gamma2)


def write_events_csv(path, table: EventTable) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["start_s", "dwell_s", "amplitude", "class"])
        for e in table.events:
            writer.writerow([repr(e.start), repr(e.dwell), repr(e.amplitude),
                             e.label])


def write_density_csv(path, curve: dict) -> None:
    keys = list(curve.keys())
    n = len(curve[keys[0]])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for i in range(n):
            writer.writerow([repr(float(curve[k][i])) for k in keys])


def write_metrics_csv(path, rows: list) -> None:
    """Detection-metrics table (list of DetectionMetrics or dicts)."""
    dicts = [r if isinstance(r, dict) else r.row() for r in rows]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(dicts[0].keys()))
        for d in dicts:
            writer.writerow([d[k] for k in dicts[0]])


def filter_from_config(config: dict) -> TruncatedFilter:
    """Truncated filter from `{type, poles, cutoff_hz, sample_hz,
    trunc_threshold}`."""
    if config.get("type", "bessel") != "bessel":
        raise ValueError(f"unsupported filter type {config.get('type')!r}")
    filt = bessel_filter(int(config["poles"]), float(config["cutoff_hz"]),
                         float(config["sample_hz"]))
    return truncate(filt, float(config.get("trunc_threshold", 1e-3)))


def read_config_file(path) -> dict:
    """key = value pairs, one per line; '#' starts a comment.

    Values parse as int, then float, then string.
    """
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        for cast in (int, float):
            try:
                out[key] = cast(value)
                break
            except ValueError:
                continue
        else:
            out[key] = value.strip("'\"")
    return out
