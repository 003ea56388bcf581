"""QoE and transport metrics: per-session computation, Jain's fairness
index, cross-run aggregation, and the report files.

Latency is one-half of each measured RTT; a session's latency figure is the
median over its per-ACK samples. Throughput is application goodput
(delivered segment payload bytes over elapsed session time) and playback
bitrate is the time-weighted representation bitrate over played media.
"""

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from statistics import mean, median

from .engine import NS_PER_SEC


@dataclass
class SessionMetrics:
    user_id: int
    playback_duration_s: float
    prestart_s: float
    stall_duration_s: float
    interruption_duration_s: float  # stalls plus pre-start delay
    stall_count: int
    latency_median_ms: float
    latency_mean_ms: float
    mean_throughput_bps: float
    avg_playback_bitrate_bps: float
    elapsed_s: float
    residual_s: float
    rep_switches: int
    completed: bool


def jain_index(values):
    """(sum x)^2 / (N * sum x^2) for non-negative, not-all-zero values."""
    values = list(values)
    if not values:
        raise ValueError("fairness of an empty allocation is undefined")
    if any(v < 0 for v in values):
        raise ValueError("fairness inputs must be non-negative")
    peak = max(values)
    if peak == 0:
        raise ValueError("fairness of an all-zero allocation is undefined")
    # normalize by the peak (J is scale invariant) so squares cannot
    # underflow for denormal inputs
    scaled = [v / peak for v in values]
    total = sum(scaled)
    return total * total / (len(scaled) * sum(v * v for v in scaled))


def compute_session(result):
    """Fold one SessionResult (playback log + transport trace) into metrics."""
    samples_ms = [r / 2 / 1_000_000 for r in result.rtt_samples_ns]
    playback_ns = result.playback_ns
    if playback_ns > 0:
        weighted = sum(b * ns for b, ns in result.played_bitrate_ns)
        avg_bitrate = weighted / playback_ns
    else:
        avg_bitrate = 0.0
    elapsed_ns = max(result.elapsed_ns, 1)
    return SessionMetrics(
        user_id=result.user_id,
        playback_duration_s=playback_ns / NS_PER_SEC,
        prestart_s=result.prestart_ns / NS_PER_SEC,
        stall_duration_s=result.stall_ns / NS_PER_SEC,
        interruption_duration_s=(result.stall_ns + result.prestart_ns) / NS_PER_SEC,
        stall_count=result.stall_count,
        latency_median_ms=median(samples_ms) if samples_ms else 0.0,
        latency_mean_ms=mean(samples_ms) if samples_ms else 0.0,
        mean_throughput_bps=result.bytes_delivered * 8 * NS_PER_SEC / elapsed_ns,
        avg_playback_bitrate_bps=avg_bitrate,
        elapsed_s=result.elapsed_ns / NS_PER_SEC,
        residual_s=result.residual_ns / NS_PER_SEC,
        rep_switches=result.rep_switches,
        completed=result.completed,
    )


def cdf_points(values):
    """Empirical CDF as (value, cumulative probability) pairs."""
    ordered = sorted(values)
    n = len(ordered)
    return [(v, (i + 1) / n) for i, v in enumerate(ordered)]


def quartiles(values):
    ordered = sorted(values)
    if not ordered:
        raise ValueError("quartiles of an empty list are undefined")

    def q(p):
        # linear interpolation between closest ranks
        idx = p * (len(ordered) - 1)
        lo = int(idx)
        hi = min(lo + 1, len(ordered) - 1)
        frac = idx - lo
        return ordered[lo] * (1 - frac) + ordered[hi] * frac

    return {
        "min": ordered[0],
        "q1": q(0.25),
        "median": q(0.5),
        "q3": q(0.75),
        "max": ordered[-1],
    }


def aggregate(runs):
    """Cross-run aggregate for one (transport, cc) cell.

    `runs` is a list (one entry per run) of lists of SessionMetrics (one per
    user). Medians for durations and latency, means for stall counts, CDF
    points for bitrate and throughput, per-run fairness medians.
    """
    sessions = [m for run in runs for m in run]
    if not sessions:
        raise ValueError("aggregate needs at least one session")
    playback = [m.playback_duration_s for m in sessions]
    interruption = [m.interruption_duration_s for m in sessions]
    stall_dur = [m.stall_duration_s for m in sessions]
    latency = [m.latency_median_ms for m in sessions]
    bitrate = [m.avg_playback_bitrate_bps for m in sessions]
    throughput = [m.mean_throughput_bps for m in sessions]

    fairness = {"throughput": [], "bitrate": [], "playback_duration": []}
    for run in runs:
        try:
            fairness["throughput"].append(
                jain_index([m.mean_throughput_bps for m in run]))
            fairness["bitrate"].append(
                jain_index([m.avg_playback_bitrate_bps for m in run]))
            fairness["playback_duration"].append(
                jain_index([m.playback_duration_s for m in run]))
        except ValueError:
            pass  # all-zero run; fairness undefined for it

    return {
        "n_runs": len(runs),
        "n_sessions": len(sessions),
        "median_playback_duration_s": median(playback),
        "median_interruption_duration_s": median(interruption),
        "median_stall_duration_s": median(stall_dur),
        "mean_total_stalls": mean(sum(m.stall_count for m in run) for run in runs),
        "mean_stalls_per_user": mean(m.stall_count for m in sessions),
        "median_latency_ms": median(latency),
        "mean_latency_ms": mean(m.latency_mean_ms for m in sessions),
        "median_bitrate_bps": median(bitrate),
        "median_throughput_bps": median(throughput),
        "jain_throughput": median(fairness["throughput"]) if fairness["throughput"] else None,
        "jain_bitrate": median(fairness["bitrate"]) if fairness["bitrate"] else None,
        "jain_playback_duration": median(fairness["playback_duration"]) if fairness["playback_duration"] else None,
        "completed_fraction": mean(1.0 if m.completed else 0.0 for m in sessions),
        "cdf_bitrate_bps": cdf_points(bitrate),
        "cdf_throughput_bps": cdf_points(throughput),
        "playback_duration_quartiles": quartiles(playback),
    }


RUN_CSV_FIELDS = [
    "run", "user_id", "playback_duration_s", "prestart_s", "stall_duration_s",
    "interruption_duration_s", "stall_count", "latency_median_ms",
    "latency_mean_ms", "mean_throughput_bps", "avg_playback_bitrate_bps",
    "elapsed_s", "residual_s", "rep_switches", "completed",
]

SUMMARY_FIELDS = [
    "scheme", "median_playback_duration_s", "median_interruption_duration_s",
    "mean_total_stalls", "median_latency_ms", "median_bitrate_bps",
    "median_throughput_bps", "jain_throughput", "jain_bitrate",
    "jain_playback_duration",
]


def fmt(x):
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return f"{x:.6f}"
    if x is None:
        return ""
    return str(x)


def write_run_csv(path, runs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RUN_CSV_FIELDS)
        for run_idx, run in enumerate(runs):
            for m in run:
                row = asdict(m)
                row["run"] = run_idx
                w.writerow([fmt(row[k]) for k in RUN_CSV_FIELDS])


def write_summary(out_dir, aggregates):
    """`aggregates` maps scheme name -> aggregate dict; writes the summary
    table, the machine-readable JSON, the CDF files, and the boxplot file."""
    out = Path(out_dir)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_FIELDS)
        for scheme in sorted(aggregates):
            agg = aggregates[scheme]
            w.writerow([scheme] + [fmt(agg[k]) for k in SUMMARY_FIELDS[1:]])

    serializable = {}
    for scheme, agg in aggregates.items():
        clean = dict(agg)
        clean.pop("cdf_bitrate_bps")
        clean.pop("cdf_throughput_bps")
        serializable[scheme] = clean
    with open(out / "summary.json", "w") as fh:
        json.dump(serializable, fh, indent=2, sort_keys=True)
        fh.write("\n")

    for scheme in sorted(aggregates):
        agg = aggregates[scheme]
        for metric, key in (("bitrate", "cdf_bitrate_bps"),
                            ("throughput", "cdf_throughput_bps")):
            with open(out / f"{metric}_{scheme}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["value_bps", "cumulative_probability"])
                for value, prob in agg[key]:
                    w.writerow([fmt(float(value)), fmt(prob)])

    with open(out / "playback_duration_boxplot.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "min", "q1", "median", "q3", "max"])
        for scheme in sorted(aggregates):
            q = aggregates[scheme]["playback_duration_quartiles"]
            w.writerow([scheme] + [fmt(float(q[k]))
                                   for k in ("min", "q1", "median", "q3", "max")])
