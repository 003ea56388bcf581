"""Experiment harness: builds one simulation per (transport, cc, run) cell,
executes the matrix across worker processes, and writes every report.

Runs are fully determined by (scenario, transport, cc, run index): the run
seed is derived from the base seed and the cell labels alone, so adding or
removing cells never perturbs the others, and results are merged by key,
never by completion order.
"""

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .dash import ClientConfig, DashClient, Manifest, VideoServer, format_playback_log
from .engine import Engine, make_rng, millis, seconds, substream_seed
from .metrics import aggregate, compute_session, write_run_csv, write_summary
from .netpath import SERVER, Network, Packet, ue
from .scenario import (
    DEFAULT_MATRIX,
    ScenarioConfig,
    echo_config,
    parse_scenario,
    validate_config,
    with_cell,
)
from .transport import Connection


def scheme_name(transport, cc):
    return f"{transport}-{cc}"


def run_seed_for(base_seed, transport, cc, run_index):
    return substream_seed(base_seed, "cell", transport, cc, "run", run_index)


def build_simulation(cfg, run_seed, trace_cc=False):
    """Wire one full simulation; returns (engine, clients)."""
    engine = Engine()
    net = Network(engine, cfg.path_config(), run_seed, cfg.n_users)
    manifest = Manifest(
        ladder_bps=cfg.ladder_bps,
        segment_duration_ns=seconds(cfg.segment_s),
        content_length_ns=seconds(cfg.content_s),
    )
    server = VideoServer(manifest)
    tconf = cfg.transport_config()
    client_conf = ClientConfig(
        target_buffer_s=cfg.target_buffer_s,
        resume_threshold_segments=cfg.resume_segments,
        playback_buffer_bytes=round(cfg.playback_buffer_mb * 1024 * 1024),
        ewma_alpha=cfg.throughput_ewma_alpha,
        delta_scale=cfg.delta_scale,
        down_switch_safety=cfg.down_switch_safety,
        up_switch_margin=cfg.up_switch_margin,
        down_switch_margin=cfg.down_switch_margin,
        start_jitter_ns=millis(cfg.start_jitter_ms),
    )

    server_conns = {}
    net.attach(SERVER, lambda pkt: server_conns[pkt.src].on_datagram(pkt.payload))

    clients = []
    for uid in range(cfg.n_users):
        c_conn = Connection(
            engine, cfg.transport, cfg.cc, tconf, ue(uid), SERVER,
            None, run_seed, ("client", uid), trace_cc=trace_cc,
        )
        s_conn = Connection(
            engine, cfg.transport, cfg.cc, tconf, SERVER, ue(uid),
            None, run_seed, ("server", uid), trace_cc=trace_cc,
        )
        c_conn.pair(s_conn)
        c_conn.send_packet = (
            lambda size, frame, uid=uid:
            net.send(Packet(size, ue(uid), SERVER, frame))
        )
        s_conn.send_packet = (
            lambda size, frame, uid=uid:
            net.send(Packet(size, SERVER, ue(uid), frame))
        )
        net.attach(ue(uid), lambda pkt, c=c_conn: c.on_datagram(pkt.payload))
        server_conns[ue(uid)] = s_conn
        server.attach(s_conn)
        clients.append(DashClient(
            engine, c_conn, manifest, client_conf, uid,
            make_rng(run_seed, "user", uid),
        ))
    return engine, clients


def run_simulation(cfg, run_seed, trace_cc=False):
    """One seeded run; returns the list of SessionResult, one per user."""
    engine, clients = build_simulation(cfg, run_seed, trace_cc=trace_cc)
    engine.run_until(cfg.horizon_ns)
    for client in clients:
        if not client.ended:
            client.finish("horizon reached")
    return [client.result for client in clients]


def _run_cell_task(args):
    cfg, transport, cc, run_index, keep_logs = args
    cell_cfg = with_cell(cfg, transport, cc)
    seed = run_seed_for(cfg.base_seed, transport, cc, run_index)
    results = run_simulation(cell_cfg, seed)
    logs = [format_playback_log(r.log) for r in results] if keep_logs else None
    return (transport, cc, run_index), [compute_session(r) for r in results], logs


def run_matrix(cfg, matrix, run_count=None, workers=1, out_dir="results",
               playback_logs=False):
    """Execute run_count seeded runs per matrix cell and write the reports.

    Returns a dict scheme -> aggregate. Raises RuntimeError when a cell
    produced no successful run.
    """
    run_count = run_count or cfg.run_count
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out / "resolved_scenario.txt")

    tasks = [
        (cfg, transport, cc, r, playback_logs)
        for transport, cc in matrix
        for r in range(run_count)
    ]
    results = {}
    logs = {}
    failures = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(pool.submit(_run_cell_task, task), task)
                       for task in tasks]
            for future, task in futures:
                try:
                    key, metrics, run_logs = future.result()
                    results[key] = metrics
                    logs[key] = run_logs
                except Exception as exc:
                    failures[(task[1], task[2], task[3])] = repr(exc)
    else:
        for task in tasks:
            try:
                key, metrics, run_logs = _run_cell_task(task)
                results[key] = metrics
                logs[key] = run_logs
            except Exception as exc:  # record, keep the other cells going
                failures[(task[1], task[2], task[3])] = repr(exc)

    aggregates = {}
    for transport, cc in matrix:
        runs = [
            results[(transport, cc, r)]
            for r in range(run_count)
            if (transport, cc, r) in results
        ]
        scheme = scheme_name(transport, cc)
        if not runs:
            raise RuntimeError(
                f"cell {scheme} produced no successful runs: "
                f"{failures or 'no results'}"
            )
        write_run_csv(out / f"runs_{scheme}.csv", runs)
        aggregates[scheme] = aggregate(runs)
        if playback_logs:
            log_dir = out / f"logs_{scheme}"
            log_dir.mkdir(exist_ok=True)
            for r in range(run_count):
                for uid, text in enumerate(logs.get((transport, cc, r)) or ()):
                    (log_dir / f"run{r:03d}_user{uid}.log").write_text(text)
    write_summary(out, aggregates)
    if failures:
        with open(out / "failures.txt", "w") as fh:
            for key in sorted(failures):
                fh.write(f"{key}: {failures[key]}\n")
    return aggregates


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="simulate",
        description="Discrete-event simulation of DASH streaming over a "
                    "satellite-backhauled IAB path.",
    )
    parser.add_argument("scenario", help="scenario file (key = value lines)")
    parser.add_argument("--matrix", choices=("default", "single"),
                        default="default",
                        help="default: TCP x {BBR,NewReno,CUBIC} + "
                             "QUIC x {BBR,NewReno}; single: the scenario's "
                             "transport/cc cell only")
    parser.add_argument("--runs", type=int, default=None,
                        help="override the scenario run count")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the scenario base seed")
    parser.add_argument("--workers", type=int, default=1,
                        help="parallel worker processes")
    parser.add_argument("--out", default="results", help="output directory")
    parser.add_argument("--playback-logs", action="store_true",
                        help="also write per-run playback event logs")
    args = parser.parse_args(argv)

    try:
        cfg = parse_scenario(args.scenario)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg = ScenarioConfig(**{
            **{f: getattr(cfg, f) for f in cfg.__dataclass_fields__},
            "base_seed": args.seed,
        })
        validate_config(cfg)
    matrix = DEFAULT_MATRIX if args.matrix == "default" else ((cfg.transport, cfg.cc),)

    try:
        aggregates = run_matrix(
            cfg, matrix, run_count=args.runs, workers=args.workers,
            out_dir=args.out, playback_logs=args.playback_logs,
        )
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for scheme in sorted(aggregates):
        agg = aggregates[scheme]
        print(
            f"{scheme}: playback={agg['median_playback_duration_s']:.2f}s "
            f"interruption={agg['median_interruption_duration_s']:.2f}s "
            f"stalls={agg['mean_total_stalls']:.1f} "
            f"latency={agg['median_latency_ms']:.2f}ms"
        )
    print(f"reports written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
