"""Command-line entry points: echo, kv, benchmarks, pub/sub demo.

Flags may also come from a plain-text config file of ``key=value`` lines
(``--config``); explicit flags win.  ``CHUNNEL_LOG`` controls verbosity.
"""

from __future__ import annotations

import argparse
import statistics
import sys
import threading
import time

from ..chunnels import Record
from ..control import FrameChannel
from ..errors import ChunnelError, NegotiationRejected, NoCompatibleStack
from ..negotiation import Listener, client_negotiate
from ..transport import Endpoint, SimNet, SimNetConfig, UdpNet
from .apps import (
    EchoServer,
    accept_loop,
    echo_handler,
    preset_spec,
    run_echo_pair,
    run_kv_workload,
    run_pubsub_demo,
    serve_thread,
    stack_preset,
)
from .benches import (
    bench_overhead,
    bench_reconfig,
    overhead_ratios,
    steady_state_median_us,
    transient_median_us,
)
from .metrics import LatencyReport, write_throughput_csv
from .workload import WorkloadConfig

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NO_COMPATIBLE_STACK = 2


def _parse_endpoint(text: str) -> Endpoint:
    host, _, port = text.rpartition(":")
    return Endpoint(host or "127.0.0.1", int(port))


def _load_config(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser):
    """Config-file values fill in any argument still at its default."""
    if not getattr(args, "config", None):
        return args
    file_values = _load_config(args.config)
    defaults = {a.dest: a.default for a in parser._actions}
    for key, raw in file_values.items():
        if not hasattr(args, key):
            continue
        if getattr(args, key) != defaults.get(key):
            continue  # explicit flag wins
        current = defaults.get(key)
        if isinstance(current, bool):
            value = raw.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            value = int(raw)
        elif isinstance(current, float):
            value = float(raw)
        else:
            value = raw
        setattr(args, key, value)
    return args


def _write_csv(path: str, writer_fn):
    if path == "-":
        writer_fn(sys.stdout)
    else:
        with open(path, "w", newline="") as fh:
            writer_fn(fh)


# --- echo ---------------------------------------------------------------------------


def cmd_echo(args) -> int:
    if args.role == "pair":
        result = run_echo_pair(
            stack=args.stack,
            count=args.count,
            msg_size=args.msg_size,
            trigger_after=args.trigger_reconfigure_after,
            mechanism=args.mechanism,
            seed=args.seed,
        )
        report = LatencyReport.from_samples(
            [(i * 0.001, lat) for i, lat in enumerate(result["latencies"])]
        )
        if args.csv_out:
            _write_csv(args.csv_out, report.to_csv)
        print(f"echoed {result['echoed']} messages")
        if result["regimes"]:
            print("implementation regimes:", result["regimes"])
        return EXIT_OK

    net = UdpNet()
    addr = _parse_endpoint(args.addr)
    if args.role == "server":
        channel = FrameChannel(net.bind(addr))
        listener = Listener(channel, preset_spec(args.stack), mechanism=args.mechanism)
        server = EchoServer(listener, args.mechanism, args.trigger_reconfigure_after)
        stops = []

        def on_conn(conn, _neg):
            stops.append(serve_thread(conn, server.handler))

        accept_loop(listener, on_conn)
        print(f"echo server on {addr} (stack={args.stack}); ctrl-c to stop")
        try:
            while True:
                time.sleep(0.5)
        except KeyboardInterrupt:
            return EXIT_OK

    channel = FrameChannel(net.bind(Endpoint(addr.host, 0)))
    trace: list = []
    try:
        conn, negotiated = client_negotiate(
            channel,
            preset_spec(args.stack, trace),
            addr,
            timeout=args.timeout,
        )
    except (NegotiationRejected, NoCompatibleStack) as exc:
        print(f"no compatible stack: {exc}", file=sys.stderr)
        return EXIT_NO_COMPATIBLE_STACK
    samples = []
    slots = [None] * 8
    pad = b"x" * max(args.msg_size - 4, 0)
    t_start = time.perf_counter()
    for i in range(args.count):
        msg = i.to_bytes(4, "big") + pad
        t0 = time.perf_counter()
        conn.send([(addr, msg)])
        reply = None
        while reply is None:
            got = conn.recv(slots, timeout=args.timeout)
            if not got:
                print(f"echo timed out at {i}", file=sys.stderr)
                return EXIT_ERROR
            for j in range(got):
                if slots[j][1] == msg:
                    reply = slots[j]
        samples.append((t0 - t_start, time.perf_counter() - t0))
    report = LatencyReport.from_samples(samples)
    if args.csv_out:
        _write_csv(args.csv_out, report.to_csv)
    print(f"echoed {args.count} messages, median {report.overall_p50_us:.1f} us")
    return EXIT_OK


# --- kv -----------------------------------------------------------------------------


def cmd_kv(args) -> int:
    cfg = WorkloadConfig(
        rate=args.rate,
        read_fraction=args.read_fraction,
        key_count=args.keys,
        value_size=args.msg_size,
        request_count=args.count,
        seed=args.seed,
    )
    modes = ["client", "server"] if args.shard_mode == "both" else [args.shard_mode]
    reports = {}
    for mode in modes:
        result = run_kv_workload(
            mode, cfg, n_shards=args.shards, load_puts=args.load_puts
        )
        if result["failures"]:
            print(f"{result['failures']} stale reads", file=sys.stderr)
            return EXIT_ERROR
        report = LatencyReport.from_samples(result["samples"])
        reports[mode] = report
        print(
            f"{mode}-side sharding: {len(result['samples'])} requests, "
            f"median {report.overall_p50_us:.1f} us (virtual), "
            f"relayed {result['relayed']}"
        )
    if args.csv_out:
        mode, report = next(iter(reports.items()))
        _write_csv(args.csv_out, report.to_csv)
    if len(reports) == 2:
        c = reports["client"].overall_p50_us
        s = reports["server"].overall_p50_us
        print(f"client-side median {c:.1f} us <= server-side median {s:.1f} us: {c <= s}")
    return EXIT_OK


# --- benchmarks -----------------------------------------------------------------------


def cmd_bench_overhead(args) -> int:
    counts = tuple(range(0, args.chunnels + 1))
    sizes = tuple(int(s) for s in args.msg_size.split(","))
    rows = bench_overhead(
        chunnel_counts=counts,
        msg_sizes=sizes,
        trials=args.trials,
        msgs_per_trial=args.count,
    )
    if args.csv_out:
        _write_csv(args.csv_out, lambda fh: write_throughput_csv(fh, rows))
    for k, size, mps, gbps in rows:
        print(f"{k} chunnels @ {size}B: {mps:,.0f} msg/s, {gbps:.3f} Gbit/s")
    for size, per_k in overhead_ratios(rows).items():
        worst = max(per_k.items(), key=lambda kv: kv[1])
        print(f"@{size}B worst degradation: {worst[1]:.1%} ({worst[0]} chunnels)")
    return EXIT_OK


def cmd_bench_reconfig(args) -> int:
    result = bench_reconfig(
        mechanism=args.mechanism,
        n_threads=args.threads,
        n_requests=args.count,
        n_swaps=args.swaps,
        msg_size=args.msg_size,
        seed=args.seed,
    )
    report = LatencyReport.from_samples(result["samples"])
    if args.csv_out:
        _write_csv(args.csv_out, report.to_csv)
    print(
        f"{args.mechanism}: steady median {steady_state_median_us(result):.1f} us, "
        f"post-swap transient median {transient_median_us(result):.1f} us, "
        f"{len(result['swap_points'])} swap(s)"
    )
    recv_tags = [t for d, t in result["tags"] if d == "recv"]
    switches = sum(1 for a, b in zip(recv_tags, recv_tags[1:]) if a != b)
    print(f"implementation switches observed on the wire: {switches}")
    return EXIT_OK


# --- pub/sub demo -----------------------------------------------------------------------


def cmd_pubsub_demo(args) -> int:
    log = run_pubsub_demo(
        seed=args.seed,
        messages=(args.count // 2, args.count - args.count // 2),
        interarrival=args.interarrival,
        groups=args.groups,
        second_receiver=args.receivers >= 2,
    )
    print(f"sent {log['sent']} messages; events: {log['events']}")
    print(
        f"r1 delivered {len(log['r1'])} (order violations: {len(log['r1_order_violations'])})"
    )
    if log["r2"]:
        print(
            f"r2 delivered {len(log['r2'])} "
            f"(order violations: {len(log.get('r2_order_violations', []))}, "
            f"duplicates: {log.get('r2_duplicates', 0)})"
        )
        print(
            f"messages processed on the original stack after the join: "
            f"{log['old_epoch_after_join']}"
        )
    print(f"epoch history: {log['epochs']}")
    ok = (
        not log["r1_order_violations"]
        and not log.get("r2_order_violations")
        and not log.get("r2_duplicates", 0)
        and log["fingerprints_equal"]
    )
    if not ok:
        print("ordering or agreement violated", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


# --- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chunnel", description="chunnel demos and benchmarks"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None, help="key=value defaults file")
        p.add_argument("--csv-out", default=None, help="CSV path or - for stdout")

    p = sub.add_parser("echo", help="request/response echo")
    common(p)
    p.add_argument("--role", choices=["pair", "server", "client"], default="pair")
    p.add_argument("--addr", default="127.0.0.1:9000")
    p.add_argument("--stack", default="tagged")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--msg-size", type=int, default=64)
    p.add_argument("--mechanism", choices=["locked", "barrier"], default="locked")
    p.add_argument("--trigger-reconfigure-after", type=int, default=0)
    p.add_argument("--timeout", type=float, default=5.0)
    p.set_defaults(fn=cmd_echo)

    p = sub.add_parser("kv", help="sharded key-value workload")
    common(p)
    p.add_argument("--shard-mode", choices=["client", "server", "both"], default="both")
    p.add_argument("--shards", type=int, default=4)
    p.add_argument("--rate", type=float, default=2000.0)
    p.add_argument("--count", type=int, default=2000)
    p.add_argument("--keys", type=int, default=1000)
    p.add_argument("--msg-size", type=int, default=132)
    p.add_argument("--read-fraction", type=float, default=0.95)
    p.add_argument("--load-puts", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=cmd_kv)

    p = sub.add_parser("bench-overhead", help="no-op chunnel throughput cost")
    common(p)
    p.add_argument("--chunnels", type=int, default=5)
    p.add_argument("--msg-size", default="64,128,512,1460")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--count", type=int, default=20000, help="messages per trial")
    p.set_defaults(fn=cmd_bench_overhead)

    p = sub.add_parser("bench-reconfig", help="swap latency for both mechanisms")
    common(p)
    p.add_argument("--mechanism", choices=["locked", "barrier"], default="locked")
    p.add_argument("--threads", type=int, default=8)
    p.add_argument("--count", type=int, default=4000)
    p.add_argument("--swaps", type=int, default=1)
    p.add_argument("--msg-size", type=int, default=64)
    p.set_defaults(fn=cmd_bench_reconfig)

    p = sub.add_parser("pubsub-demo", help="ordering transition demo")
    common(p)
    p.add_argument("--receivers", type=int, choices=[1, 2], default=2)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--interarrival", type=float, default=0.025)
    p.add_argument("--groups", type=int, default=5)
    p.set_defaults(fn=cmd_pubsub_demo)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args = _apply_config(args, parser)
    try:
        return args.fn(args)
    except ChunnelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, (NegotiationRejected, NoCompatibleStack)):
            return EXIT_NO_COMPATIBLE_STACK
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
