"""Command-line entry point: broker, pub/sub tools, introspection, logging,
and the benchmark harness.

The default broker address comes from the METAROS_BROKER environment
variable, falling back to tcp://127.0.0.1:7447.
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
import time
from typing import Optional

from metaros import bench as bench_mod
from metaros import datalogger
from metaros.broker import BrokerConfig, broker_serve
from metaros.envelope import PayloadType, payload_type_from_name, payload_type_name
from metaros.metrics import BENCH_CSV_COLUMNS, write_bench_csv
from metaros.nodegraph import Node, RateController, TopicSpec, default_broker_address
from metaros.reliability import QosProfile
from metaros.transport import FaultProfile


def _add_broker_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--broker", default=None,
                        help="broker address (default: $METAROS_BROKER or tcp://127.0.0.1:7447)")


def _broker_address(args) -> str:
    return args.broker if args.broker else default_broker_address()


def _synthetic_value(payload_type: PayloadType, size: int, index: int):
    if payload_type == PayloadType.BYTES:
        return bytes(size)
    if payload_type == PayloadType.INT64:
        return index
    if payload_type == PayloadType.FLOAT64:
        return float(index)
    if payload_type == PayloadType.BOOL:
        return index % 2 == 0
    if payload_type == PayloadType.STRING_UTF8:
        return f"msg-{index}"
    if payload_type == PayloadType.NULL:
        return None
    raise SystemExit(f"pub cannot synthesize payload type {payload_type.name}")


def cmd_broker(args) -> int:
    handle = broker_serve(args.listen, BrokerConfig(heartbeat_interval=args.heartbeat_interval))
    print(f"broker listening on {args.listen}", flush=True)
    stop = [False]
    signal.signal(signal.SIGINT, lambda *_: stop.__setitem__(0, True))
    signal.signal(signal.SIGTERM, lambda *_: stop.__setitem__(0, True))
    try:
        while not stop[0]:
            time.sleep(0.2)
    finally:
        handle.close()
    return 0


def cmd_pub(args) -> int:
    payload_type = payload_type_from_name(args.type)
    qos = QosProfile.reliable() if args.reliable else QosProfile()
    with Node(args.node, _broker_address(args)) as node:
        publisher = node.advertise(TopicSpec(args.topic, payload_type, qos))
        rate = RateController(1.0 / args.rate) if args.rate > 0 else None
        published = 0
        try:
            while args.count is None or published < args.count:
                value = _synthetic_value(payload_type, args.payload_size, published)
                publisher.publish(value, block=args.reliable)
                published += 1
                if rate is not None:
                    rate.sleep()
        except KeyboardInterrupt:
            pass
        print(f"published {published} messages on {args.topic}", file=sys.stderr)
    return 0


def cmd_sub(args) -> int:
    payload_type = payload_type_from_name(args.type)
    received = [0]

    def on_message(value, frame):
        received[0] += 1
        rendered = f"<{len(value)} bytes>" if isinstance(value, bytes) else repr(value)
        print(f"[{received[0]}] {frame.topic} seq={frame.sequence} {rendered}", flush=True)

    with Node(args.node, _broker_address(args)) as node:
        node.subscribe(TopicSpec(args.topic, payload_type, QosProfile()), on_message)
        try:
            node.spin(stop=lambda: args.count is not None and received[0] >= args.count)
        except KeyboardInterrupt:
            pass
    return 0


def cmd_echo(args) -> int:
    printed = [0]

    def on_frame(frame):
        printed[0] += 1
        print(
            f"[{printed[0]}] {frame.topic} kind={frame.kind.name} "
            f"type={payload_type_name(frame.payload_type)} seq={frame.sequence} "
            f"bytes={len(frame.payload)}",
            flush=True,
        )

    with Node(args.node, _broker_address(args)) as node:
        node.subscribe_raw(args.topic, on_frame)
        try:
            node.spin(stop=lambda: args.count is not None and printed[0] >= args.count)
        except KeyboardInterrupt:
            pass
    return 0


def cmd_graph(args) -> int:
    with Node(args.node, _broker_address(args)) as node:
        print(json.dumps(node.graph_info(), indent=2, sort_keys=True))
    return 0


def cmd_log_record(args) -> int:
    patterns = [p.strip() for p in args.topics.split(",") if p.strip()]
    if not patterns:
        raise SystemExit("log record needs at least one pattern in --topics")
    with Node(args.node, _broker_address(args)) as node:
        recorder = datalogger.record(node, patterns, args.output)
        print(f"recording {patterns} to {args.output}", file=sys.stderr, flush=True)
        try:
            node.spin(
                duration=args.duration,
                stop=lambda: args.count is not None and recorder.frames_written >= args.count,
            )
        except KeyboardInterrupt:
            pass
        recorder.close()
        if recorder.error is not None:
            print(f"recording stopped on error: {recorder.error}", file=sys.stderr)
            return 1
        print(f"recorded {recorder.frames_written} frames", file=sys.stderr)
    return 0


def cmd_log_replay(args) -> int:
    with Node(args.node, _broker_address(args)) as node:
        stats = datalogger.replay(args.input, node, timing="timed" if args.timed else "fast")
        time.sleep(0.2)  # let the tail drain before teardown
        print(f"replayed {stats.frames} frames over {stats.topics} topics "
              f"in {stats.duration_s:.3f}s", file=sys.stderr)
    return 0


def _emit_bench(args, rows: list[dict], comment: str) -> None:
    out_rows = [{k: row[k] for k in BENCH_CSV_COLUMNS} for row in rows]
    if args.csv:
        with open(args.csv, "w") as f:
            write_bench_csv(f, out_rows, header_comment=comment)
        print(f"wrote {args.csv}", file=sys.stderr)
    else:
        write_bench_csv(sys.stdout, out_rows, header_comment=comment)
    header = " ".join(f"{c:>14}" for c in BENCH_CSV_COLUMNS)
    print(header, file=sys.stderr)
    for row in out_rows:
        print(" ".join(f"{row[c]:>14}" for c in BENCH_CSV_COLUMNS), file=sys.stderr)


def cmd_bench_throughput(args) -> int:
    sizes = tuple(int(s) for s in args.payload_sizes.split(","))
    qos = QosProfile.reliable(history_depth=args.window) if args.reliable else QosProfile()
    scenario = bench_mod.BenchScenario(
        transport=args.transport, payload_sizes=sizes,
        duration_per_size=args.duration, qos=qos, seed=args.seed,
    )
    rows = bench_mod.run_throughput(scenario)
    _emit_bench(args, rows, f"bench=throughput {scenario.comment()}")
    return 0


def cmd_bench_latency(args) -> int:
    result = bench_mod.run_latency(
        transport=args.transport, samples=args.samples,
        payload_size=args.payload_size, rate_hz=args.rate,
        delay_ms=args.delay_ms, seed=args.seed,
    )
    row = {
        "payload_size": args.payload_size,
        "msg_per_s": args.rate,
        "bit_per_s": 0,
        "p50_latency": result["p50_ns"],
        "p99_latency": result["p99_ns"],
        "cpu_mean": 0.0,
    }
    _emit_bench(args, [row], f"bench=latency transport={args.transport} samples={args.samples} "
                             f"delay_ms={args.delay_ms} seed={args.seed}")
    print(f"samples={result['samples']} p50={result['p50_ns']/1e6:.3f}ms "
          f"p99={result['p99_ns']/1e6:.3f}ms", file=sys.stderr)
    return 0


def cmd_bench_reliability(args) -> int:
    result = bench_mod.run_reliability(
        count=args.count, drop=args.drop, duplicate=args.duplicate,
        reliable=args.reliable, seed=args.seed, transport=args.transport,
    )
    print(f"# bench=reliability drop={args.drop} dup={args.duplicate} "
          f"reliable={args.reliable} count={args.count} seed={args.seed}")
    print("published,delivered,unique,duplicates,retransmissions,failed,in_order")
    print(f"{result['published']},{result['delivered']},{result['unique']},"
          f"{result['duplicates_suppressed']},{result['retransmissions']},"
          f"{result['failed']},{result['in_order']}")
    print(
        f"delivered={result['delivered']} duplicates=0 at callback "
        f"(suppressed {result['duplicates_suppressed']}), retransmissions={result['retransmissions']}",
        file=sys.stderr,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metaros", description=__doc__)
    parser.add_argument("--node", default=f"cli_{int(time.time_ns() % 1_000_000)}",
                        help="node name used by this command")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("broker", help="run a broker")
    p.add_argument("--listen", default="tcp://0.0.0.0:7447")
    p.add_argument("--heartbeat-interval", type=float, default=0.5)
    p.set_defaults(func=cmd_broker)

    p = sub.add_parser("pub", help="publish synthetic messages")
    _add_broker_arg(p)
    p.add_argument("--topic", required=True)
    p.add_argument("--type", default="bytes")
    p.add_argument("--rate", type=float, default=10.0, help="Hz; 0 = as fast as possible")
    p.add_argument("--payload-size", type=int, default=256)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--reliable", action="store_true")
    p.set_defaults(func=cmd_pub)

    p = sub.add_parser("sub", help="subscribe and print typed values")
    _add_broker_arg(p)
    p.add_argument("--topic", required=True)
    p.add_argument("--type", default="bytes")
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=cmd_sub)

    p = sub.add_parser("echo", help="print every frame matching a pattern")
    _add_broker_arg(p)
    p.add_argument("--topic", required=True, help="topic or pattern ending in /*")
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=cmd_echo)

    p = sub.add_parser("graph", help="print the broker's node/topic/service graph")
    _add_broker_arg(p)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("log", help="record or replay frame logs")
    log_sub = p.add_subparsers(dest="log_command", required=True)
    pr = log_sub.add_parser("record")
    _add_broker_arg(pr)
    pr.add_argument("--topics", required=True, help="comma-separated patterns")
    pr.add_argument("--output", required=True)
    pr.add_argument("--count", type=int, default=None)
    pr.add_argument("--duration", type=float, default=None)
    pr.set_defaults(func=cmd_log_record)
    pp = log_sub.add_parser("replay")
    _add_broker_arg(pp)
    pp.add_argument("--input", required=True)
    pp.add_argument("--timed", action="store_true", help="reproduce recorded gaps")
    pp.set_defaults(func=cmd_log_replay)

    p = sub.add_parser("bench", help="performance benchmarks")
    bench_sub = p.add_subparsers(dest="bench_command", required=True)

    pt = bench_sub.add_parser("throughput")
    pt.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    pt.add_argument("--payload-sizes", default="256,4096,65536,1048576")
    pt.add_argument("--duration", type=float, default=10.0)
    pt.add_argument("--reliable", action="store_true")
    pt.add_argument("--window", type=int, default=2048)
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--csv", default=None)
    pt.set_defaults(func=cmd_bench_throughput)

    pl = bench_sub.add_parser("latency")
    pl.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    pl.add_argument("--samples", type=int, default=1000)
    pl.add_argument("--payload-size", type=int, default=256)
    pl.add_argument("--rate", type=float, default=1000.0)
    pl.add_argument("--delay-ms", type=float, default=0.0)
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--csv", default=None)
    pl.set_defaults(func=cmd_bench_latency)

    pr = bench_sub.add_parser("reliability")
    pr.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    pr.add_argument("--count", type=int, default=10000)
    pr.add_argument("--drop", type=float, default=0.2)
    pr.add_argument("--duplicate", type=float, default=0.05)
    pr.add_argument("--reliable", action="store_true")
    pr.add_argument("--seed", type=int, default=42)
    pr.set_defaults(func=cmd_bench_reliability)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # surfaced as exit status, not a traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
