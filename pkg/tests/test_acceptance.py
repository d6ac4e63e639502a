"""Acceptance suite: one test per criterion, tolerances pinned.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
pass lines as they complete.
"""

import random
import threading
import time
from fractions import Fraction

import pytest

from metaros import bench
from metaros.actions import GoalState, LEGAL_TRANSITIONS
from metaros.broker import BrokerConfig, broker_serve
from metaros.envelope import HEADER_SIZE, PayloadType, decode_frame, encode_frame
from metaros.executor import CfsExecutor, ScheduleEntity, SchedulerConfig, account, compute_time_slice
from metaros.metrics import compute_wire_overhead
from metaros.nodegraph import Node, TopicSpec
from metaros.reliability import QosProfile
from metaros.datalogger import LogWriter, read_log, record, replay

from conftest import random_frame, unique_inproc

MS = 1_000_000


def passed(name: str) -> None:
    print(f"[PASS] {name}", flush=True)


def wait_for(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.01)
    return predicate()


class TestAcceptance:
    def test_codec_round_trip_size_law_and_prefix_safety(self):
        """10^4 randomized frames round-trip byte-exactly; encoded size is
        46 + topic_len + payload_len; no strict prefix decodes; < 10 s."""
        started = time.monotonic()
        rng = random.Random(0xACCE9)
        for i in range(10_000):
            frame = random_frame(rng)
            data = encode_frame(frame)
            assert len(data) == HEADER_SIZE + len(frame.topic.encode("utf-8")) + len(frame.payload)
            decoded = decode_frame(data)
            assert decoded == frame
            assert encode_frame(decoded) == data
            if i % 250 == 0:
                for cut in range(len(data)):
                    try:
                        decode_frame(data[:cut])
                    except Exception:
                        continue
                    raise AssertionError(f"prefix of length {cut} decoded")
        elapsed = time.monotonic() - started
        assert elapsed < 10.0, f"codec criterion took {elapsed:.1f}s"
        passed(f"codec: 10^4 round trips, size law, prefix safety ({elapsed:.1f}s)")

    def test_wire_overhead_exact_and_monotone(self):
        """topic "chatter" + 100 B payload = exactly 153/100; overhead
        decreases toward 1 through the sweep sizes."""
        from metaros.envelope import Frame, FrameKind

        frame = Frame(FrameKind.DATA, PayloadType.BYTES, 0, 1, 0, "chatter", b"\x01" * 16, b"x" * 100)
        report = compute_wire_overhead(frame)
        # independent byte-count oracle
        oracle_total = 4 + 1 + 1 + 1 + 1 + 8 + 8 + 2 + len("chatter") + 16 + 4 + 100
        assert report.total_size == oracle_total == len(encode_frame(frame))
        assert report.overhead == Fraction(153, 100)

        previous = None
        for size in (256, 4096, 65536, 1048576):
            sweep = Frame(FrameKind.DATA, PayloadType.BYTES, 0, 1, 0, "chatter", b"\x01" * 16,
                          bytes(size))
            overhead = compute_wire_overhead(sweep).overhead
            assert overhead > 1
            if previous is not None:
                assert overhead < previous
            previous = overhead
        assert float(previous) == pytest.approx(1.0, abs=1e-4)
        passed("wire overhead: 1.53 exact, monotone to 1 over sweep")

    def test_scheduler_equation_unit_oracle(self):
        """slice(20 ms, w=2, W=4) = 10 ms exactly; charging 10 ms at
        w = 2*base adds exactly 5 ms; 10^4-step trajectories match an
        independent accumulator exactly."""
        config = SchedulerConfig(sched_period_ns=20 * MS, base_weight=1024)
        entity = ScheduleEntity(weight=2)
        assert compute_time_slice(entity, config, total_weight=4) == 10 * MS

        heavy = ScheduleEntity(weight=2 * config.base_weight)
        account(heavy, 10 * MS, config)
        assert heavy.vruntime == 5 * MS

        rng = random.Random(0x5EED)
        weights = [1, 2, 7, 512, 1024, 2048, 4096]
        entities = [ScheduleEntity(weight=w) for w in weights]
        reference = [0] * len(entities)
        for _ in range(10_000):
            i = rng.randrange(len(entities))
            runtime = rng.randrange(0, 3 * MS)
            account(entities[i], runtime, config)
            reference[i] += (config.base_weight * runtime) // weights[i]
        assert [e.vruntime for e in entities] == reference
        passed("scheduler equations: unit values and 10^4-step trajectory exact")

    def test_cfs_fairness_one_one_two(self):
        """Three always-ready entities weighted 1:1:2 over a >= 10 s run
        hold 25/25/50 CPU shares within +-5 points; every pick satisfies
        the min-vruntime invariant. Runtime <= 15 s."""
        started = time.monotonic()
        executor = CfsExecutor()
        weights = {"a": 1024, "b": 1024, "c": 2048}
        entities = {name: executor.create_entity(weight=w, name=name) for name, w in weights.items()}
        violations = []

        def on_pick(picked, ready):
            for other in ready:
                if other.id != picked.id and picked.vruntime > other.vruntime:
                    violations.append((picked.name, other.name))

        executor.on_pick = on_pick

        def work(entity):
            def run():
                end = time.perf_counter_ns() + 200_000
                while time.perf_counter_ns() < end:
                    pass
                executor.submit(entity, run)
            return run

        for entity in entities.values():
            executor.submit(entity, work(entity))
        stats = executor.spin(duration=10.0)
        total = sum(s.runtime_ns for s in stats.entities.values())
        shares = {s.name: s.runtime_ns / total for s in stats.entities.values()}
        assert abs(shares["a"] - 0.25) <= 0.05, shares
        assert abs(shares["b"] - 0.25) <= 0.05, shares
        assert abs(shares["c"] - 0.50) <= 0.05, shares
        assert violations == []
        elapsed = time.monotonic() - started
        assert elapsed <= 15.0
        passed(
            f"cfs fairness: shares {shares['a']:.3f}/{shares['b']:.3f}/{shares['c']:.3f}, "
            f"{stats.picks} picks all min-vruntime ({elapsed:.1f}s)"
        )

    def test_reliable_delivery_exactly_once_in_order(self):
        """drop 0.2 / dup 0.05 seeded, RELIABLE, 10^4 messages: exactly
        10^4 unique callback deliveries, zero duplicates, in order;
        BEST_EFFORT on the same profile lands within 3 sigma of 8000.
        Runtime <= 60 s."""
        started = time.monotonic()
        result = bench.run_reliability(count=10_000, drop=0.2, duplicate=0.05,
                                       reliable=True, seed=42, history_depth=2048)
        assert result["delivered"] == 10_000
        assert result["unique"] == 10_000
        assert result["in_order"] is True
        assert result["delivered_values"] == list(range(10_000))
        assert result["failed"] == 0

        best_effort = bench.run_reliability(count=10_000, drop=0.2, duplicate=0.05,
                                            reliable=False, seed=42, history_depth=2048)
        sigma = (10_000 * 0.2 * 0.8) ** 0.5
        assert abs(best_effort["delivered"] - 8000) <= 3 * sigma, best_effort["delivered"]
        assert best_effort["unique"] == best_effort["delivered"]  # dedup held
        elapsed = time.monotonic() - started
        assert elapsed <= 60.0, f"{elapsed:.1f}s"
        passed(
            f"reliability: 10^4/10^4 exactly-once in-order "
            f"({result['retransmissions']} retransmissions), best-effort "
            f"{best_effort['delivered']}≈8000 ({elapsed:.1f}s)"
        )

    def test_failover_broker_restart_zero_loss(self):
        """1 s broker outage under continuous reliable publishing: no
        application-visible loss; the recovered graph equals the
        pre-outage graph."""
        port = bench.free_tcp_port()
        address = f"tcp://127.0.0.1:{port}"
        broker = broker_serve(address, BrokerConfig(heartbeat_interval=0.1))
        qos = QosProfile.reliable(history_depth=512, max_retries=8)
        sub_node = Node("fail_sub", address, heartbeat_interval=0.1, rng_seed=61,
                        reconnect_backoff_base=0.02, retry_resume_delay=0.5)
        pub_node = Node("fail_pub", address, heartbeat_interval=0.1, rng_seed=60,
                        reconnect_backoff_base=0.05, retry_resume_delay=0.5)
        got = []
        sub_node.subscribe(TopicSpec("fail/data", PayloadType.INT64, qos), got.append)
        publisher = pub_node.advertise(TopicSpec("fail/data", PayloadType.INT64, qos))
        stop = sub_node.spin_in_background()

        def graph_view(node):
            info = node.graph_info(timeout=5.0)
            return (
                tuple(info["nodes"]),
                tuple((t["name"], t["type"], t["publishers"], t["subscribers"])
                      for t in info["topics"]),
                tuple(info["services"]),
            )

        graph_before = graph_view(pub_node)
        outcomes = []
        publishing = threading.Event()
        publishing.set()

        def run_publisher():
            i = 0
            while publishing.is_set():
                outcomes.append(publisher.publish(i))
                i += 1
                time.sleep(0.02)

        thread = threading.Thread(target=run_publisher, daemon=True)
        thread.start()
        try:
            time.sleep(0.5)
            broker.close()  # outage begins
            time.sleep(1.0)
            broker = broker_serve(address, BrokerConfig(heartbeat_interval=0.1))
            assert wait_for(lambda: pub_node.connected and sub_node.connected, timeout=10.0)
            time.sleep(1.5)  # let retransmissions drain
        finally:
            publishing.clear()
            thread.join(timeout=5.0)

        published = len(outcomes)
        for outcome in outcomes:
            assert outcome.wait(20.0) is True, outcome.error
        assert wait_for(lambda: len(got) == published, timeout=20.0), (len(got), published)
        assert got == list(range(published))
        assert wait_for(lambda: graph_view(pub_node) == graph_before, timeout=5.0), (
            graph_view(pub_node), graph_before,
        )
        stop()
        pub_node.close()
        sub_node.close()
        broker.close()
        passed(f"failover: {published} reliable messages across a 1s broker restart, zero loss")

    def test_services_thousand_in_flight_and_non_blocking(self):
        """1000 concurrent calls pair correctly under response reordering;
        call_async returns < 10 ms against a stalled server."""
        from metaros.services import CompletionState, token_wait
        from metaros.transport import FaultProfile, wrap_with_faults

        handle = broker_serve(unique_inproc(), BrokerConfig(heartbeat_interval=0.5))
        address = str(handle.address)
        server = Node(
            "acc_server", address, rng_seed=70,
            connection_factory=lambda conn: wrap_with_faults(
                conn, FaultProfile(delay_range_ms=(0.0, 12.0), seed=5)
            ),
        )
        client = Node("acc_client", address, rng_seed=71)
        stop_server = server.spin_in_background()
        stop_client = client.spin_in_background()
        try:
            server.create_service("add_one", PayloadType.INT64, PayloadType.INT64,
                                  lambda v: v + 1)
            tokens = [client.call_async("add_one", i, timeout=60.0) for i in range(1000)]
            for i, token in enumerate(tokens):
                assert token_wait(token, 60.0) is CompletionState.READY, token.error
                assert token.result == i + 1

            gate = threading.Event()
            server.create_service("stall", PayloadType.INT64, PayloadType.INT64,
                                  lambda v: (gate.wait(10.0), v)[1])
            t0 = time.monotonic()
            stalled = client.call_async("stall", 0, timeout=30.0)
            call_time = time.monotonic() - t0
            assert call_time < 0.010, f"call_async took {call_time * 1000:.2f}ms"
            gate.set()
            assert token_wait(stalled, 15.0) is CompletionState.READY
        finally:
            stop_server()
            stop_client()
            server.close()
            client.close()
            handle.close()
        passed(f"services: 1000 reordered calls paired, call_async {call_time * 1000:.2f}ms")

    def test_actions_state_machine_cancel_and_feedback(self):
        """Exhaustive (state, target) enumeration matches the legal table;
        cancel during ACTIVE ends CANCELED with exactly one result;
        feedback_seq strictly increasing per goal."""
        import itertools

        from metaros.actions import (
            ActionCanceled,
            GoalRecord,
            IllegalTransitionError,
        )
        from metaros.services import CompletionState

        for state, target in itertools.product(GoalState, GoalState):
            record_ = GoalRecord(b"\x01" * 16)
            record_._state = state
            if (state, target) in LEGAL_TRANSITIONS:
                assert record_.transition(target) == target
            else:
                with pytest.raises(IllegalTransitionError):
                    record_.transition(target)

        handle = broker_serve(unique_inproc(), BrokerConfig(heartbeat_interval=0.5))
        address = str(handle.address)
        server = Node("acc_act_server", address, rng_seed=72)
        client = Node("acc_act_client", address, rng_seed=73)
        stop_server = server.spin_in_background()
        stop_client = client.spin_in_background()
        try:
            started = threading.Event()

            def cancellable(gh):
                started.set()
                while True:
                    if gh.cancel_requested:
                        raise ActionCanceled("stopped")
                    gh.publish_feedback(1)
                    yield
                    time.sleep(0.001)

            server.create_action_server("task", cancellable)
            seqs = []
            goal = client.send_goal("task", 0, feedback_callback=lambda v: None)
            original_offer = goal._offer_feedback
            goal._offer_feedback = lambda frame: (seqs.append(frame.sequence), original_offer(frame))
            results = []
            original_result = goal._offer_result
            goal._offer_result = lambda frame: (results.append(frame), original_result(frame))
            assert started.wait(5.0)
            time.sleep(0.05)
            client.cancel_goal(goal, "task")
            assert goal.wait(10.0) is CompletionState.READY
            state, result = goal.result
            assert state is GoalState.CANCELED
            assert result == "stopped"
            assert len(results) == 1  # exactly one terminal result frame
            assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs)
            assert len(seqs) >= 1
        finally:
            stop_server()
            stop_client()
            server.close()
            client.close()
            handle.close()
        passed(f"actions: transition table exhaustive, cancel -> CANCELED, "
               f"{len(seqs)} feedbacks strictly increasing, one result")

    def test_latency_measurement_with_injected_delay(self):
        """In-proc transport with a fixed 5 ms injected delivery delay
        reports p50 in [5 ms, 6 ms] over 1000 samples."""
        result = bench.run_latency(transport="inproc", samples=1000, rate_hz=1500.0,
                                   delay_ms=5.0, seed=3)
        assert result["samples"] == 1000
        p50_ms = result["p50_ns"] / 1e6
        assert 5.0 <= p50_ms <= 6.0, f"p50 {p50_ms:.3f}ms"
        passed(f"latency: injected 5ms delay measured p50 {p50_ms:.3f}ms over 1000 samples")

    def test_throughput_floors_and_exact_bandwidth_identity(self):
        """In-proc >= 1e5 msg/s at 256 B; TCP loopback >= 1e4 msg/s at
        4 KiB; T_bit equals T_msg x encoded-frame-bits exactly."""
        row = bench.run_throughput_leg("inproc", 256, 3.0, QosProfile(history_depth=8192))
        assert row["msg_per_s"] >= 1e5, f"inproc 256B: {row['msg_per_s']:.0f} msg/s"
        frame_bits = row["frame_size"] * 8
        assert row["bit_per_s_exact"] == row["msg_per_s_exact"] * frame_bits  # exact rationals

        tcp_row = bench.run_throughput_leg("tcp", 4096, 3.0, QosProfile(history_depth=8192))
        assert tcp_row["msg_per_s"] >= 1e4, f"tcp 4KiB: {tcp_row['msg_per_s']:.0f} msg/s"
        assert tcp_row["bit_per_s_exact"] == tcp_row["msg_per_s_exact"] * tcp_row["frame_size"] * 8
        passed(
            f"throughput: inproc 256B {row['msg_per_s']:.0f} msg/s (>=1e5), "
            f"tcp 4KiB {tcp_row['msg_per_s']:.0f} msg/s (>=1e4), T_bit identity exact"
        )

    def test_datalogger_fidelity_and_truncation(self):
        """10^3 mixed-type messages record and replay with the exact
        payload sequence; truncated files read to the last complete record."""
        import os
        import tempfile

        handle = broker_serve(unique_inproc(), BrokerConfig(heartbeat_interval=0.5))
        address = str(handle.address)
        deep = QosProfile(history_depth=4096)
        rng = random.Random(0x10C)
        pub_node = Node("acc_log_pub", address, rng_seed=80)
        rec_node = Node("acc_log_rec", address, rng_seed=81)
        stop_rec = rec_node.spin_in_background()

        specs = {
            "mix/ints": (PayloadType.INT64, lambda: rng.randrange(-(2**40), 2**40)),
            "mix/floats": (PayloadType.FLOAT64, lambda: rng.uniform(-1e9, 1e9)),
            "mix/strs": (PayloadType.STRING_UTF8, lambda: "s" * rng.randrange(0, 40)),
            "mix/blobs": (PayloadType.BYTES, lambda: bytes(rng.randrange(256) for _ in range(rng.randrange(0, 60)))),
            "mix/flags": (PayloadType.BOOL, lambda: rng.random() < 0.5),
        }
        publishers = {
            topic: pub_node.advertise(TopicSpec(topic, ptype, deep))
            for topic, (ptype, _) in specs.items()
        }
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "mixed.mlog")
            recorder = record(rec_node, ["mix/*"], path)
            time.sleep(0.1)
            sent = []
            topics = list(specs)
            for _ in range(1000):
                topic = rng.choice(topics)
                value = specs[topic][1]()
                publishers[topic].publish(value)
                sent.append((topic, value))
            assert wait_for(lambda: recorder.frames_written == 1000, timeout=10.0)
            recorder.close()
            stop_rec()

            sink = Node("acc_log_sink", address, rng_seed=82)
            got = []
            sink.subscribe_raw("mix/*", lambda f: got.append(f), queue_depth=4096)
            stop_sink = sink.spin_in_background()
            replayer = Node("acc_log_replay", address, rng_seed=83)
            stats = replay(path, replayer, timing="fast")
            assert stats.frames == 1000
            assert wait_for(lambda: len(got) == 1000, timeout=10.0)
            from metaros.envelope import decode_typed_payload

            replayed = [(f.topic, decode_typed_payload(f.payload_type, f.payload)) for f in got]
            assert replayed == sent
            stop_sink()

            # truncation: every cut point yields the longest complete prefix
            blob = open(path, "rb").read()
            frames = list(read_log(path))
            cut_path = os.path.join(tmp, "cut.mlog")
            for cut in (9, len(blob) // 3, len(blob) - 1):
                open(cut_path, "wb").write(blob[:cut])
                loaded = list(read_log(cut_path))
                assert loaded == frames[: len(loaded)]
                assert all(a == b for a, b in zip(loaded, frames))
            sink.close()
            replayer.close()
        pub_node.close()
        rec_node.close()
        handle.close()
        passed("datalogger: 10^3 mixed-type record/replay exact, truncation safe")
