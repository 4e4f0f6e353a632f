"""Echo, sharded key-value, and pub/sub demo applications.

Request/response convention for the KV app (inside Records): a request's
value is one op byte (0 get, 1 put) followed by the put payload; the
response value is one status byte (1 hit/stored, 0 miss) followed by the
stored bytes.  The request id rides in the record's group field and is
echoed back for matching.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field

from ..chunnels import (
    NoopChunnel,
    OrderingChunnel,
    Record,
    ReliabilityChunnel,
    SerializeChunnel,
    ShardChunnel,
    ShardMap,
    TagChunnel,
)
from ..control import FrameChannel
from ..core import SelectNode, make_stack
from ..errors import ConnectionClosed
from ..negotiation import Listener, build_offer, client_negotiate
from ..rendezvous import InMemoryKvStore, join_party
from ..transport import Endpoint, SimNet, SimNetConfig, TopicBus
from ..wire import capability_map

log = logging.getLogger("chunnel.harness")

OP_GET = 0
OP_PUT = 1


# --- named stack presets (the CLI's --stack values) -------------------------------


def stack_preset(name: str, trace=None):
    """Overlay layer lists for negotiated connections, by preset name."""
    presets = {
        "noop": lambda: [NoopChunnel()],
        "tagged": lambda: [SelectNode([TagChunnel(1, trace)], [TagChunnel(2, trace)])],
        "tagged-reliable": lambda: [
            ReliabilityChunnel(),
            SelectNode([TagChunnel(1, trace)], [TagChunnel(2, trace)]),
        ],
        "serialize-a": lambda: [SerializeChunnel("fmtA")],
        "serialize-b": lambda: [SerializeChunnel("fmtB")],
        "serialize-select": lambda: [
            SelectNode([SerializeChunnel("fmtA")], [SerializeChunnel("fmtB")])
        ],
    }
    if name not in presets:
        raise ValueError(f"unknown stack preset {name!r}: {sorted(presets)}")
    return presets[name]()


def preset_spec(name: str, trace=None):
    return make_stack(stack_preset(name, trace), bottom="bytes")


# --- serving helpers -----------------------------------------------------------------


def serve_hook(conn, handler):
    """Serve a connection inline on the net driver thread (virtual mode).

    The handler is invoked with (conn, batch) each time frames reach this
    connection's inbound queue during clock pumping.
    """
    draining = []

    def drain():
        if draining:  # re-entrancy guard; a handler's send can loop back
            return
        draining.append(1)
        try:
            slots = [None] * 32
            while True:
                got = conn.recv(slots, timeout=0)
                if not got:
                    return
                handler(conn, [slots[i] for i in range(got)])
        finally:
            draining.clear()

    conn.adapter._queue.on_put = drain
    drain()


def serve_thread(conn, handler, stop_event=None):
    """Serve a connection from a dedicated thread (real-transport mode)."""
    stop = stop_event or threading.Event()

    def loop():
        slots = [None] * 32
        while not stop.is_set():
            try:
                got = conn.recv(slots, timeout=0.05)
            except ConnectionClosed:
                return
            except Exception:
                if stop.is_set():
                    return
                raise
            if got:
                handler(conn, [slots[i] for i in range(got)])

    t = threading.Thread(target=loop, daemon=True)
    t.start()
    return stop, t


def accept_loop(listener: Listener, on_connection, stop_event=None):
    """Accept negotiated connections until stopped (real-transport mode)."""
    stop = stop_event or threading.Event()

    def loop():
        while not stop.is_set():
            got = listener.accept(timeout=0.1)
            if got is not None:
                on_connection(*got)

    t = threading.Thread(target=loop, daemon=True)
    t.start()
    return stop, t


# --- echo ------------------------------------------------------------------------------


def echo_handler(conn, batch):
    conn.send([(addr, payload) for addr, payload in batch])


@dataclass
class EchoServer:
    """Echoes every message back; can swap its select after N messages."""

    listener: Listener
    mechanism: str = "locked"
    trigger_after: int = 0
    received: int = 0
    swapped: bool = False
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def handler(self, conn, batch):
        fire = False
        with self._lock:
            self.received += len(batch)
            if (
                self.trigger_after
                and not self.swapped
                and self.received >= self.trigger_after
            ):
                self.swapped = True
                fire = True
        conn.send(batch)
        if fire:
            from ..reconfig import (
                ReconfigHandle,
                reconfigure_unilateral_barrier,
                reconfigure_unilateral_locked,
            )

            handle = ReconfigHandle(conn)
            if handle.selects():
                swap = (
                    reconfigure_unilateral_locked
                    if self.mechanism == "locked"
                    else reconfigure_unilateral_barrier
                )
                sel = handle.selects()[0]
                swap(handle, 1 - sel.branch_index, select_index=sel.node.preorder_index)
                log.info("echo server swapped select after %d messages", self.received)


def run_echo_pair(
    stack: str = "tagged",
    count: int = 100,
    msg_size: int = 64,
    trigger_after: int = 0,
    mechanism: str = "locked",
    seed: int = 0,
):
    """Client+server echo over an in-memory net; returns a result dict.

    Runs single-threaded on the virtual driver, so results are
    deterministic for a given seed.
    """
    net = SimNet(SimNetConfig(seed=seed))
    server_chan = FrameChannel(net.bind(Endpoint("echo", 1)))
    client_chan = FrameChannel(net.bind(Endpoint("echo", 2)))
    recv_tags: list = []
    listener = Listener(server_chan, preset_spec(stack), mechanism=mechanism)
    server = EchoServer(listener, mechanism, trigger_after)
    conn, negotiated = client_negotiate(
        client_chan, preset_spec(stack, trace=recv_tags), Endpoint("echo", 1)
    )
    pair = listener.accept(timeout=5)
    if pair is None:
        raise ConnectionClosed("server never accepted")
    sconn, _ = pair
    serve_hook(sconn, server.handler)

    latencies = []
    slots = [None] * 8
    payload_pad = b"x" * max(msg_size - 4, 0)
    for i in range(count):
        msg = i.to_bytes(4, "big") + payload_pad
        t0 = time.perf_counter()
        conn.send([(Endpoint("echo", 1), msg)])
        got = conn.recv(slots, timeout=5)
        latencies.append(time.perf_counter() - t0)
        if not got or slots[0][1] != msg:
            raise AssertionError(f"echo mismatch at message {i}")
    regimes = []
    for direction, tag in recv_tags:
        if direction != "recv":
            continue
        if not regimes or regimes[-1][0] != tag:
            regimes.append([tag, 0])
        regimes[-1][1] += 1
    return {
        "echoed": count,
        "negotiated": negotiated,
        "regimes": [tuple(r) for r in regimes],
        "latencies": latencies,
        "server_received": server.received,
    }


# --- sharded key-value store --------------------------------------------------------


class KvShard:
    """One shard: an in-memory keyed byte store behind a listener."""

    def __init__(self, listener: Listener):
        self.listener = listener
        self.data: dict = {}
        self.requests_served = 0

    def handler(self, conn, batch):
        replies = []
        for addr, rec in batch:
            op = rec.value[0] if rec.value else OP_GET
            if op == OP_PUT:
                self.data[rec.key] = rec.value[1:]
                replies.append(
                    (addr, Record(rec.key, b"\x01", group=rec.group, seq=rec.seq))
                )
            else:
                stored = self.data.get(rec.key)
                status = b"\x01" if stored is not None else b"\x00"
                replies.append(
                    (
                        addr,
                        Record(
                            rec.key, status + (stored or b""), group=rec.group, seq=rec.seq
                        ),
                    )
                )
            self.requests_served += 1
        conn.send(replies)


class KvRelay:
    """Canonical-endpoint forwarder for server-side sharding.

    Forwards each request to the shard chosen by the shared hash (after a
    configurable forwarding penalty) and routes the reply back to the
    original requester.
    """

    def __init__(self, shard_conns: dict, clock, penalty: float = 10e-6):
        self.shard_conns = shard_conns  # shard endpoint -> negotiated conn
        self.clock = clock
        self.penalty = penalty
        self.pending: dict = {}  # request id -> client addr
        self.forwarded = 0

    def client_handler(self, conn, batch):
        from ..chunnels import fnv1a64

        for addr, rec in batch:
            self.pending[(rec.group, rec.seq)] = (conn, addr)
            self.forwarded += 1
            eps = sorted(self.shard_conns)
            shard_ep = eps[fnv1a64(rec.key.encode()) % len(eps)]
            shard_conn = self.shard_conns[shard_ep]
            if self.penalty:
                self.clock.call_later(
                    self.penalty, lambda c=shard_conn, e=shard_ep, r=rec: c.send([(e, r)])
                )
            else:
                shard_conn.send([(shard_ep, rec)])

    def shard_handler(self, conn, batch):
        for _addr, rec in batch:
            route = self.pending.pop((rec.group, rec.seq), None)
            if route is None:
                continue
            client_conn, client_addr = route
            client_conn.send([(client_addr, rec)])


def kv_server_spec(shard_map: ShardMap, modes: str = "select"):
    """Server overlay: serialization plus the sharding capability."""
    if modes == "select":
        shard_layer = SelectNode(
            [ShardChunnel("client", shard_map)], [ShardChunnel("server", shard_map)]
        )
    else:
        shard_layer = ShardChunnel(modes, shard_map)
    return make_stack([shard_layer, SerializeChunnel("fmtA")], bottom="bytes")


def kv_client_spec(shard_map: ShardMap, mode: str = "client"):
    return kv_server_spec(shard_map, mode)


@dataclass
class KvCluster:
    net: SimNet
    shard_map: ShardMap
    shards: list
    relay: KvRelay
    store_spec: object
    canonical_listener: Listener

    def total_served(self):
        return sum(s.requests_served for s in self.shards)


def start_kv_cluster(
    net: SimNet, n_shards: int = 4, penalty: float = 10e-6, base_port: int = 100
) -> KvCluster:
    """Spin up shard listeners plus the canonical relay endpoint (virtual)."""
    shard_eps = tuple(Endpoint("kv", base_port + i) for i in range(1, n_shards + 1))
    canonical = Endpoint("kv", base_port)
    shard_map = ShardMap(shard_eps, canonical)
    spec = kv_server_spec(shard_map)

    shards = []
    for ep in shard_eps:
        chan = FrameChannel(net.bind(ep))
        listener = Listener(chan, kv_server_spec(shard_map))
        shard = KvShard(listener)
        listener.on_accept = lambda conn, _neg, sh=shard: serve_hook(conn, sh.handler)
        shards.append(shard)

    canonical_chan = FrameChannel(net.bind(canonical))
    canonical_listener = Listener(canonical_chan, kv_server_spec(shard_map))

    # The relay negotiates a direct connection to every shard (one
    # administrative unit; shards share the spec).
    relay_chan = FrameChannel(net.bind(Endpoint("kv", base_port + 50)))
    relay_conns = {}
    relay_spec = make_stack([SerializeChunnel("fmtA")], bottom="bytes")
    for ep in shard_eps:
        conn, _ = client_negotiate(relay_chan, relay_spec, ep)
        relay_conns[ep] = conn
    relay = KvRelay(relay_conns, net.clock, penalty)
    for ep, conn in relay_conns.items():
        serve_hook(conn, relay.shard_handler)

    return KvCluster(net, shard_map, shards, relay, spec, canonical_listener)


def kv_request(conn, peer, rec: Record, slots, timeout: float = 5.0) -> Record:
    conn.send([(peer, rec)])
    want = (rec.group, rec.seq)
    deadline_extra = 0
    while True:
        got = conn.recv(slots, timeout=timeout)
        if not got:
            raise TimeoutError(f"no reply for {rec.key} ({want})")
        for i in range(got):
            reply = slots[i][1]
            if (reply.group, reply.seq) == want:
                return reply
        deadline_extra += 1
        if deadline_extra > 64:
            raise TimeoutError("reply never matched")


def run_kv_workload(
    mode: str,
    cfg,
    n_shards: int = 4,
    penalty: float = 10e-6,
    net_delay_ms: float = 0.05,
    load_puts: int = 0,
) -> dict:
    """One client's seeded workload against a fresh cluster (virtual time).

    ``mode`` picks the sharding route: "client" bypasses the canonical
    endpoint, "server" relays through it.  Latencies are virtual seconds.
    """
    from .workload import generate, load_phase

    net = SimNet(SimNetConfig(delay_ms=net_delay_ms, seed=cfg.seed))
    cluster = start_kv_cluster(net, n_shards=n_shards, penalty=penalty)

    client_chan = FrameChannel(net.bind(Endpoint("kv", 900)))
    spec = kv_client_spec(cluster.shard_map, mode)
    peer = cluster.shard_map.canonical
    conn, negotiated = client_negotiate(client_chan, spec, peer)
    got = cluster.canonical_listener.accept(timeout=5)
    if got is None:
        raise ConnectionClosed("canonical endpoint never accepted")
    server_conn, _ = got
    serve_hook(server_conn, cluster.relay.client_handler)

    slots = [None] * 16
    reqid = 0

    def issue(rec: Record) -> Record:
        return kv_request(conn, peer, rec, slots)

    for req in load_phase(cfg, load_puts):
        reqid += 1
        issue(Record(req.key, bytes([OP_PUT]) + req.value, group=reqid & 0xFFFFFFFF, seq=reqid))

    samples = []
    failures = 0
    values: dict = {}
    for req in generate(cfg):
        reqid += 1
        net.run_until(max(net.now(), req.at))
        t0 = net.now()
        if req.op == "put":
            rec = Record(req.key, bytes([OP_PUT]) + req.value, group=reqid & 0xFFFFFFFF, seq=reqid)
            reply = issue(rec)
            values[req.key] = req.value
        else:
            rec = Record(req.key, bytes([OP_GET]), group=reqid & 0xFFFFFFFF, seq=reqid)
            reply = issue(rec)
            expected = values.get(req.key)
            if expected is not None and reply.value[1:] != expected:
                failures += 1
        samples.append((t0, net.now() - t0))
    return {
        "mode": mode,
        "negotiated": negotiated,
        "samples": samples,
        "failures": failures,
        "served": cluster.total_served(),
        "relayed": cluster.relay.forwarded,
    }


# --- pub/sub demo --------------------------------------------------------------------


def pubsub_spec(active_receivers: int = 1):
    return make_stack(
        [
            SelectNode(
                [OrderingChunnel("recv-side", active_receivers=active_receivers)],
                [OrderingChunnel("provider")],
            ),
            SerializeChunnel("fmtA"),
        ],
        bottom="bytes",
    )


def run_pubsub_demo(
    seed: int = 0,
    messages: tuple = (100, 100),
    interarrival: float = 0.025,
    groups: int = 5,
    second_receiver: bool = True,
    pre_commit_sends: int = 3,
) -> dict:
    """The two-receiver ordering-transition scenario on virtual time.

    Sends the first batch with one receiver on receive-side ordering,
    starts a second receiver, transitions to provider ordering via 2PC,
    and sends the second batch.  Returns an event log with per-receiver
    deliveries (group, seq, epoch-at-delivery) and the epoch history.
    """
    net = SimNet(SimNetConfig(delay_ms=0.5, jitter_ms=0.4, seed=seed))
    bus = TopicBus(net)
    store = InMemoryKvStore()
    topic = "demo/topic"

    sender, _ = join_party(bus, store, topic, Endpoint("ps", 1), pubsub_spec())
    r1, o1 = join_party(bus, store, topic, Endpoint("ps", 2), pubsub_spec())

    deliveries = {"r1": [], "r2": []}
    events = [("join", "sender"), ("join", "r1", o1.kind)]

    def collector(name, party):
        def handler(_conn, batch):
            for _addr, rec in batch:
                deliveries[name].append((rec.group, rec.seq, party.epoch, net.now()))

        serve_hook(party.conn, handler)

    collector("r1", r1)

    seqs = {g: 0 for g in range(groups)}

    def publish(i):
        g = i % groups
        seqs[g] += 1
        rec = Record(f"g{g}", f"m{i}".encode(), group=g, seq=seqs[g])
        sender.send([(None, rec)])

    sent = 0
    for i in range(messages[0]):
        net.run_until(net.now() + interarrival)
        publish(sent)
        sent += 1

    r2 = None
    if second_receiver:
        r2, o2 = join_party(bus, store, topic, Endpoint("ps", 3), pubsub_spec())
        events.append(("join", "r2", o2.kind))
        collector("r2", r2)
        # A few messages depart before the transition commits; they are
        # processed by the original stack.
        for _ in range(min(pre_commit_sends, messages[1])):
            net.run_until(net.now() + interarrival)
            publish(sent)
            sent += 1
        target = capability_map(build_offer(pubsub_spec())[1].entries)
        result = r2.propose_transition(target, timeout=5)
        events.append(("transition", result, r2.epoch))

    while sent < sum(messages):
        net.run_until(net.now() + interarrival)
        publish(sent)
        sent += 1
    net.run_until(net.now() + 1.0)

    def check_order(rows):
        seen = {}
        violations = []
        for g, s, _e, _t in rows:
            if s != seen.get(g, 0) + 1:
                violations.append((g, seen.get(g, 0), s))
            seen[g] = s
        return violations

    log_out = {
        "sent": sent,
        "events": events,
        "r1": deliveries["r1"],
        "r2": deliveries["r2"],
        "r1_order_violations": check_order(deliveries["r1"]),
        "epochs": {
            "sender": sender.epoch_log,
            "r1": r1.epoch_log,
            "r2": r2.epoch_log if r2 else None,
        },
        "old_epoch_after_join": 0,
        "fingerprints_equal": True,
    }
    if r2 is not None:
        post_join_old = [row for row in deliveries["r2"] if row[2] == 1]
        log_out["old_epoch_after_join"] = len(post_join_old)
        log_out["fingerprints_equal"] = (
            sender.fingerprint == r1.fingerprint == r2.fingerprint
        )
        r2_unique = {(g, s) for g, s, _e, _t in deliveries["r2"]}
        log_out["r2_duplicates"] = len(deliveries["r2"]) - len(r2_unique)
        r2_rows = deliveries["r2"]
        seen = {}
        v2 = []
        for g, s, _e, _t in r2_rows:
            prev = seen.get(g)
            if prev is not None and s <= prev:
                v2.append((g, prev, s))
            seen[g] = s
        log_out["r2_order_violations"] = v2
    return log_out
