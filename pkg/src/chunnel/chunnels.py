"""Library of concrete chunnels.

Wire layouts (bit-exact, see the protocol guide in the README):

    fmtA record encoding:
        key length   2 bytes | key (UTF-8)
        value length 4 bytes | value
        presence     1 byte (0 or 1)
        [group 4 bytes | group seq 8 bytes]   when presence == 1

    fmtB record encoding (deliberately incompatible: value before key):
        value length 4 bytes | value
        key length   2 bytes | key (UTF-8)
        presence     1 byte (0 or 1)
        [group 4 bytes | group seq 8 bytes]

    reliability framing (inside best-effort DATA payloads):
        kind 1 byte: 0 = data (seq 8 bytes | payload),
                     1 = ack  (cumulative 8 bytes | count 1 byte | seqs...)

    tag framing: one prepended byte per tag layer (the implementation id).
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass
from itertools import islice
from operator import itemgetter
from typing import Optional

from .core import (
    CapabilityDescriptor,
    Chunnel,
    Connection,
    TransformConnection,
)
from .errors import DecodeError, EmptyKey, PeerUnreachable

MAX_KEY = 64 * 1024
MAX_VALUE = 60 * 1024

_second = itemgetter(1)


@dataclass(frozen=True)
class Record:
    """Keyed message with an optional ordering group and group sequence."""

    key: str
    value: bytes = b""
    group: Optional[int] = None
    seq: Optional[int] = None

    def __post_init__(self):
        if (self.group is None) != (self.seq is None):
            raise ValueError("group and seq must be set together")


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit; the reference sharding hash."""
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def find_clock(conn):
    """Locate the timer clock serving a datapath (virtual or system)."""
    obj = conn
    seen = 0
    while obj is not None and seen < 64:
        net = getattr(obj, "net", None)
        if net is not None and hasattr(net, "clock"):
            return net.clock
        chan = getattr(obj, "channel", None)
        if chan is not None:
            return chan.clock
        bus = getattr(obj, "bus", None)
        if bus is not None:
            return bus.net.clock
        obj = getattr(obj, "inner", None) or getattr(obj, "_active", None)
        seen += 1
    from .transport import SYSTEM_CLOCK

    return SYSTEM_CLOCK


# --- no-op ------------------------------------------------------------------


class _NoopConnection(Connection):
    """Identity datapath that still reads every payload it forwards."""

    def __init__(self, inner):
        self.inner = inner
        self.data_type = inner.data_type
        self._probe = 0

    def send(self, msgs):
        try:
            self._probe = sum(map(len, map(_second, msgs)))
        except TypeError:
            self._probe = len(msgs)
        self.inner.send(msgs)

    def recv(self, slots, timeout=None):
        got = self.inner.recv(slots, timeout)
        if got:
            try:
                self._probe = sum(map(len, map(_second, islice(slots, got))))
            except TypeError:
                self._probe = got
        return got

    def wait_readable(self, timeout=None):
        return self.inner.wait_readable(timeout)

    def close(self):
        self.inner.close()

    @property
    def local_endpoint(self):
        return self.inner.local_endpoint

    def _children(self):
        return [self.inner]


class NoopChunnel(Chunnel):
    """Identity transform; payloads pass through untouched but not unread."""

    def connect_wrap(self, inner):
        return _NoopConnection(inner)


# --- implementation tag -------------------------------------------------------


class _TagConnection(TransformConnection):
    def __init__(self, inner, tag_id, trace):
        super().__init__(inner)
        self.tag_id = tag_id
        self.trace = trace
        self._prefix = bytes([tag_id])

    def transform_send(self, addr, payload):
        if self.trace is not None:
            self.trace.append(("send", self.tag_id))
        yield addr, self._prefix + payload

    def transform_recv(self, addr, payload):
        if not payload:
            raise DecodeError("tag layer: empty payload")
        if self.trace is not None:
            self.trace.append(("recv", payload[0]))
        yield addr, payload[1:]


class TagChunnel(Chunnel):
    """Stamps every outgoing payload with a 1-byte implementation id.

    The receive side strips (and optionally records) one tag byte, so the
    wire carries the exact set of tag layers that processed each message.
    Used by reconfiguration trace tests to detect mixed-stack processing.
    """

    input_type = "bytes"
    output_type = "bytes"

    def __init__(self, tag_id: int, trace=None):
        if not 0 <= tag_id < 256:
            raise ValueError("tag id must fit one byte")
        self.tag_id = tag_id
        self.trace = trace

    def connect_wrap(self, inner):
        return _TagConnection(inner, self.tag_id, self.trace)

    def __repr__(self):
        return f"TagChunnel({self.tag_id})"


# --- serialization --------------------------------------------------------------


def _check_record(rec: Record):
    key = rec.key.encode("utf-8")
    if len(key) > MAX_KEY:
        raise ValueError(f"key of {len(key)} bytes exceeds {MAX_KEY}")
    if len(rec.value) > MAX_VALUE:
        raise ValueError(f"value of {len(rec.value)} bytes exceeds {MAX_VALUE}")
    return key


def _encode_group(rec: Record) -> bytes:
    if rec.group is None:
        return b"\x00"
    return b"\x01" + rec.group.to_bytes(4, "big") + rec.seq.to_bytes(8, "big")


def encode_fmt_a(rec: Record) -> bytes:
    key = _check_record(rec)
    return (
        len(key).to_bytes(2, "big")
        + key
        + len(rec.value).to_bytes(4, "big")
        + rec.value
        + _encode_group(rec)
    )


def encode_fmt_b(rec: Record) -> bytes:
    key = _check_record(rec)
    return (
        len(rec.value).to_bytes(4, "big")
        + rec.value
        + len(key).to_bytes(2, "big")
        + key
        + _encode_group(rec)
    )


class _RecordParser:
    def __init__(self, data: bytes, fmt: str):
        self.data = data
        self.pos = 0
        self.fmt = fmt

    def fail(self, why: str):
        raise DecodeError(f"{self.fmt}: {why}")

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            self.fail(f"truncated at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def uint(self, n: int) -> int:
        return int.from_bytes(self.take(n), "big")

    def key(self) -> str:
        raw = self.take(self.uint(2))
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            self.fail("key is not valid UTF-8")

    def value(self) -> bytes:
        n = self.uint(4)
        if n > MAX_VALUE:
            self.fail(f"value length {n} exceeds {MAX_VALUE}")
        return self.take(n)

    def group(self):
        flag = self.uint(1)
        if flag == 0:
            group = seq = None
        elif flag == 1:
            group = self.uint(4)
            seq = self.uint(8)
        else:
            self.fail(f"invalid presence flag 0x{flag:02x}")
        if self.pos != len(self.data):
            self.fail(f"{len(self.data) - self.pos} trailing bytes")
        return group, seq


def decode_fmt_a(data: bytes) -> Record:
    p = _RecordParser(data, "fmtA")
    key = p.key()
    value = p.value()
    group, seq = p.group()
    return Record(key, value, group, seq)


def decode_fmt_b(data: bytes) -> Record:
    p = _RecordParser(data, "fmtB")
    value = p.value()
    key = p.key()
    group, seq = p.group()
    return Record(key, value, group, seq)


_FORMATS = {
    "fmtA": (encode_fmt_a, decode_fmt_a),
    "fmtB": (encode_fmt_b, decode_fmt_b),
}


class _SerializeConnection(TransformConnection):
    def __init__(self, inner, fmt):
        super().__init__(inner, data_type="record")
        self._encode, self._decode = _FORMATS[fmt]

    def transform_send(self, addr, rec):
        yield addr, self._encode(rec)

    def transform_recv(self, addr, payload):
        yield addr, self._decode(payload)


class SerializeChunnel(Chunnel):
    """Record <-> bytes in one of two deliberately incompatible formats."""

    input_type = "bytes"
    output_type = "record"
    reconfig_class = "multilateral"

    def __init__(self, fmt: str):
        if fmt not in _FORMATS:
            raise ValueError(f"unknown format {fmt!r}")
        self.fmt = fmt

    def capabilities(self):
        return [CapabilityDescriptor("serialize", "exact", frozenset({self.fmt}))]

    def connect_wrap(self, inner):
        return _SerializeConnection(inner, self.fmt)

    def __repr__(self):
        return f"SerializeChunnel({self.fmt})"


# --- sharding --------------------------------------------------------------------


@dataclass(frozen=True)
class ShardMap:
    """Ordered shard endpoints plus the canonical (relay) endpoint."""

    endpoints: tuple
    canonical: object = None

    def __post_init__(self):
        if not self.endpoints:
            raise ValueError("shard map needs at least one endpoint")
        object.__setattr__(self, "endpoints", tuple(self.endpoints))

    def shard_for(self, key: str):
        idx = fnv1a64(key.encode("utf-8")) % len(self.endpoints)
        return self.endpoints[idx]


def _message_key(payload) -> str:
    if isinstance(payload, Record):
        return payload.key
    if isinstance(payload, tuple) and len(payload) == 2:
        return payload[0]
    raise EmptyKey(f"message of type {type(payload).__name__} carries no key")


class _ShardConnection(TransformConnection):
    def __init__(self, inner, mode, shard_map):
        super().__init__(inner)
        self.mode = mode
        self.map = shard_map

    def transform_send(self, addr, payload):
        if self.mode == "respond":
            # Server role: replies go straight back to the requester.
            yield addr, payload
            return
        key = _message_key(payload)
        if not key:
            raise EmptyKey("sharded traffic requires a non-empty key")
        if self.mode == "client":
            yield self.map.shard_for(key), payload
        else:
            yield self.map.canonical or addr, payload


class ShardChunnel(Chunnel):
    """Routes keyed messages to shards, either at the sender or via a relay.

    Client-side mode rewrites each message's destination to
    ``endpoints[fnv1a64(key) mod N]``; server-side mode targets the
    canonical endpoint, where a relay forwards by the same hash.  When
    negotiation agrees on both labels, each endpoint applies its own
    preference; the mappings coincide because the hash is shared.
    """

    reconfig_class = "multilateral"

    def __init__(self, mode: str, shard_map: ShardMap, preferred: str = "client"):
        if mode not in ("client", "server", "both", "respond"):
            raise ValueError(f"unknown shard mode {mode!r}")
        self.mode = mode
        self.map = shard_map
        self.preferred = preferred
        self._context = None

    def capabilities(self):
        if self.mode == "both":
            labels = {"client-shard", "server-shard"}
        elif self.mode == "respond":
            labels = {"client-shard", "server-shard"}
        else:
            labels = {f"{self.mode}-shard"}
        return [CapabilityDescriptor("shard", "compositional", frozenset(labels))]

    def with_agreement(self, agreed, context=None):
        if context is not None and context.role != "client":
            # Non-client endpoints never re-route; they answer requesters.
            clone = ShardChunnel("respond", self.map, self.preferred)
            clone._context = context
            return clone
        labels = agreed.get("shard", (None, frozenset()))[1]
        if "client-shard" in labels and "server-shard" in labels:
            mode = self.preferred
        elif "client-shard" in labels:
            mode = "client"
        elif "server-shard" in labels:
            mode = "server"
        else:
            mode = self.mode if self.mode != "both" else self.preferred
        clone = ShardChunnel(mode if mode != "both" else "client", self.map, self.preferred)
        clone._context = context
        return clone

    def connect_wrap(self, inner):
        if self._context is not None and self.mode == "client":
            # Client-side routing bypasses the canonical endpoint, so the
            # negotiated nonce is forwarded to every shard up front; shards
            # adopt the agreed stack without a fresh negotiation round.
            self._context.forward_nonce(self.map.endpoints)
        return _ShardConnection(inner, self.mode, self.map)

    def __repr__(self):
        return f"ShardChunnel({self.mode})"


# --- reliability (sliding-window ARQ) ----------------------------------------------

ARQ_DATA = 0
ARQ_ACK = 1


class _PeerState:
    __slots__ = (
        "next_seq",
        "inflight",
        "backlog",
        "acked",
        "expected",
        "reorder",
        "attempts",
        "last_send",
    )

    def __init__(self):
        self.next_seq = 1
        self.inflight = {}  # seq -> payload
        self.backlog = deque()
        self.acked = set()  # selectively acked, not yet cumulative
        self.expected = 1
        self.reorder = {}
        self.attempts = {}
        self.last_send = {}


class _ReliabilityConnection(TransformConnection):
    """Per-destination sliding-window ARQ with cumulative + selective ACKs."""

    def __init__(self, inner, window, rto, max_retries, clock):
        super().__init__(inner)
        self.window = window
        self.rto = rto
        self.max_retries = max_retries
        self.clock = clock
        self.peers: dict = {}
        self.retransmit_count = 0
        self.failed = None
        self._state_lock = threading.RLock()
        self._timer = clock.call_later(rto / 2, self._on_tick)
        self._detached = False

    def _peer(self, addr) -> _PeerState:
        st = self.peers.get(addr)
        if st is None:
            st = self.peers[addr] = _PeerState()
        return st

    def transform_send(self, addr, payload):
        with self._state_lock:
            if self.failed is not None:
                raise self.failed
            st = self._peer(addr)
            if len(st.inflight) >= self.window:
                st.backlog.append(payload)
                return
            seq = st.next_seq
            st.next_seq += 1
            st.inflight[seq] = payload
            st.attempts[seq] = 1
            st.last_send[seq] = self.clock.now()
        yield addr, bytes([ARQ_DATA]) + seq.to_bytes(8, "big") + payload

    def transform_recv(self, addr, payload):
        if not payload:
            raise DecodeError("reliability: empty payload")
        kind = payload[0]
        if kind == ARQ_ACK:
            yield from self._on_ack(addr, payload)
        elif kind == ARQ_DATA:
            yield from self._on_data(addr, payload)
        else:
            raise DecodeError(f"reliability: unknown kind 0x{kind:02x}")

    def _on_data(self, addr, payload):
        if len(payload) < 9:
            raise DecodeError("reliability: truncated data header")
        seq = int.from_bytes(payload[1:9], "big")
        body = payload[9:]
        out = []
        with self._state_lock:
            st = self._peer(addr)
            if seq >= st.expected and seq not in st.reorder:
                st.reorder[seq] = body
            while st.expected in st.reorder:
                out.append((addr, st.reorder.pop(st.expected)))
                st.expected += 1
            ack = self._ack_payload(st)
        self.inner.send([(addr, ack)])
        yield from out

    def _ack_payload(self, st) -> bytes:
        sel = sorted(st.reorder)[:16]
        return (
            bytes([ARQ_ACK])
            + (st.expected - 1).to_bytes(8, "big")
            + bytes([len(sel)])
            + b"".join(s.to_bytes(8, "big") for s in sel)
        )

    def _on_ack(self, addr, payload):
        if len(payload) < 10:
            raise DecodeError("reliability: truncated ack")
        cum = int.from_bytes(payload[1:9], "big")
        nsel = payload[9]
        sel = {
            int.from_bytes(payload[10 + 8 * i : 18 + 8 * i], "big")
            for i in range(nsel)
        }
        to_send = []
        with self._state_lock:
            st = self._peer(addr)
            for seq in [s for s in st.inflight if s <= cum or s in sel]:
                del st.inflight[seq]
                st.attempts.pop(seq, None)
                st.last_send.pop(seq, None)
            while st.backlog and len(st.inflight) < self.window:
                body = st.backlog.popleft()
                seq = st.next_seq
                st.next_seq += 1
                st.inflight[seq] = body
                st.attempts[seq] = 1
                st.last_send[seq] = self.clock.now()
                to_send.append(
                    (addr, bytes([ARQ_DATA]) + seq.to_bytes(8, "big") + body)
                )
        if to_send:
            self.inner.send(to_send)
        return ()

    def _on_tick(self):
        if self._detached:
            return
        self._pump_inbound()
        now = self.clock.now()
        resend = []
        with self._state_lock:
            for addr, st in self.peers.items():
                for seq, body in st.inflight.items():
                    if now - st.last_send[seq] < self.rto:
                        continue
                    if st.attempts[seq] >= self.max_retries:
                        self.failed = PeerUnreachable(
                            f"seq {seq} to {addr}: {st.attempts[seq]} attempts"
                        )
                        continue
                    st.attempts[seq] += 1
                    st.last_send[seq] = now
                    resend.append(
                        (addr, bytes([ARQ_DATA]) + seq.to_bytes(8, "big") + body)
                    )
            self.retransmit_count += len(resend)
        if resend:
            try:
                self.inner.send(resend)
            except Exception:
                pass
        self._timer = self.clock.call_later(self.rto / 2, self._on_tick)

    def _pump_inbound(self):
        """Process queued ACKs (and stash data) even if nobody is in recv.

        Without this, a one-way sender would never see acknowledgments and
        its window would fill for good.
        """
        tmp = [None] * 64
        while True:
            try:
                got = self.inner.recv(tmp, timeout=0)
            except Exception:
                return
            if not got:
                return
            with self._lock:
                for i in range(got):
                    addr, payload = tmp[i]
                    try:
                        self._ready.extend(self.transform_recv(addr, payload))
                    except DecodeError:
                        pass

    def detach(self):
        self._detached = True
        self.clock.cancel(self._timer)

    def close(self):
        self.detach()
        super().close()

    def export_state(self):
        with self._state_lock:
            peers = {}
            for addr, st in self.peers.items():
                peers[addr] = {
                    "next_seq": st.next_seq,
                    "inflight": dict(st.inflight),
                    "backlog": list(st.backlog),
                    "expected": st.expected,
                    "reorder": dict(st.reorder),
                }
            return ("arq-v1", peers)

    def import_state(self, state):
        if state is None:
            return
        kind, peers = state
        if kind != "arq-v1":
            from .errors import IncompatibleState

            raise IncompatibleState(f"cannot import {kind!r} into ARQ")
        with self._state_lock:
            for addr, snap in peers.items():
                st = self._peer(addr)
                st.next_seq = snap["next_seq"]
                st.expected = snap["expected"]
                st.reorder = dict(snap["reorder"])
                st.backlog = deque(snap["backlog"])
                now = self.clock.now()
                for seq, body in snap["inflight"].items():
                    st.inflight[seq] = body
                    st.attempts[seq] = 1
                    # Backdate so the next tick retransmits promptly.
                    st.last_send[seq] = now - self.rto


class ReliabilityChunnel(Chunnel):
    """Exactly-once, per-destination in-order delivery over best-effort data."""

    input_type = "bytes"
    output_type = "bytes"
    reconfig_class = "multilateral"

    def __init__(self, window: int = 32, rto: float = 0.1, max_retries: int = 30):
        self.window = window
        self.rto = rto
        self.max_retries = max_retries

    def capabilities(self):
        return [
            CapabilityDescriptor("reliability", "exact", frozenset({"arq-w32"}))
        ]

    def connect_wrap(self, inner):
        return _ReliabilityConnection(
            inner, self.window, self.rto, self.max_retries, find_clock(inner)
        )

    def __repr__(self):
        return f"ReliabilityChunnel(w={self.window})"


# --- ordering ----------------------------------------------------------------------


class _OrderingConnection(TransformConnection):
    """Releases records in per-group sequence order; ungrouped pass through."""

    def __init__(self, inner, mode):
        super().__init__(inner, data_type="record")
        self.mode = mode
        self.expected: dict = {}
        self.held: dict = {}

    def transform_recv(self, addr, rec):
        if rec.group is None:
            yield addr, rec
            return
        expected = self.expected.get(rec.group)
        if expected is None:
            # A group first seen mid-stream (late joiner): the first
            # arrival sets the baseline; there is no history to replay.
            expected = rec.seq
        if rec.seq < expected:
            return  # stale duplicate
        held = self.held.setdefault(rec.group, {})
        if rec.seq not in held:
            held[rec.seq] = (addr, rec)
        while expected in held:
            yield held.pop(expected)
            expected += 1
        self.expected[rec.group] = expected

    def export_state(self):
        with self._lock:
            return (
                "order-v1",
                {
                    "expected": dict(self.expected),
                    "held": {g: dict(h) for g, h in self.held.items()},
                },
            )

    def import_state(self, state):
        if state is None:
            return
        kind, snap = state
        if kind != "order-v1":
            from .errors import IncompatibleState

            raise IncompatibleState(f"cannot import {kind!r} into ordering")
        self.expected = dict(snap["expected"])
        self.held = {g: dict(h) for g, h in snap["held"].items()}


class OrderingChunnel(Chunnel):
    """Per-group in-order release, either at the receiver or by the provider.

    Receive-side ordering buffers at the receiver and is valid only with a
    single receiver; provider ordering defers to an ordered topic and the
    datapath only verifies (and bridges any handover residue).
    """

    input_type = "record"
    output_type = "record"
    reconfig_class = "multilateral"

    def __init__(self, mode: str, active_receivers: int = 1, preferred: str = "recv-side"):
        if mode not in ("recv-side", "provider", "both"):
            raise ValueError(f"unknown ordering mode {mode!r}")
        self.mode = mode
        self.active_receivers = active_receivers
        self.preferred = preferred

    def capabilities(self):
        if self.mode == "both":
            labels = {"recv-side", "provider"}
        else:
            labels = {self.mode}
        return [CapabilityDescriptor("order", "compositional", frozenset(labels))]

    def with_agreement(self, agreed, context=None):
        labels = agreed.get("order", (None, frozenset()))[1]
        if "recv-side" in labels and "provider" in labels:
            mode = self.preferred
        elif "recv-side" in labels:
            mode = "recv-side"
        elif "provider" in labels:
            mode = "provider"
        else:
            mode = self.mode if self.mode != "both" else self.preferred
        return OrderingChunnel(mode, self.active_receivers, self.preferred)

    def connect_wrap(self, inner):
        if self.mode == "recv-side" and self.active_receivers > 1:
            raise ValueError(
                "receive-side ordering is restricted to a single receiver"
            )
        return _OrderingConnection(inner, self.mode)

    def __repr__(self):
        return f"OrderingChunnel({self.mode})"
