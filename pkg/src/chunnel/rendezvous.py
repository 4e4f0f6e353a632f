"""Multi-party negotiation through a transactional key-value store.

A connection address maps to one store entry: (epoch, canonical stack
encoding, participant count).  Joining is a compare-and-swap loop: the
first joiner writes epoch 1 with its preferred stack; later joiners adopt
the stored stack (incrementing the count) when compatible, and otherwise
leave the entry untouched.  Stack transitions run 2PC over the shared
topic connection; the store records only committed outcomes, epoch-bumped
by CAS.

Two store implementations pass one conformance suite: an in-process
serializable store and a TCP service speaking get/transact requests inside
DATA frames.
"""

from __future__ import annotations

import logging
import socket as _socket
import struct
import threading
from dataclasses import dataclass
from typing import Optional

from .chunnels import fnv1a64
from .control import FrameChannel
from .errors import (
    Aborted,
    CasConflict,
    NotJoined,
    StoreUnavailable,
)
from .negotiation import (
    NegotiatedConnection,
    NegotiatedStack,
    adopts_exactly,
    build_offer,
)
from .transport import Endpoint, TopicBus
from .wire import (
    Frame,
    HEADER_LEN,
    TAG_DATA,
    capability_map,
    decode_capability_map,
    encode_capability_map,
    split_frame,
    stack_fingerprint,
)

log = logging.getLogger("chunnel.rendezvous")

TOPIC_PEER = Endpoint("*topic*", 0)


# --- stores ------------------------------------------------------------------------


class InMemoryKvStore:
    """Serializable multi-key transactions under one lock.

    Keys map to (version, value); version 0 means absent.  A transaction
    checks every expectation and applies every write atomically;
    compare-and-swap is a one-key transaction.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._data: dict = {}
        self._alive = True

    def kill(self):
        """Simulate store loss; joined participants must not care."""
        self._alive = False

    def _check(self):
        if not self._alive:
            raise StoreUnavailable("key-value store is down")

    def get(self, key: str):
        self._check()
        with self._lock:
            version, value = self._data.get(key, (0, None))
            return value, version

    def transact(self, expect: dict, writes: dict):
        """Returns (ok, current) where current snapshots the expect keys."""
        self._check()
        with self._lock:
            current = {}
            ok = True
            for key, version in expect.items():
                have_version, have_value = self._data.get(key, (0, None))
                current[key] = (have_value, have_version)
                if have_version != version:
                    ok = False
            if ok:
                for key, value in writes.items():
                    if value is None:
                        self._data.pop(key, None)
                    else:
                        version = self._data.get(key, (0, None))[0] + 1
                        self._data[key] = (version, value)
            return ok, current


# --- TCP rendezvous service ---------------------------------------------------------

_OP_GET = 0
_OP_TRANSACT = 1


def _lp(blob: bytes) -> bytes:
    return struct.pack(">H", len(blob)) + blob


class _BufReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n):
        out = self.data[self.pos : self.pos + n]
        if len(out) != n:
            raise ValueError("truncated request")
        self.pos += n
        return out

    def u8(self):
        return self.take(1)[0]

    def u16(self):
        return struct.unpack(">H", self.take(2))[0]

    def u64(self):
        return struct.unpack(">Q", self.take(8))[0]

    def lp(self):
        return self.take(self.u16())


def _encode_get(key: str) -> bytes:
    return bytes([_OP_GET]) + _lp(key.encode())


def _encode_transact(expect: dict, writes: dict) -> bytes:
    out = [bytes([_OP_TRANSACT]), struct.pack(">H", len(expect))]
    for key, version in sorted(expect.items()):
        out.append(_lp(key.encode()) + struct.pack(">Q", version))
    out.append(struct.pack(">H", len(writes)))
    for key, value in sorted(writes.items()):
        out.append(_lp(key.encode()))
        if value is None:
            out.append(b"\x00")
        else:
            out.append(b"\x01" + _lp(value))
    return b"".join(out)


class KvStoreServer:
    """Exposes a store over TCP; requests and replies ride DATA frames."""

    def __init__(self, store=None, host: str = "127.0.0.1", port: int = 0):
        self.store = store if store is not None else InMemoryKvStore()
        self._sock = _socket.socket(_socket.AF_INET, _socket.SOCK_STREAM)
        self._sock.setsockopt(_socket.SOL_SOCKET, _socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(16)
        self.endpoint = Endpoint(host, self._sock.getsockname()[1])
        self._stop = False
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._thread.start()

    def close(self):
        self._stop = True
        try:
            self._sock.close()
        except OSError:
            pass

    def _accept_loop(self):
        while not self._stop:
            try:
                client, _ = self._sock.accept()
            except OSError:
                return
            threading.Thread(
                target=self._serve_client, args=(client,), daemon=True
            ).start()

    def _serve_client(self, sock):
        from .wire import encode_frame

        buf = b""
        try:
            while not self._stop:
                chunk = sock.recv(65536)
                if not chunk:
                    return
                buf += chunk
                while len(buf) >= HEADER_LEN:
                    length = int.from_bytes(buf[18:22], "big")
                    if len(buf) < HEADER_LEN + length:
                        break
                    frame, buf = split_frame(buf)
                    reply = self._handle(frame.payload)
                    sock.sendall(
                        encode_frame(Frame(TAG_DATA, frame.connid, frame.seq, reply))
                    )
        except (OSError, ValueError):
            return
        finally:
            sock.close()

    def _handle(self, payload: bytes) -> bytes:
        r = _BufReader(payload)
        op = r.u8()
        if op == _OP_GET:
            key = r.lp().decode()
            value, version = self.store.get(key)
            if value is None:
                return bytes([_OP_GET, 0]) + struct.pack(">Q", version) + _lp(b"")
            return bytes([_OP_GET, 1]) + struct.pack(">Q", version) + _lp(value)
        if op == _OP_TRANSACT:
            expect = {}
            for _ in range(r.u16()):
                key = r.lp().decode()
                expect[key] = r.u64()
            writes = {}
            for _ in range(r.u16()):
                key = r.lp().decode()
                if r.u8():
                    writes[key] = r.lp()
                else:
                    writes[key] = None
            ok, current = self.store.transact(expect, writes)
            out = [bytes([_OP_TRANSACT, 1 if ok else 0]), struct.pack(">H", len(current))]
            for key, (value, version) in sorted(current.items()):
                out.append(_lp(key.encode()) + struct.pack(">Q", version))
                if value is None:
                    out.append(b"\x00")
                else:
                    out.append(b"\x01" + _lp(value))
            return b"".join(out)
        raise ValueError(f"unknown op {op}")


class KvStoreClient:
    """Store interface backed by the TCP rendezvous service."""

    def __init__(self, endpoint: Endpoint, timeout: float = 5.0):
        self.endpoint = endpoint
        self.timeout = timeout
        self._lock = threading.Lock()
        self._sock = None
        self._seq = 0

    def _connect(self):
        if self._sock is None:
            try:
                self._sock = _socket.create_connection(
                    (self.endpoint.host, self.endpoint.port), timeout=self.timeout
                )
            except OSError as exc:
                raise StoreUnavailable(f"{self.endpoint}: {exc}") from exc

    def close(self):
        with self._lock:
            if self._sock is not None:
                self._sock.close()
                self._sock = None

    def _roundtrip(self, payload: bytes) -> bytes:
        from .wire import encode_frame

        with self._lock:
            self._connect()
            self._seq += 1
            try:
                self._sock.sendall(encode_frame(Frame(TAG_DATA, 0, self._seq, payload)))
                buf = b""
                while True:
                    if len(buf) >= HEADER_LEN:
                        length = int.from_bytes(buf[18:22], "big")
                        if len(buf) >= HEADER_LEN + length:
                            frame, buf = split_frame(buf)
                            return frame.payload
                    chunk = self._sock.recv(65536)
                    if not chunk:
                        raise StoreUnavailable("rendezvous service hung up")
                    buf += chunk
            except OSError as exc:
                self._sock = None
                raise StoreUnavailable(f"{self.endpoint}: {exc}") from exc

    def get(self, key: str):
        resp = _BufReader(self._roundtrip(_encode_get(key)))
        op, found = resp.u8(), resp.u8()
        version = resp.u64()
        value = resp.lp()
        return (value if found else None), version

    def transact(self, expect: dict, writes: dict):
        resp = _BufReader(self._roundtrip(_encode_transact(expect, writes)))
        _op, ok = resp.u8(), resp.u8()
        current = {}
        for _ in range(resp.u16()):
            key = resp.lp().decode()
            version = resp.u64()
            if resp.u8():
                current[key] = (resp.lp(), version)
            else:
                current[key] = (None, version)
        return bool(ok), current


# --- rendezvous entries --------------------------------------------------------------


def encode_entry(epoch: int, count: int, agreed: dict) -> bytes:
    return struct.pack(">QI", epoch, count) + encode_capability_map(agreed)


def decode_entry(value: bytes):
    epoch, count = struct.unpack(">QI", value[:12])
    return epoch, count, decode_capability_map(value[12:])


@dataclass(frozen=True)
class JoinOutcome:
    kind: str  # "won" | "adopted" | "incompatible"
    choice: Optional[tuple]
    agreed: Optional[dict]
    fingerprint: Optional[bytes]
    epoch: int
    count: int

    @property
    def won(self):
        return self.kind == "won"


def _join_plan(addr: str, candidates):
    """Join as a step generator: yields store ops, returns a JoinOutcome.

    Written this way so interleaving tests can drive several joiners one
    atomic store operation at a time.
    """
    while True:
        value, version = yield ("get", addr)
        if value is None:
            first = candidates[0]
            agreed = capability_map(first.entries)
            entry = encode_entry(1, 1, agreed)
            ok, _ = yield ("transact", {addr: 0}, {addr: entry})
            if ok:
                return JoinOutcome(
                    "won", first.bits, agreed, stack_fingerprint(agreed), 1, 1
                )
            continue
        epoch, count, stored = decode_entry(value)
        choice = None
        for cand in candidates:
            if adopts_exactly(capability_map(cand.entries), stored):
                choice = cand.bits
                break
        if choice is None:
            return JoinOutcome("incompatible", None, stored, None, epoch, count)
        entry = encode_entry(epoch, count + 1, stored)
        ok, _ = yield ("transact", {addr: version}, {addr: entry})
        if ok:
            return JoinOutcome(
                "adopted", choice, stored, stack_fingerprint(stored), epoch, count + 1
            )


def drive_plan(store, plan):
    """Run a step-generator join/leave plan against a real store."""
    try:
        op = next(plan)
        while True:
            if op[0] == "get":
                result = store.get(op[1])
            else:
                result = store.transact(op[1], op[2])
            op = plan.send(result)
    except StopIteration as stop:
        return stop.value


def join(store, addr: str, spec) -> JoinOutcome:
    """Join a multi-party connection; first joiner's preference wins."""
    return drive_plan(store, _join_plan(addr, build_offer(spec)))


def leave(store, addr: str) -> None:
    """Decrement the participant count; the entry vanishes at zero."""
    while True:
        value, version = store.get(addr)
        if value is None:
            raise NotJoined(f"no rendezvous entry for {addr!r}")
        epoch, count, stored = decode_entry(value)
        if count <= 1:
            ok, _ = store.transact({addr: version}, {addr: None})
        else:
            entry = encode_entry(epoch, count - 1, stored)
            ok, _ = store.transact({addr: version}, {addr: entry})
        if ok:
            return


# --- party connections ----------------------------------------------------------------


class PartyConnection:
    """One participant's live view of a multi-party connection."""

    def __init__(self, conn: NegotiatedConnection, store, addr: str, epoch: int, base):
        self.conn = conn
        self.store = store
        self.addr = addr
        self.epoch = epoch
        self._base = base
        self.epoch_log = [epoch]
        conn.engine.on_committed.append(self._on_commit)
        conn.engine.set_resync_hook(self._resync)

    # datapath delegation
    def send(self, msgs):
        self.conn.send(msgs)

    def recv(self, slots, timeout=None):
        return self.conn.recv(slots, timeout)

    def wait_readable(self, timeout=None):
        return self.conn.wait_readable(timeout)

    @property
    def negotiated(self):
        return self.conn.negotiated

    @property
    def fingerprint(self):
        return self.conn.negotiated.fingerprint

    def _on_commit(self, pid, target, fingerprint):
        self.epoch += 1
        self.epoch_log.append(self.epoch)

    def _resync(self):
        value, _version = self.store.get(self.addr)
        if value is None:
            return
        epoch, _count, stored = decode_entry(value)
        if epoch <= self.epoch:
            return
        for cand in build_offer(self.conn.spec):
            if adopts_exactly(capability_map(cand.entries), stored):
                self.conn.adopt_stack(cand.bits, stored, stack_fingerprint(stored))
                self.epoch = epoch
                self.epoch_log.append(epoch)
                return
        log.warning("stored stack at epoch %d is no longer compatible", epoch)

    def propose_transition(self, target: dict, timeout: float = None) -> str:
        """2PC with the other participants, then CAS the store entry.

        Raises Aborted on a veto or vote timeout; raises CasConflict when a
        concurrent transition won (the caller re-reads and retries or
        adopts).
        """
        for attempt in range(8):
            value, version = self.store.get(self.addr)
            if value is None:
                raise NotJoined(f"no rendezvous entry for {self.addr!r}")
            epoch, count, _stored = decode_entry(value)
            if epoch != self.epoch:
                raise CasConflict(f"epoch moved to {epoch} (local {self.epoch})")
            try:
                self.conn.engine.propose(
                    target,
                    peers=[TOPIC_PEER],
                    expected_votes=count - 1,
                    timeout=timeout,
                )
            except Aborted as exc:
                if "busy" in str(exc.reason) and attempt < 7:
                    fresh, _v = self.store.get(self.addr)
                    if fresh is not None and decode_entry(fresh)[0] != epoch:
                        raise CasConflict("concurrent transition won") from exc
                    continue
                raise
            entry = encode_entry(epoch + 1, count, target)
            ok, _current = self.store.transact({self.addr: version}, {self.addr: entry})
            if not ok:
                raise CasConflict("store entry changed during commit")
            return "committed"
        raise CasConflict("could not win a proposal slot")

    def leave(self):
        leave(self.store, self.addr)
        self.conn.close()
        self._base.close()

    def close(self):
        self.conn.close()
        self._base.close()


def join_party(
    bus: TopicBus,
    store,
    addr: str,
    endpoint: Endpoint,
    spec,
    *,
    mechanism: str = "locked",
):
    """Join the rendezvous and, when compatible, open the topic datapath.

    Returns (PartyConnection or None, JoinOutcome).
    """
    outcome = join(store, addr, spec)
    if outcome.kind == "incompatible":
        return None, outcome
    base = bus.subscribe(addr, endpoint)
    channel = FrameChannel(base, reliable=False)
    connid = fnv1a64(addr.encode()) | 1
    negotiated = NegotiatedStack(
        outcome.choice, outcome.agreed, outcome.fingerprint, "party"
    )
    conn = NegotiatedConnection(channel, connid, TOPIC_PEER, spec, negotiated, mechanism)
    return PartyConnection(conn, store, addr, outcome.epoch, channel), outcome
