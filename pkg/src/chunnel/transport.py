"""Best-effort datagram base connections.

Two implementations of one contract: a deterministic in-memory simulated
network (SimNet) whose loss, duplication, reordering, and delay are driven
by a seeded RNG and a virtual clock, and an adapter over OS UDP sockets.
A TopicBus built on SimNet provides in-process publish/subscribe fan-out
for multi-party connections.
"""

from __future__ import annotations

import heapq
import random
import socket as _socket
import threading
import time
from collections import deque
from dataclasses import dataclass

from .core import Chunnel, Connection, fill_slots
from .errors import (
    AddressInUse,
    ConnectionClosed,
    IncompatibleState,
    PayloadTooLarge,
)

MAX_DATAGRAM = 64 * 1024


@dataclass(frozen=True, order=True)
class Endpoint:
    """Host identifier plus 16-bit port-equivalent; totally ordered."""

    host: str
    port: int

    def __str__(self):
        return f"{self.host}:{self.port}"


@dataclass(frozen=True)
class SimNetConfig:
    loss: float = 0.0
    duplicate: float = 0.0
    reorder: float = 0.0
    delay_ms: float = 0.0
    jitter_ms: float = 0.0
    reorder_extra_ms: float = 2.0
    seed: int = 0

    @property
    def needs_scheduling(self) -> bool:
        return bool(self.delay_ms or self.jitter_ms or self.reorder)


class _Mailbox:
    """Inbound datagram queue, thread-safe, with optional inline receiver."""

    def __init__(self):
        self._q = deque()
        self._cond = threading.Condition()
        self._receiver = None
        self.on_put = None  # fires after enqueue; does not consume
        self.closed = False

    def put(self, src, payload):
        with self._cond:
            if self.closed:
                return
            receiver = self._receiver
            if receiver is None:
                self._q.append((src, payload))
                self._cond.notify()
        if receiver is not None:
            receiver(src, payload)
            return
        hook = self.on_put
        if hook is not None:
            hook()

    def set_receiver(self, fn):
        with self._cond:
            backlog = list(self._q)
            self._q.clear()
            self._receiver = fn
        for src, payload in backlog:
            fn(src, payload)

    def get_batch(self, max_n: int, timeout):
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not self._q:
                if self.closed:
                    raise ConnectionClosed("connection is closed")
                if timeout == 0:
                    return []
                if deadline is None:
                    self._cond.wait()
                else:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        return []
                    self._cond.wait(remaining)
            out = []
            while self._q and len(out) < max_n:
                out.append(self._q.popleft())
            return out

    def wait_nonempty(self, timeout) -> bool:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while not self._q:
                if self.closed:
                    return True
                if deadline is None:
                    self._cond.wait()
                else:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        return False
                    self._cond.wait(remaining)
            return True

    def close(self):
        with self._cond:
            self.closed = True
            self._cond.notify_all()


class SimNet:
    """Deterministic in-memory datagram network with a virtual clock.

    With an all-zero delay/jitter/reorder config, datagrams are delivered
    synchronously at send time (thread-safe, usable as a plain in-memory
    transport).  Otherwise deliveries and timers are scheduled on the
    virtual clock, which exactly one driver thread advances via advance(),
    step(), or run_until_idle().  Same seed + same send schedule yields an
    identical, byte-exact delivery trace.
    """

    def __init__(self, config: SimNetConfig | None = None, record_trace=False):
        self.config = config or SimNetConfig()
        self._rng = random.Random(self.config.seed)
        self._lock = threading.RLock()
        self._mail: dict[Endpoint, _Mailbox] = {}
        self._heap: list = []
        self._eventseq = 0
        self._cancelled: set[int] = set()
        self._now_us = 0
        self.record_trace = record_trace
        self.trace: list = []
        self._trace_lock = threading.Lock()
        self.driver = threading.current_thread()
        self.scheduled = self.config.needs_scheduling

    # -- binding ------------------------------------------------------------

    def bind(self, addr: Endpoint) -> "SimConnection":
        with self._lock:
            if addr in self._mail:
                raise AddressInUse(f"{addr} already bound")
            mbox = _Mailbox()
            self._mail[addr] = mbox
        return SimConnection(self, addr, mbox)

    def attach(self, addr: Endpoint) -> "SimConnection":
        """Bind if free, otherwise adopt the existing mailbox.

        Adoption keeps the port and any queued datagrams, which is how a
        replacement transport implementation takes over a live binding.
        """
        with self._lock:
            mbox = self._mail.get(addr)
            if mbox is None:
                mbox = _Mailbox()
                self._mail[addr] = mbox
        return SimConnection(self, addr, mbox)

    def _unbind(self, addr: Endpoint, mbox: _Mailbox):
        with self._lock:
            if self._mail.get(addr) is mbox:
                del self._mail[addr]

    # -- datagram path --------------------------------------------------------

    def send_to(self, src: Endpoint, dst: Endpoint, payload: bytes):
        if len(payload) > MAX_DATAGRAM:
            raise PayloadTooLarge(f"{len(payload)} bytes > {MAX_DATAGRAM}")
        # One real copy per datagram: the wire buffer is not the sender's.
        payload = bytes(memoryview(payload))
        cfg = self.config
        deliveries = []
        with self._lock:
            if cfg.loss and self._rng.random() < cfg.loss:
                return
            copies = 2 if cfg.duplicate and self._rng.random() < cfg.duplicate else 1
            for _ in range(copies):
                delay_ms = cfg.delay_ms
                if cfg.jitter_ms:
                    delay_ms += self._rng.random() * cfg.jitter_ms
                if cfg.reorder and self._rng.random() < cfg.reorder:
                    delay_ms += cfg.reorder_extra_ms
                if self.scheduled:
                    due = self._now_us + int(delay_ms * 1000)
                    self._eventseq += 1
                    heapq.heappush(
                        self._heap, (due, self._eventseq, "dgram", (src, dst, payload))
                    )
                else:
                    deliveries.append((src, dst, payload))
        for src_, dst_, p in deliveries:
            self._deliver(src_, dst_, p)

    def _deliver(self, src, dst, payload):
        with self._lock:
            mbox = self._mail.get(dst)
        if mbox is None:
            return
        if self.record_trace:
            with self._trace_lock:
                self.trace.append((self._now_us, src, dst, payload))
        mbox.put(src, payload)

    # -- virtual clock ----------------------------------------------------------

    def now(self) -> float:
        return self._now_us / 1e6

    def call_at(self, when: float, fn):
        with self._lock:
            self._eventseq += 1
            handle = (max(int(when * 1e6), self._now_us), self._eventseq)
            heapq.heappush(self._heap, (handle[0], handle[1], "timer", fn))
        return handle

    def call_later(self, delay: float, fn):
        return self.call_at(self.now() + delay, fn)

    def cancel(self, handle):
        with self._lock:
            self._cancelled.add(handle[1])

    def _pop_due(self, limit_us):
        with self._lock:
            while self._heap:
                due, seq, kind, arg = self._heap[0]
                if limit_us is not None and due > limit_us:
                    return None
                heapq.heappop(self._heap)
                if seq in self._cancelled:
                    self._cancelled.discard(seq)
                    continue
                self._now_us = max(self._now_us, due)
                return kind, arg
            return None

    def _run_one(self, limit_us) -> bool:
        item = self._pop_due(limit_us)
        if item is None:
            return False
        kind, arg = item
        if kind == "dgram":
            self._deliver(*arg)
        else:
            arg()
        return True

    def step(self) -> bool:
        """Process the next scheduled event; False when idle."""
        return self._run_one(None)

    def advance(self, dt: float) -> None:
        self.run_until(self.now() + dt)

    def run_until(self, t: float) -> None:
        limit_us = int(t * 1e6)
        while self._run_one(limit_us):
            pass
        with self._lock:
            self._now_us = max(self._now_us, limit_us)

    def run_until_idle(self, max_events: int = 1_000_000) -> int:
        n = 0
        while n < max_events and self._run_one(None):
            n += 1
        return n

    @property
    def clock(self):
        return self


class SimConnection(Connection):
    """Bootstrap-capable datagram connection on a SimNet."""

    data_type = "bytes"

    def __init__(self, net: SimNet, addr: Endpoint, mbox: _Mailbox):
        self.net = net
        self.addr = addr
        self._mbox = mbox
        self._closed = False

    @property
    def local_endpoint(self):
        return self.addr

    def send_to(self, peer: Endpoint, payload: bytes):
        if self._closed:
            raise ConnectionClosed("connection is closed")
        self.net.send_to(self.addr, peer, payload)

    def recv_from(self, timeout=None):
        got = self._recv_batch(1, timeout)
        return got[0] if got else None

    def _recv_batch(self, max_n, timeout):
        if self._closed and not self._mbox._q:
            raise ConnectionClosed("connection is closed")
        if (
            self.net.scheduled
            and timeout != 0
            and threading.current_thread() is self.net.driver
        ):
            # The driver thread pumps virtual time instead of blocking.
            deadline = None if timeout is None else self.net.now() + timeout
            while not self._mbox._q:
                limit = None if deadline is None else int(deadline * 1e6)
                if not self.net._run_one(limit):
                    return []
            return self._mbox.get_batch(max_n, 0)
        return self._mbox.get_batch(max_n, timeout)

    def set_receiver(self, fn):
        self._mbox.set_receiver(fn)

    def send(self, msgs):
        if self._closed:
            raise ConnectionClosed("connection is closed")
        for addr, payload in msgs:
            self.net.send_to(self.addr, addr, payload)

    def recv(self, slots, timeout=None):
        if not slots:
            raise ValueError("recv requires at least one slot")
        return fill_slots(slots, self._recv_batch(len(slots), timeout))

    def wait_readable(self, timeout=None):
        if (
            self.net.scheduled
            and timeout != 0
            and threading.current_thread() is self.net.driver
        ):
            deadline = None if timeout is None else self.net.now() + timeout
            while not self._mbox._q:
                limit = None if deadline is None else int(deadline * 1e6)
                if not self.net._run_one(limit):
                    return bool(self._mbox._q)
            return True
        return self._mbox.wait_nonempty(timeout)

    def close(self):
        if not self._closed:
            self._closed = True
            self._mbox.close()
            self.net._unbind(self.addr, self._mbox)

    def detach(self):
        """Release this handle without closing the binding (state handoff)."""
        self._closed = True

    def export_state(self):
        return ("datagram-binding", self.addr)

    def import_state(self, state):
        if state is None:
            return
        kind, addr = state
        if kind != "datagram-binding" or addr != self.addr:
            raise IncompatibleState(f"cannot adopt binding state {state!r}")


# --- OS UDP adapter --------------------------------------------------------------


class _SystemScheduler:
    """Real-time timer wheel shared by real-transport protocol engines."""

    def __init__(self):
        self._heap = []
        self._seq = 0
        self._cancelled = set()
        self._cond = threading.Condition()
        self._thread = None

    def _ensure_thread(self):
        if self._thread is None or not self._thread.is_alive():
            self._thread = threading.Thread(target=self._run, daemon=True)
            self._thread.start()

    def now(self) -> float:
        return time.monotonic()

    def call_at(self, when: float, fn):
        with self._cond:
            self._seq += 1
            handle = (when, self._seq)
            heapq.heappush(self._heap, (when, self._seq, fn))
            self._ensure_thread()
            self._cond.notify()
        return handle

    def call_later(self, delay: float, fn):
        return self.call_at(self.now() + delay, fn)

    def cancel(self, handle):
        with self._cond:
            self._cancelled.add(handle[1])

    def _run(self):
        while True:
            with self._cond:
                while True:
                    if not self._heap:
                        self._cond.wait(1.0)
                        if not self._heap:
                            continue
                    when, seq, fn = self._heap[0]
                    if seq in self._cancelled:
                        heapq.heappop(self._heap)
                        self._cancelled.discard(seq)
                        continue
                    delay = when - time.monotonic()
                    if delay <= 0:
                        heapq.heappop(self._heap)
                        break
                    self._cond.wait(delay)
            try:
                fn()
            except Exception:
                pass


SYSTEM_CLOCK = _SystemScheduler()


class UdpNet:
    """OS datagram sockets on the loopback interface."""

    def __init__(self, host: str = "127.0.0.1"):
        self.host = host
        self.scheduled = False

    def bind(self, addr: Endpoint) -> "UdpConnection":
        sock = _socket.socket(_socket.AF_INET, _socket.SOCK_DGRAM)
        try:
            sock.bind((addr.host, addr.port))
        except OSError as exc:
            sock.close()
            raise AddressInUse(f"{addr}: {exc}") from exc
        if addr.port == 0:
            addr = Endpoint(addr.host, sock.getsockname()[1])
        return UdpConnection(self, addr, sock)

    def attach(self, addr: Endpoint) -> "UdpConnection":
        return self.bind(addr)

    @property
    def clock(self):
        return SYSTEM_CLOCK


class UdpConnection(Connection):
    data_type = "bytes"

    def __init__(self, net, addr: Endpoint, sock):
        self.net = net
        self.addr = addr
        self._sock = sock
        self._recv_lock = threading.Lock()
        self._closed = False
        self._pump = None

    @property
    def local_endpoint(self):
        return self.addr

    def send_to(self, peer: Endpoint, payload: bytes):
        if len(payload) > MAX_DATAGRAM:
            raise PayloadTooLarge(f"{len(payload)} bytes > {MAX_DATAGRAM}")
        if self._closed:
            raise ConnectionClosed("connection is closed")
        self._sock.sendto(payload, (peer.host, peer.port))

    def recv_from(self, timeout=None):
        with self._recv_lock:
            if self._closed:
                raise ConnectionClosed("connection is closed")
            self._sock.settimeout(timeout)
            try:
                payload, (host, port) = self._sock.recvfrom(MAX_DATAGRAM + 1)
            except (_socket.timeout, BlockingIOError):
                return None
            except OSError:
                if self._closed:
                    raise ConnectionClosed("connection is closed") from None
                raise
            return Endpoint(host, port), payload

    def set_receiver(self, fn):
        def pump():
            while not self._closed:
                try:
                    got = self.recv_from(timeout=0.05)
                except ConnectionClosed:
                    return
                if got is not None:
                    fn(*got)

        self._pump = threading.Thread(target=pump, daemon=True)
        self._pump.start()

    def send(self, msgs):
        for addr, payload in msgs:
            self.send_to(addr, payload)

    def recv(self, slots, timeout=None):
        if not slots:
            raise ValueError("recv requires at least one slot")
        first = self.recv_from(timeout)
        if first is None:
            return 0
        out = [first]
        while len(out) < len(slots):
            extra = self.recv_from(timeout=0)
            if extra is None:
                break
            out.append(extra)
        return fill_slots(slots, out)

    def wait_readable(self, timeout=None):
        import select

        r, _, _ = select.select([self._sock], [], [], timeout)
        return bool(r)

    def close(self):
        self._closed = True
        self._sock.close()


# --- topic bus (in-process pub/sub substrate) ----------------------------------


class TopicBus:
    """Publish/subscribe fan-out over a SimNet.

    Every subscriber owns a SimNet endpoint; publishing to a topic sends a
    copy to every other subscriber.  With a zero-jitter net the bus
    delivers in global publish order (provider-style ordering); jitter
    yields an unordered best-effort queue.
    """

    def __init__(self, net: SimNet):
        self.net = net
        self._lock = threading.Lock()
        self._topics: dict[str, dict[Endpoint, SimConnection]] = {}

    def subscribe(self, topic: str, addr: Endpoint) -> "TopicConnection":
        conn = self.net.bind(addr)
        with self._lock:
            self._topics.setdefault(topic, {})[addr] = conn
        return TopicConnection(self, topic, conn)

    def unsubscribe(self, topic: str, addr: Endpoint):
        with self._lock:
            members = self._topics.get(topic, {})
            conn = members.pop(addr, None)
        if conn is not None:
            conn.close()

    def subscriber_count(self, topic: str) -> int:
        with self._lock:
            return len(self._topics.get(topic, {}))

    def publish(self, topic: str, src: Endpoint, payload: bytes):
        with self._lock:
            peers = [a for a in self._topics.get(topic, {}) if a != src]
            peers.sort()
        for peer in peers:
            self.net.send_to(src, peer, payload)


class TopicConnection(Connection):
    """Datagram-style view of one topic subscription."""

    data_type = "bytes"

    def __init__(self, bus: TopicBus, topic: str, conn: SimConnection):
        self.bus = bus
        self.topic = topic
        self._conn = conn

    @property
    def local_endpoint(self):
        return self._conn.addr

    def send_to(self, _peer, payload: bytes):
        self.bus.publish(self.topic, self._conn.addr, payload)

    def recv_from(self, timeout=None):
        return self._conn.recv_from(timeout)

    def set_receiver(self, fn):
        self._conn.set_receiver(fn)

    def send(self, msgs):
        for _addr, payload in msgs:
            self.bus.publish(self.topic, self._conn.addr, payload)

    def recv(self, slots, timeout=None):
        return self._conn.recv(slots, timeout)

    def wait_readable(self, timeout=None):
        return self._conn.wait_readable(timeout)

    def close(self):
        self.bus.unsubscribe(self.topic, self._conn.addr)


# --- bootstrap transport chunnels ---------------------------------------------


class DatagramChunnel(Chunnel):
    """Bootstrap layer over a datagram network binding.

    Two instances with different tags act as swappable transport
    implementations; the replacement adopts the live binding (same port,
    queued datagrams preserved).
    """

    input_type = "unit"
    output_type = "bytes"

    def __init__(self, net, addr: Endpoint, impl_tag: str = "dgram"):
        self.net = net
        self.addr = addr
        self.impl_tag = impl_tag

    def connect_wrap(self, inner):
        conn = self.net.attach(self.addr)
        conn.impl_tag = self.impl_tag
        return conn

    def __repr__(self):
        return f"DatagramChunnel({self.addr}, {self.impl_tag})"


class TopicChunnel(Chunnel):
    """Bootstrap layer subscribing an endpoint to an in-process topic."""

    input_type = "unit"
    output_type = "bytes"

    def __init__(self, bus: TopicBus, topic: str, addr: Endpoint):
        self.bus = bus
        self.topic = topic
        self.addr = addr

    def connect_wrap(self, inner):
        return self.bus.subscribe(self.topic, self.addr)

    def __repr__(self):
        return f"TopicChunnel({self.topic}@{self.addr})"
