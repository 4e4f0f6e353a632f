"""Control traffic over a shared base connection.

Control and data frames ride the same datagram socket, demultiplexed by
the frame tag byte.  Control frames (everything except DATA and ACK) get a
simple stop-and-wait reliability and ordering protocol per (peer,
connection id): retransmission with exponential backoff on the send side,
and per-sequence de-duplication plus out-of-order buffering on the receive
side, so handlers see each control frame exactly once and in order.  DATA
frames bypass this machinery entirely and stay best-effort.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import deque
from dataclasses import dataclass

from .core import Connection, fill_slots
from .errors import ConnectionClosed, MalformedFrame, PeerUnreachable
from .transport import SimNet, _Mailbox
from .wire import (
    Frame,
    TAG_ACK,
    TAG_DATA,
    decode_frame,
    encode_frame,
)

log = logging.getLogger("chunnel.control")


@dataclass(frozen=True)
class ControlConfig:
    """Retransmission knobs; defaults suit fast desk-scale tests."""

    initial_rto: float = 0.1
    backoff_factor: float = 2.0
    max_attempts: int = 5


class _TxState:
    """Stop-and-wait sender for one (peer, connid) direction."""

    def __init__(self):
        self.next_seq = 1
        self.outstanding = None  # (frame, attempts, rto, timer_handle, on_result)
        self.queue = deque()


class _RxState:
    """Receive-side ordering state for one (peer, connid) direction."""

    def __init__(self):
        self.delivered_high = 0
        self.buffer = {}


class FrameChannel:
    """Frame-level demultiplexer over one base datagram connection."""

    def __init__(self, base, config: ControlConfig | None = None, reliable: bool = True):
        self.base = base
        self.config = config or ControlConfig()
        self.reliable = reliable
        net = getattr(base, "net", None)
        if net is None and hasattr(base, "bus"):
            net = base.bus.net
        self._net = net if isinstance(net, SimNet) else None
        if self._net is not None:
            self.clock = self._net.clock
        else:
            from .transport import SYSTEM_CLOCK

            self.clock = SYSTEM_CLOCK
        self._lock = threading.RLock()
        self._tx: dict = {}
        self._rx: dict = {}
        self._handlers: dict = {}
        self._fallback = None
        self._data_queues: dict = {}
        self._pending_data: dict = {}
        self.frame_counts: dict = {}
        self.closed = False
        base.set_receiver(self._on_datagram)

    @property
    def local_endpoint(self):
        return self.base.local_endpoint

    # -- send side ---------------------------------------------------------

    def send_frame(self, peer, frame: Frame):
        self.base.send_to(peer, encode_frame(frame))

    def send_data(self, peer, connid: int, payload: bytes, seq: int = 0):
        self.send_frame(peer, Frame(TAG_DATA, connid, seq, payload))

    def reliable_send(
        self,
        peer,
        tag: int,
        connid: int,
        payload: bytes = b"",
        on_result=None,
        config: ControlConfig | None = None,
    ) -> int:
        """Queue a control frame for acknowledged, in-order delivery.

        ``on_result`` is invoked with None once the cumulative ACK covers
        the frame, or with a PeerUnreachable after the retry budget.
        """
        if tag in (TAG_DATA, TAG_ACK):
            raise ValueError("reliable_send carries control frames only")
        if not self.reliable:
            raise ValueError("channel runs in raw (broadcast) mode")
        cfg = config or self.config
        with self._lock:
            tx = self._tx.setdefault((peer, connid), _TxState())
            seq = tx.next_seq
            tx.next_seq += 1
            frame = Frame(tag, connid, seq, payload)
            tx.queue.append((frame, on_result, cfg))
            if tx.outstanding is None:
                self._tx_fire(peer, connid, tx)
        return seq

    def _tx_fire(self, peer, connid, tx):
        frame, on_result, cfg = tx.queue.popleft()
        timer = self.clock.call_later(
            cfg.initial_rto, lambda: self._on_rto(peer, connid)
        )
        tx.outstanding = [frame, 1, cfg.initial_rto, timer, on_result, cfg]
        self.send_frame(peer, frame)

    def _on_rto(self, peer, connid):
        callback = None
        with self._lock:
            tx = self._tx.get((peer, connid))
            if tx is None or tx.outstanding is None:
                return
            frame, attempts, rto, _timer, on_result, cfg = tx.outstanding
            if attempts >= cfg.max_attempts:
                tx.outstanding = None
                err = PeerUnreachable(
                    f"{frame.tag_name} seq {frame.seq} to {peer}: "
                    f"no ACK after {attempts} attempts"
                )
                callback = (on_result, err)
                if tx.queue:
                    self._tx_fire(peer, connid, tx)
            else:
                rto *= cfg.backoff_factor
                timer = self.clock.call_later(rto, lambda: self._on_rto(peer, connid))
                tx.outstanding = [frame, attempts + 1, rto, timer, on_result, cfg]
                self.send_frame(peer, frame)
        if callback and callback[0]:
            callback[0](callback[1])

    def _on_ack(self, peer, connid, value):
        callback = None
        with self._lock:
            tx = self._tx.get((peer, connid))
            if tx is None or tx.outstanding is None:
                return
            frame, _attempts, _rto, timer, on_result, _cfg = tx.outstanding
            if frame.seq <= value:
                self.clock.cancel(timer)
                tx.outstanding = None
                callback = on_result
                if tx.queue:
                    self._tx_fire(peer, connid, tx)
        if callback:
            callback(None)

    # -- receive side --------------------------------------------------------

    def _on_datagram(self, src, payload):
        try:
            frame = decode_frame(payload)
        except MalformedFrame as exc:
            log.debug("dropping malformed datagram from %s: %s", src, exc)
            return
        self.frame_counts[frame.tag] = self.frame_counts.get(frame.tag, 0) + 1
        if frame.tag == TAG_DATA:
            self._on_data(src, frame)
        elif frame.tag == TAG_ACK:
            self._on_ack(src, frame.connid, frame.seq)
        else:
            self._on_control(src, frame)

    def _on_data(self, src, frame):
        with self._lock:
            queue = self._data_queues.get(frame.connid)
            if queue is None:
                pending = self._pending_data.setdefault(
                    frame.connid, deque(maxlen=512)
                )
                pending.append((src, frame.payload))
                return
        queue.put(src, frame.payload)

    def send_control_raw(self, peer, tag: int, connid: int, payload: bytes = b""):
        """Best-effort in-order control frame (broadcast/topic channels)."""
        with self._lock:
            tx = self._tx.setdefault((peer, connid), _TxState())
            seq = tx.next_seq
            tx.next_seq += 1
        self.send_frame(peer, Frame(tag, connid, seq, payload))
        return seq

    def _on_control(self, src, frame):
        deliveries = []
        with self._lock:
            rx = self._rx.setdefault((src, frame.connid), _RxState())
            if frame.seq > rx.delivered_high and frame.seq not in rx.buffer:
                rx.buffer[frame.seq] = frame
            while rx.delivered_high + 1 in rx.buffer:
                rx.delivered_high += 1
                deliveries.append(rx.buffer.pop(rx.delivered_high))
            ack_value = rx.delivered_high
        for f in deliveries:
            self._dispatch(src, f)
        # The ACK follows dispatch, so an acknowledged control frame has
        # been handled (and any reply it triggered is already in flight).
        if self.reliable:
            self.send_frame(src, Frame(TAG_ACK, frame.connid, ack_value))

    def _dispatch(self, src, frame):
        with self._lock:
            handler = self._handlers.get(frame.connid, self._fallback)
        if handler is None:
            log.debug("no handler for %s connid %x", frame.tag_name, frame.connid)
            return
        try:
            handler(src, frame)
        except Exception:
            log.exception("control handler failed for %s", frame.tag_name)

    # -- registration -----------------------------------------------------------

    def register_control_handler(self, connid: int, fn):
        with self._lock:
            self._handlers[connid] = fn

    def unregister_control_handler(self, connid: int):
        with self._lock:
            self._handlers.pop(connid, None)

    def set_fallback_handler(self, fn):
        self._fallback = fn

    def data_queue(self, connid: int) -> _Mailbox:
        """Per-connection inbound DATA queue; replays early-arrival frames."""
        with self._lock:
            queue = self._data_queues.get(connid)
            if queue is None:
                queue = _Mailbox()
                self._data_queues[connid] = queue
                backlog = self._pending_data.pop(connid, ())
            else:
                backlog = ()
        for src, payload in backlog:
            queue.put(src, payload)
        return queue

    def drop_data_queue(self, connid: int):
        with self._lock:
            queue = self._data_queues.pop(connid, None)
        if queue is not None:
            queue.close()

    # -- driving ---------------------------------------------------------------

    def drive_until(self, pred, timeout: float) -> bool:
        """Wait for a protocol condition, pumping virtual time if we own it."""
        if isinstance(self._net, SimNet) and threading.current_thread() is self._net.driver:
            deadline = self._net.now() + timeout
            while not pred():
                if not self._net._run_one(int(deadline * 1e6)):
                    break
            return bool(pred())
        deadline = time.monotonic() + timeout
        while not pred():
            if time.monotonic() >= deadline:
                return False
            time.sleep(0.001)
        return True

    def close(self):
        self.closed = True
        self.base.close()


class DataAdapter(Connection):
    """Datapath bottom for a negotiated connection: DATA frames in and out.

    Sends wrap payloads in DATA frames toward the message's address (or the
    fixed peer when the address is None); receives pop this connection id's
    inbound queue.
    """

    data_type = "bytes"

    def __init__(self, channel: FrameChannel, connid: int, peer=None):
        self.channel = channel
        self.connid = connid
        self.peer = peer
        self._queue = channel.data_queue(connid)

    @property
    def local_endpoint(self):
        return self.channel.local_endpoint

    def send(self, msgs):
        for addr, payload in msgs:
            dest = addr if addr is not None else self.peer
            if dest is None:
                raise ValueError("no destination for message")
            self.channel.send_data(dest, self.connid, payload)

    def recv(self, slots, timeout=None):
        if not slots:
            raise ValueError("recv requires at least one slot")
        net = self.channel._net
        if (
            isinstance(net, SimNet)
            and net.scheduled
            and timeout != 0
            and threading.current_thread() is net.driver
        ):
            deadline = None if timeout is None else net.now() + timeout
            while not self._queue._q:
                limit = None if deadline is None else int(deadline * 1e6)
                if not net._run_one(limit):
                    break
            return fill_slots(slots, self._queue.get_batch(len(slots), 0))
        return fill_slots(slots, self._queue.get_batch(len(slots), timeout))

    def wait_readable(self, timeout=None):
        net = self.channel._net
        if (
            isinstance(net, SimNet)
            and net.scheduled
            and timeout != 0
            and threading.current_thread() is net.driver
        ):
            deadline = None if timeout is None else net.now() + timeout
            while not self._queue._q:
                limit = None if deadline is None else int(deadline * 1e6)
                if not net._run_one(limit):
                    return bool(self._queue._q)
            return True
        return self._queue.wait_nonempty(timeout)

    def close(self):
        self.channel.drop_data_queue(self.connid)
