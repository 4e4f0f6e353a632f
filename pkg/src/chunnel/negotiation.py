"""Connection-time agreement on a concrete stack.

The client sends its candidate stacks (HELLO carrying the canonical offer
encoding); the server picks the first compatible pair, scanning its own
candidates in preference order and the client's within that, and answers
ACCEPT with a nonce naming the client's select branches plus its own
chosen capability entries.  Both sides then compute the agreed stack and
its fingerprint independently; the fingerprints must match.

Zero-RTT resumption replays a cached agreement: the client instantiates
the remembered stack immediately and may send data in the same flight.  A
server that can no longer use that stack answers ZRTT_FAIL with a fresh
proposal, and the client tears down and adopts it in place.
"""

from __future__ import annotations

import logging
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from .control import ControlConfig, DataAdapter, FrameChannel
from .core import (
    Connection,
    SelectConnection,
    SelectNode,
    StackSpec,
    concrete_layers,
    enumerate_candidates,
    instantiate,
    make_stack,
)
from .concurrency import LockedGuard
from .errors import (
    MalformedNonce,
    MalformedOffer,
    NegotiationRejected,
    NoCompatibleStack,
    PeerUnreachable,
)
from .wire import (
    Frame,
    OfferCandidate,
    TAG_ACCEPT,
    TAG_HELLO,
    TAG_REJECT,
    TAG_ZRTT_FAIL,
    TAG_ZRTT_HELLO,
    capability_map,
    decode_nonce,
    decode_offer,
    encode_entries,
    decode_entries,
    encode_lp,
    encode_nonce,
    encode_offer,
    encode_string,
    PayloadReader,
    stack_fingerprint,
)

log = logging.getLogger("chunnel.negotiation")


# --- offers and the compatibility rule -------------------------------------------


def build_offer(spec: StackSpec) -> tuple:
    """Candidate stacks of a spec as wire-ready offer candidates."""
    out = []
    for bits in enumerate_candidates(spec):
        layers = concrete_layers(spec, bits)
        entries = tuple(cap for layer in layers for cap in layer.capabilities())
        capability_map(entries)  # surface mode conflicts at offer-build time
        out.append(OfferCandidate(bits, entries))
    return tuple(out)


def agreed_stack(map_a: dict, map_b: dict) -> Optional[dict]:
    """Apply the compatibility rule to two stacks' capability maps.

    Exact-match universes must appear on both sides with equal label sets.
    Compositional universes may appear on either side; when both declare
    one, the label sets must intersect and the agreement is the
    intersection.  Returns the agreed universe map, or None.
    """
    agreed = {}
    for universe in set(map_a) | set(map_b):
        a = map_a.get(universe)
        b = map_b.get(universe)
        if a is not None and b is not None:
            (mode_a, labels_a), (mode_b, labels_b) = a, b
            if mode_a != mode_b:
                return None
            if mode_a == "exact":
                if labels_a != labels_b:
                    return None
                agreed[universe] = ("exact", labels_a)
            else:
                common = labels_a & labels_b
                if not common:
                    return None
                agreed[universe] = ("compositional", common)
        else:
            mode, labels = a or b
            if mode == "exact":
                return None
            agreed[universe] = ("compositional", labels)
    return agreed


def adopts_exactly(candidate_map: dict, target: dict) -> bool:
    """True when pairing the candidate with the target yields the target."""
    return agreed_stack(candidate_map, target) == target


@dataclass(frozen=True)
class CompatResult:
    server_index: int
    client_index: int
    agreed: dict
    fingerprint: bytes


def check_compat(client_candidates, server_candidates) -> CompatResult:
    """First compatible pair, server preference first, then client's."""
    if not client_candidates or not server_candidates:
        raise NoCompatibleStack("empty candidate list")
    for si, server_cand in enumerate(server_candidates):
        server_map = capability_map(server_cand.entries)
        for ci, client_cand in enumerate(client_candidates):
            agreed = agreed_stack(capability_map(client_cand.entries), server_map)
            if agreed is not None:
                return CompatResult(si, ci, agreed, stack_fingerprint(agreed))
    raise NoCompatibleStack(
        f"{len(client_candidates)}x{len(server_candidates)} candidate pairs"
    )


@dataclass(frozen=True)
class NegotiatedStack:
    """Outcome of a successful negotiation, as seen by one endpoint."""

    choice: tuple  # branch-index vector for the local spec
    agreed: dict  # universe -> (mode, agreed labels)
    fingerprint: bytes
    role: str = "client"

    @property
    def peer_labels(self) -> dict:
        return {u: labels for u, (_m, labels) in self.agreed.items()}


@dataclass
class NegotiationContext:
    """Connect-time information made available to agreement-aware layers."""

    channel: FrameChannel
    peer: object
    connid: int
    role: str
    nonce: bytes = b""
    offer_bytes: bytes = b""

    def forward_nonce(self, endpoints):
        """Tell other endpoints (e.g. shards) which stack this client uses."""
        payload = encode_lp(self.nonce) + self.offer_bytes
        for ep in endpoints:
            if ep == self.peer:
                continue
            self.channel.reliable_send(ep, TAG_ZRTT_HELLO, self.connid, payload)


def apply_agreement(spec: StackSpec, agreed: dict, context) -> StackSpec:
    """Clone a spec, specializing agreement-aware layers to the outcome."""

    def clone(layers):
        out = []
        for layer in layers:
            if isinstance(layer, SelectNode):
                out.append(SelectNode(clone(layer.left), clone(layer.right)))
            elif hasattr(layer, "with_agreement"):
                out.append(layer.with_agreement(agreed, context))
            else:
                out.append(layer)
        return tuple(out)

    return make_stack(clone(spec.layers), bottom=spec.bottom_type)


class ZeroRttCache:
    """Peer endpoint -> remembered agreement; in-memory, thread-safe."""

    @dataclass
    class Entry:
        choice: tuple
        agreed: dict
        fingerprint: bytes
        client_entries: tuple
        created: float = field(default_factory=time.time)

    def __init__(self):
        self._lock = threading.Lock()
        self._entries = {}

    def put(self, peer, entry):
        with self._lock:
            self._entries[peer] = entry

    def get(self, peer):
        with self._lock:
            return self._entries.get(peer)

    def __contains__(self, peer):
        with self._lock:
            return peer in self._entries

    def __len__(self):
        with self._lock:
            return len(self._entries)


# --- the negotiated connection ----------------------------------------------------


class NegotiatedConnection(Connection):
    """Live datapath plus the control-plane identity of one negotiation.

    Holds the instantiated stack behind a small guard so a multilateral
    transition can atomically replace the whole overlay (the stack is
    rebuilt over the same DATA adapter, with per-layer state transfer).
    """

    _POLL_SLICE = 0.02

    def __init__(
        self, channel, connid, peer, spec, negotiated, mechanism="locked", offer_bytes=b""
    ):
        self.channel = channel
        self.connid = connid
        self.peer = peer
        self.spec = spec
        self.negotiated = negotiated
        self.mechanism = mechanism
        self.offer_bytes = offer_bytes
        self.zrtt_state = "full"
        self._guard = LockedGuard()
        self._poison = None
        self._control_waiters = []
        self.adapter = DataAdapter(channel, connid, peer)
        context = NegotiationContext(
            channel, peer, connid, negotiated.role, offer_bytes=offer_bytes
        )
        context.nonce = encode_nonce(negotiated.choice, negotiated.fingerprint)
        self.context = context
        self._stack = self._build(negotiated.choice, negotiated.agreed, context)
        self.data_type = self._stack.data_type
        self.engine = None
        self._negotiation_cb = None
        channel.register_control_handler(connid, self._on_control)
        from .reconfig import MultilateralEngine

        self.engine = MultilateralEngine(self)

    def _build(self, bits, agreed, context):
        spec = apply_agreement(self.spec, agreed, context)
        return instantiate(spec, bits, self.adapter, mechanism=self.mechanism)

    # -- datapath ----------------------------------------------------------

    def send(self, msgs):
        if self._poison is not None:
            raise self._poison
        with self._guard.enter():
            self._stack.send(msgs)

    def recv(self, slots, timeout=None):
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            if self._poison is not None:
                raise self._poison
            with self._guard.enter():
                got = self._stack.recv(slots, timeout=0)
            if got:
                return got
            if deadline is not None:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return 0
                self._stack.wait_readable(min(remaining, self._POLL_SLICE))
            else:
                self._stack.wait_readable(self._POLL_SLICE)

    def wait_readable(self, timeout=None):
        return self._stack.wait_readable(timeout)

    def close(self):
        self.channel.unregister_control_handler(self.connid)
        self._stack.close()

    @property
    def local_endpoint(self):
        return self.channel.local_endpoint

    def _children(self):
        return [self._stack]

    @property
    def stack(self):
        return self._stack

    # -- control plane --------------------------------------------------------

    def _on_control(self, src, frame):
        if frame.tag in (TAG_ACCEPT, TAG_REJECT, TAG_ZRTT_FAIL, TAG_ZRTT_HELLO):
            cb = self._negotiation_cb
            if cb is not None:
                cb(src, frame)
            return
        if self.engine is not None:
            self.engine.on_control(src, frame)

    def poison(self, err):
        self._poison = err

    def adopt_stack(self, bits, agreed, fingerprint, role=None):
        """Tear down the current overlay and instantiate a replacement.

        Per-layer state is transferred positionally; the guard's release is
        the switching point.
        """
        context = NegotiationContext(
            self.channel,
            self.peer,
            self.connid,
            role or self.negotiated.role,
            offer_bytes=self.offer_bytes,
        )
        context.nonce = encode_nonce(bits, fingerprint)
        fresh = self._build(bits, agreed, context)
        with self._guard.exclusive():
            old_chain = list(_layer_chain(self._stack, self.adapter))
            new_chain = list(_layer_chain(fresh, self.adapter))
            for i, new_layer in enumerate(new_chain):
                state = old_chain[i].export_state() if i < len(old_chain) else None
                new_layer.import_state(state)
            old = self._stack
            self._stack = fresh
            self.negotiated = NegotiatedStack(
                tuple(bits), agreed, fingerprint, role or self.negotiated.role
            )
        _detach_chain(old, self.adapter)


def _layer_chain(conn, stop):
    """Layer connections from the top down to (excluding) the adapter.

    Select connections are transparent here: their active branch's layers
    stand in for them, so positional state transfer lines up across two
    instantiations of the same spec.
    """
    node = conn
    while node is not None and node is not stop:
        if isinstance(node, SelectConnection):
            node = node.active_connection
            continue
        yield node
        node = getattr(node, "inner", None)


def _detach_chain(conn, stop):
    node = conn
    while node is not None and node is not stop:
        if hasattr(node, "detach"):
            node.detach()
        if isinstance(node, SelectConnection):
            node = node.active_connection
        else:
            node = getattr(node, "inner", None)


# --- client side -----------------------------------------------------------------


def _parse_accept_payload(payload, candidates_by_bits):
    reader = PayloadReader(payload, MalformedOffer)
    nonce = reader.lp()
    entries = decode_entries(reader.rest())
    bits, fingerprint = decode_nonce(nonce)
    cand = candidates_by_bits.get(bits)
    if cand is None:
        raise MalformedNonce(f"branch choice {bits} not in the offered set")
    agreed = agreed_stack(capability_map(cand.entries), capability_map(entries))
    if agreed is None:
        raise NegotiationRejected("peer chose an incompatible pair")
    if stack_fingerprint(agreed) != fingerprint:
        raise NegotiationRejected("stack fingerprint mismatch")
    return bits, agreed, fingerprint


def client_negotiate(
    channel: FrameChannel,
    spec: StackSpec,
    peer,
    *,
    timeout: float = 5.0,
    cache: ZeroRttCache | None = None,
    mechanism: str = "locked",
    rng: random.Random | None = None,
    control_config: ControlConfig | None = None,
):
    """Full one-round-trip negotiation; returns (connection, outcome)."""
    if spec.bottom_type == "unit":
        raise ValueError("negotiate over a bound base: build the spec with bottom='bytes'")
    rng = rng or random
    candidates = build_offer(spec)
    by_bits = {c.bits: c for c in candidates}
    offer_bytes = encode_offer(candidates)
    connid = rng.getrandbits(64) | 1
    outcome: dict = {}

    def handler(src, frame):
        if frame.tag == TAG_ACCEPT:
            outcome["accept"] = frame.payload
        elif frame.tag == TAG_REJECT:
            reader = PayloadReader(frame.payload)
            outcome["reject"] = reader.string() if frame.payload else "rejected"

    def on_send(err):
        if err is not None:
            outcome["unreachable"] = err

    channel.register_control_handler(connid, handler)
    try:
        channel.reliable_send(
            peer, TAG_HELLO, connid, offer_bytes, on_result=on_send,
            config=control_config,
        )
        if not channel.drive_until(lambda: outcome, timeout):
            raise PeerUnreachable(f"no negotiation response from {peer}")
        if "unreachable" in outcome and "accept" not in outcome:
            raise outcome["unreachable"]
        if "reject" in outcome:
            raise NegotiationRejected(outcome["reject"])
        bits, agreed, fingerprint = _parse_accept_payload(outcome["accept"], by_bits)
    except Exception:
        channel.unregister_control_handler(connid)
        raise
    negotiated = NegotiatedStack(bits, agreed, fingerprint, "client")
    conn = NegotiatedConnection(
        channel, connid, peer, spec, negotiated, mechanism, offer_bytes
    )
    if cache is not None:
        cache.put(
            peer,
            ZeroRttCache.Entry(bits, agreed, fingerprint, by_bits[bits].entries),
        )
    return conn, conn.negotiated


def client_reconnect_0rtt(
    channel: FrameChannel,
    spec: StackSpec,
    cache: ZeroRttCache,
    peer,
    *,
    timeout: float = 5.0,
    mechanism: str = "locked",
    rng: random.Random | None = None,
    control_config: ControlConfig | None = None,
):
    """Resume with a cached stack; application data may flow immediately.

    The cached stack is instantiated before any reply arrives.  If the
    server answers ZRTT_FAIL, the connection tears down the optimistic
    stack and adopts the proposed one in place; data sent before the
    failure is lost (best-effort).  REJECT poisons the connection with
    NegotiationRejected.
    """
    entry = cache.get(peer)
    if entry is None:
        raise KeyError(f"no zero-RTT cache entry for {peer}")
    rng = rng or random
    candidates = build_offer(spec)
    by_bits = {c.bits: c for c in candidates}
    offer_bytes = encode_offer(candidates)
    nonce = encode_nonce(entry.choice, entry.fingerprint)
    connid = rng.getrandbits(64) | 1

    negotiated = NegotiatedStack(entry.choice, entry.agreed, entry.fingerprint, "client")
    conn = NegotiatedConnection(
        channel, connid, peer, spec, negotiated, mechanism, offer_bytes
    )
    conn.zrtt_state = "optimistic"

    def negotiation_cb(src, frame):
        if frame.tag == TAG_ZRTT_FAIL:
            try:
                bits, agreed, fingerprint = _parse_accept_payload(
                    frame.payload, by_bits
                )
            except Exception as exc:
                conn.poison(NegotiationRejected(f"bad fallback proposal: {exc}"))
                conn.zrtt_state = "rejected"
                return
            conn.adopt_stack(bits, agreed, fingerprint)
            cache.put(
                peer,
                ZeroRttCache.Entry(
                    tuple(bits), agreed, fingerprint, by_bits[bits].entries
                ),
            )
            conn.zrtt_state = "fallback"
        elif frame.tag == TAG_REJECT:
            reader = PayloadReader(frame.payload)
            reason = reader.string() if frame.payload else "rejected"
            conn.poison(NegotiationRejected(reason))
            conn.zrtt_state = "rejected"

    conn._negotiation_cb = negotiation_cb

    def on_send(err):
        if err is not None:
            conn.poison(err)
            conn.zrtt_state = "unreachable"
        elif conn.zrtt_state == "optimistic":
            # Acknowledged after dispatch: any ZRTT_FAIL was already sent
            # before this ACK, so a still-optimistic connection is good.
            conn.zrtt_state = "confirmed"

    channel.reliable_send(
        peer,
        TAG_ZRTT_HELLO,
        connid,
        encode_lp(nonce) + offer_bytes,
        on_result=on_send,
        config=control_config,
    )
    return conn, conn.negotiated


def wait_zrtt_settled(conn: NegotiatedConnection, timeout: float = 5.0) -> str:
    conn.channel.drive_until(lambda: conn.zrtt_state != "optimistic", timeout)
    return conn.zrtt_state


# --- server side -------------------------------------------------------------------


class Listener:
    """Accepts negotiations on a bound channel; one bad peer cannot kill it."""

    def __init__(
        self,
        channel: FrameChannel,
        spec: StackSpec,
        *,
        mechanism: str = "locked",
        control_config: ControlConfig | None = None,
    ):
        if spec.bottom_type == "unit":
            raise ValueError("listen over a bound base: build the spec with bottom='bytes'")
        self.channel = channel
        self.spec = spec
        self.mechanism = mechanism
        self.control_config = control_config
        self.candidates = build_offer(spec)
        self._zrtt_by_fp: dict = {}
        self._accepts = []
        self._known: set = set()
        self._lock = threading.Lock()
        self.on_accept = None  # callback(conn, negotiated), called inline
        channel.set_fallback_handler(self._on_control)

    # -- accept stream -------------------------------------------------------

    def accept(self, timeout: float = 5.0):
        ok = self.channel.drive_until(lambda: self._accepts, timeout)
        if not ok:
            return None
        with self._lock:
            return self._accepts.pop(0) if self._accepts else None

    def pending(self) -> int:
        with self._lock:
            return len(self._accepts)

    # -- frame handling ----------------------------------------------------------

    def _reject(self, src, connid, reason):
        self.channel.reliable_send(
            src, TAG_REJECT, connid, encode_string(reason), config=self.control_config
        )

    def _on_control(self, src, frame):
        try:
            if frame.tag == TAG_HELLO:
                self._on_hello(src, frame)
            elif frame.tag == TAG_ZRTT_HELLO:
                self._on_zrtt(src, frame)
            else:
                log.debug(
                    "listener ignoring %s for unknown connid %x",
                    frame.tag_name,
                    frame.connid,
                )
        except NoCompatibleStack:
            self._reject(src, frame.connid, "no compatible stack")
        except (MalformedOffer, MalformedNonce) as exc:
            log.debug("malformed negotiation from %s: %s", src, exc)
            self._reject(src, frame.connid, "malformed offer")
        except Exception:
            log.exception("negotiation handling failed")
            self._reject(src, frame.connid, "internal error")

    def _make_connection(self, src, connid, result: CompatResult, role="server"):
        server_cand = self.candidates[result.server_index]
        negotiated = NegotiatedStack(
            server_cand.bits, result.agreed, result.fingerprint, role
        )
        conn = NegotiatedConnection(
            self.channel,
            connid,
            src,
            self.spec,
            negotiated,
            self.mechanism,
            encode_offer(self.candidates),
        )
        with self._lock:
            self._known.add(connid)
            if self.on_accept is None:
                self._accepts.append((conn, negotiated))
        if self.on_accept is not None:
            self.on_accept(conn, negotiated)
        return conn

    def _on_hello(self, src, frame):
        if frame.connid in self._known:
            return
        offer = decode_offer(frame.payload)
        result = check_compat(offer, self.candidates)
        client_cand = offer[result.client_index]
        self._zrtt_by_fp[result.fingerprint] = client_cand.entries
        self._make_connection(src, frame.connid, result)
        nonce = encode_nonce(client_cand.bits, result.fingerprint)
        payload = encode_lp(nonce) + encode_entries(
            self.candidates[result.server_index].entries
        )
        self.channel.reliable_send(
            src, TAG_ACCEPT, frame.connid, payload, config=self.control_config
        )

    def _on_zrtt(self, src, frame):
        if frame.connid in self._known:
            return
        reader = PayloadReader(frame.payload, MalformedOffer)
        nonce = reader.lp()
        bits, fingerprint = decode_nonce(nonce)
        cached_entries = self._zrtt_by_fp.get(fingerprint)
        if cached_entries is not None:
            try:
                result = check_compat(
                    [OfferCandidate(bits, cached_entries)], self.candidates
                )
            except NoCompatibleStack:
                result = None
            if result is not None and result.fingerprint == fingerprint:
                # Fast path: the remembered stack still fits the current
                # spec; re-initiate it and process in-flight data with it.
                self._make_connection(src, frame.connid, result)
                return
        offer = decode_offer(reader.rest())
        result = check_compat(offer, self.candidates)
        client_cand = offer[result.client_index]
        self._zrtt_by_fp[result.fingerprint] = client_cand.entries
        self._make_connection(src, frame.connid, result)
        if result.fingerprint == fingerprint and client_cand.bits == bits:
            # The fresh outcome equals the cached one; no teardown needed.
            return
        new_nonce = encode_nonce(client_cand.bits, result.fingerprint)
        payload = encode_lp(new_nonce) + encode_entries(
            self.candidates[result.server_index].entries
        )
        self.channel.reliable_send(
            src, TAG_ZRTT_FAIL, frame.connid, payload, config=self.control_config
        )


def server_negotiate(channel, spec, **kwargs) -> Listener:
    return Listener(channel, spec, **kwargs)
