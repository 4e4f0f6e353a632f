"""Runtime replacement of chunnel implementations in live connections.

Unilateral swaps need only local coordination and come in two flavors:
lock-based (every data-path op takes the connection lock; the release is
the switching point) and barrier-based (ops read a stop flag; a pending
swap waits for all registered threads to park, switches with exclusive
access, and resumes them on the new implementation).

Multilateral swaps require agreement: the proposer sends PREPARE with the
target stack, every peer votes after checking the target against its own
spec, and only a unanimous yes commits.  A veto or a vote timeout aborts
for everyone; a peer that voted yes holds its prepared state until the
decision arrives or its decision timer expires (there is no coordinator
recovery: a proposer that dies before deciding aborts everyone by
timeout).
"""

from __future__ import annotations

import logging
import random
import threading
from dataclasses import dataclass, field

from .control import ControlConfig
from .core import Connection, SelectConnection
from .errors import Aborted, ReconfigError
from .wire import (
    PayloadReader,
    TAG_ABORT,
    TAG_COMMIT,
    TAG_PREPARE,
    TAG_VOTE,
    decode_capability_map,
    encode_capability_map,
    stack_fingerprint,
)

log = logging.getLogger("chunnel.reconfig")

# Decision frames are what keeps endpoints in agreement; give them a much
# larger retry budget than ordinary control traffic.
DECISION_CONFIG = ControlConfig(initial_rto=0.1, backoff_factor=1.5, max_attempts=12)


class ReconfigHandle:
    """Addresses the select nodes of a live connection for reconfiguration."""

    def __init__(self, conn: Connection):
        self.conn = conn

    def selects(self) -> list[SelectConnection]:
        found = list(self.conn.iter_selects())
        found.sort(key=lambda s: s.node.preorder_index)
        return found

    def select(self, index: int = 0) -> SelectConnection:
        for sel in self.selects():
            if sel.node.preorder_index == index:
                return sel
        raise ReconfigError(f"no live select with pre-order index {index}")

    def register_thread(self):
        for sel in self.selects():
            sel.guard.register_thread()

    def deregister_thread(self):
        for sel in self.selects():
            sel.guard.deregister_thread()


def reconfig_handle(conn: Connection) -> ReconfigHandle:
    return ReconfigHandle(conn)


def _checked_select(handle, select_index, mechanism, target):
    sel = handle.select(select_index)
    if sel.mechanism != mechanism:
        raise ReconfigError(
            f"select {select_index} uses the {sel.mechanism} mechanism"
        )
    if target not in (0, 1):
        raise ReconfigError(f"target branch must be 0 or 1, not {target!r}")
    if sel.node.reconfig_class != "unilateral":
        raise ReconfigError(
            "target requires agreement; use reconfigure_multilateral"
        )
    return sel


def reconfigure_unilateral_locked(handle, target: int, *, select_index: int = 0, sub_choice=None):
    """Swap a unilateral select under its connection lock."""
    _checked_select(handle, select_index, "locked", target).swap(target, sub_choice)


def reconfigure_unilateral_barrier(handle, target: int, *, select_index: int = 0, sub_choice=None):
    """Swap a unilateral select at the quiescence barrier.

    Raises BarrierTimeout (and aborts, flag cleared) if a registered thread
    never arrives.
    """
    _checked_select(handle, select_index, "barrier", target).swap(target, sub_choice)


# --- multilateral (two-phase commit) ----------------------------------------------

VOTE_YES = 1
VOTE_NO = 0


@dataclass
class _Proposal:
    pid: int
    target: dict
    votes: dict = field(default_factory=dict)
    vetoed: tuple = None
    expected: int = 0
    decided: str = ""


def _choice_for_target(spec, target: dict):
    """The first local candidate that adopts exactly the target map."""
    from .negotiation import adopts_exactly, build_offer
    from .wire import capability_map

    for cand in build_offer(spec):
        if adopts_exactly(capability_map(cand.entries), target):
            return cand.bits
    return None


class MultilateralEngine:
    """Per-connection 2PC state machine for stack transitions.

    The proposer broadcasts PREPARE(pid, target); peers vote yes only when
    one of their own candidates adopts the target exactly, so a commit
    leaves every endpoint with the same agreed map and fingerprint.
    """

    def __init__(self, conn, vote_timeout: float = 2.0, decision_timeout: float = 30.0):
        self.conn = conn
        self.channel = conn.channel
        self.connid = conn.connid
        self.participant_id = random.getrandbits(64) | 1
        self.vote_timeout = vote_timeout
        self.decision_timeout = decision_timeout
        self.vote_policy = None  # override: callable(target) -> bool
        self.halted = False  # test hook: simulate a dead proposer
        self._lock = threading.RLock()
        self._serial = threading.Lock()  # one in-flight proposal; others queue
        self._proposing: _Proposal | None = None
        self._prepared = None  # (pid, bits, target, fingerprint, timer)
        self.on_committed: list = []
        self.commit_log: list = []

    # -- outbound ------------------------------------------------------------

    def _send(self, peer, tag, payload, config=None):
        if self.halted:
            return
        if self.channel.reliable:
            self.channel.reliable_send(peer, tag, self.connid, payload, config=config)
        else:
            self.channel.send_control_raw(peer, tag, self.connid, payload)

    def _broadcast(self, peers, tag, payload, config=None):
        for peer in peers:
            self._send(peer, tag, payload, config=config)

    def propose(self, target: dict, peers=None, expected_votes=None, timeout=None) -> str:
        """Run 2PC for the target map; returns "committed" or raises Aborted."""
        peers = list(peers) if peers is not None else [self.conn.peer]
        expected = len(peers) if expected_votes is None else expected_votes
        timeout = self.vote_timeout if timeout is None else timeout
        my_bits = _choice_for_target(self.conn.spec, target)
        if my_bits is None:
            raise ReconfigError("proposed stack is incompatible with the local spec")
        with self._serial:
            pid = random.getrandbits(64) | 1
            proposal = _Proposal(pid, target, expected=expected)
            with self._lock:
                self._proposing = proposal
            try:
                payload = pid.to_bytes(8, "big") + encode_capability_map(target)
                self._broadcast(peers, TAG_PREPARE, payload)

                def settled():
                    with self._lock:
                        return (
                            proposal.vetoed is not None
                            or len(proposal.votes) >= proposal.expected
                        )

                self.channel.drive_until(settled, timeout)
                with self._lock:
                    vetoed = proposal.vetoed
                    votes = dict(proposal.votes)
                if self.halted:
                    # Simulated proposer death before the decision point:
                    # no COMMIT or ABORT is ever sent.
                    raise Aborted("proposer", "halted before decision")
                if vetoed is not None:
                    self._broadcast(
                        peers, TAG_ABORT, pid.to_bytes(8, "big"), DECISION_CONFIG
                    )
                    raise Aborted(f"peer {vetoed[0]:x}", vetoed[1])
                if len(votes) < expected:
                    self._broadcast(
                        peers, TAG_ABORT, pid.to_bytes(8, "big"), DECISION_CONFIG
                    )
                    raise Aborted(
                        "timeout", f"{len(votes)}/{expected} votes within {timeout}s"
                    )
                self._broadcast(
                    peers, TAG_COMMIT, pid.to_bytes(8, "big"), DECISION_CONFIG
                )
                fingerprint = stack_fingerprint(target)
                self.conn.adopt_stack(my_bits, target, fingerprint)
                self._record_commit(pid, target, fingerprint)
                return "committed"
            finally:
                with self._lock:
                    self._proposing = None

    # -- inbound -------------------------------------------------------------

    def on_control(self, src, frame):
        reader = PayloadReader(frame.payload)
        if frame.tag == TAG_PREPARE:
            pid = reader.u64()
            target = decode_capability_map(reader.rest())
            self._on_prepare(src, pid, target)
        elif frame.tag == TAG_VOTE:
            pid = reader.u64()
            voter = reader.u64()
            vote = reader.u8()
            reason = reader.string() if not reader.done() else ""
            self._on_vote(pid, voter, vote, reason)
        elif frame.tag == TAG_COMMIT:
            self._on_commit(reader.u64())
        elif frame.tag == TAG_ABORT:
            self._on_abort(reader.u64())

    def _vote_payload(self, pid, vote, reason=""):
        from .wire import encode_string

        return (
            pid.to_bytes(8, "big")
            + self.participant_id.to_bytes(8, "big")
            + bytes([vote])
            + (encode_string(reason) if reason else b"")
        )

    def _on_prepare(self, src, pid, target):
        if self.halted:
            return
        with self._lock:
            if self._proposing is not None and self._proposing.pid != pid:
                self._send(src, TAG_VOTE, self._vote_payload(pid, VOTE_NO, "busy"))
                return
            if self._prepared is not None and self._prepared[0] != pid:
                self._send(src, TAG_VOTE, self._vote_payload(pid, VOTE_NO, "busy"))
                return
            if self._prepared is not None and self._prepared[0] == pid:
                # Retransmitted PREPARE: repeat the yes vote.
                self._send(src, TAG_VOTE, self._vote_payload(pid, VOTE_YES))
                return
        bits = _choice_for_target(self.conn.spec, target)
        allowed = bits is not None
        if allowed and self.vote_policy is not None:
            allowed = bool(self.vote_policy(target))
        if not allowed:
            reason = "incompatible" if bits is None else "policy veto"
            self._send(src, TAG_VOTE, self._vote_payload(pid, VOTE_NO, reason))
            return
        timer = self.channel.clock.call_later(
            self.decision_timeout, lambda: self._decision_timeout(pid)
        )
        with self._lock:
            self._prepared = (pid, bits, target, stack_fingerprint(target), timer)
        self._send(src, TAG_VOTE, self._vote_payload(pid, VOTE_YES))

    def _on_vote(self, pid, voter, vote, reason):
        with self._lock:
            proposal = self._proposing
            if proposal is None or proposal.pid != pid:
                return
            if vote == VOTE_YES:
                proposal.votes[voter] = True
            else:
                proposal.vetoed = (voter, reason or "veto")

    def _on_commit(self, pid):
        with self._lock:
            prepared = self._prepared
            if prepared is None or prepared[0] != pid:
                prepared = None
            else:
                self._prepared = None
        if prepared is None:
            # A commit for a proposal this endpoint never prepared: a late
            # joiner that missed the PREPARE.  Resynchronize if a hook is set.
            if self._resync_hook is not None:
                try:
                    self._resync_hook()
                except Exception:
                    log.exception("resync after unknown commit failed")
            return
        _pid, bits, target, fingerprint, timer = prepared
        self.channel.clock.cancel(timer)
        self.conn.adopt_stack(bits, target, fingerprint)
        self._record_commit(pid, target, fingerprint)

    def _on_abort(self, pid):
        with self._lock:
            if self._prepared is not None and self._prepared[0] == pid:
                self.channel.clock.cancel(self._prepared[4])
                self._prepared = None

    def _decision_timeout(self, pid):
        with self._lock:
            if self._prepared is not None and self._prepared[0] == pid:
                log.warning("no decision for proposal %x; aborting locally", pid)
                self._prepared = None

    _resync_hook = None

    def set_resync_hook(self, fn):
        self._resync_hook = fn

    def _record_commit(self, pid, target, fingerprint):
        self.commit_log.append((pid, fingerprint))
        for cb in list(self.on_committed):
            try:
                cb(pid, target, fingerprint)
            except Exception:
                log.exception("commit callback failed")


def reconfigure_multilateral(conn, target: dict, *, peers=None, expected_votes=None, timeout=None) -> str:
    """Two-phase-commit stack transition on a negotiated connection.

    ``target`` is the agreed universe map every endpoint must adopt
    exactly; a veto or timeout raises Aborted and nobody switches.
    """
    return conn.engine.propose(
        target, peers=peers, expected_votes=expected_votes, timeout=timeout
    )
