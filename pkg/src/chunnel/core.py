"""Core abstractions: chunnel transformers, layered datapaths, stack specs.

A stack spec is an ordered list of layers, top (application-facing) first
and bottom (transport-capable) last.  Each layer is either a transformer or
a binary SelectNode between two alternative sub-stacks.  Messages travel as
``(Endpoint, payload)`` pairs at every layer; the declared data type names
the payload half ("bytes", "record", ...).
"""

from __future__ import annotations

import itertools
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .concurrency import LockedGuard, QuiesceGuard
from .errors import (
    ConnectionClosed,
    InitFailure,
    NoBootstrapLayer,
    TypeMismatch,
)

UNIT_TYPE = "unit"


class _Unit:
    """Distinguished empty-connection value handed to bootstrap layers."""

    def __repr__(self):
        return "<unit connection>"


UNIT = _Unit()


@dataclass(frozen=True)
class CapabilityDescriptor:
    """A compatibility surface: universe id, match mode, label set."""

    universe: str
    mode: str  # "exact" | "compositional"
    labels: frozenset

    def __post_init__(self):
        if self.mode not in ("exact", "compositional"):
            raise ValueError(f"unknown match mode {self.mode!r}")
        if not self.labels:
            raise ValueError("capability label set must be non-empty")
        object.__setattr__(self, "labels", frozenset(self.labels))


class Connection:
    """Layered datapath interface.

    ``send`` accepts a finite batch of ``(Endpoint, payload)`` messages.
    ``recv`` fills a caller-provided array of slots from the front and
    returns how many were filled; with ``timeout=None`` it blocks until at
    least one message is available.
    """

    data_type: str = "bytes"

    def send(self, msgs: Sequence) -> None:
        raise NotImplementedError

    def recv(self, slots: list, timeout: Optional[float] = None) -> int:
        raise NotImplementedError

    def wait_readable(self, timeout: Optional[float] = None) -> bool:
        """Block until a recv would likely yield data (may wake spuriously)."""
        time.sleep(min(timeout, 0.001) if timeout is not None else 0.001)
        return True

    def close(self) -> None:
        pass

    @property
    def local_endpoint(self):
        return None

    # State transfer contract: stateless datapaths export None, and every
    # datapath accepts a None import.
    def export_state(self):
        return None

    def import_state(self, state) -> None:
        if state is not None:
            from .errors import IncompatibleState

            raise IncompatibleState(
                f"{type(self).__name__} cannot import state {state!r}"
            )

    def _children(self) -> list:
        return []

    def iter_selects(self):
        """All live SelectConnections in this datapath tree, top-down."""
        for child in self._children():
            yield from child.iter_selects()


def fill_slots(slots: list, items: Iterable) -> int:
    n = 0
    for item in items:
        if n >= len(slots):
            break
        slots[n] = item
        n += 1
    return n


class Chunnel:
    """Transformer interface: builds one datapath layer over an inner one.

    Subclasses declare their data-type contract with ``input_type`` (None
    accepts any payload type, ``"unit"`` marks a bootstrap layer) and
    ``output_type`` (None propagates the inner type unchanged).
    """

    input_type: Optional[str] = None
    output_type: Optional[str] = None
    reconfig_class: str = "unilateral"  # "unilateral" | "multilateral"

    def capabilities(self) -> list[CapabilityDescriptor]:
        return []

    @property
    def bootstrap(self) -> bool:
        return self.input_type == UNIT_TYPE

    def connect_wrap(self, inner) -> Connection:
        raise NotImplementedError

    def __repr__(self):
        return type(self).__name__


class TransformConnection(Connection):
    """Base for per-message transform layers.

    Subclasses implement ``transform_send`` (one message to zero or more
    outgoing messages) and ``transform_recv`` (one inner message to zero or
    more releasable messages; buffering layers may hold messages back).
    """

    def __init__(self, inner: Connection, data_type: Optional[str] = None):
        self.inner = inner
        self.data_type = data_type or inner.data_type
        self._ready = deque()
        self._lock = threading.Lock()

    def transform_send(self, addr, payload):
        yield addr, payload

    def transform_recv(self, addr, payload):
        yield addr, payload

    def send(self, msgs: Sequence) -> None:
        out = []
        for addr, payload in msgs:
            out.extend(self.transform_send(addr, payload))
        if out:
            self.inner.send(out)

    def recv(self, slots: list, timeout: Optional[float] = None) -> int:
        if not slots:
            raise ValueError("recv requires at least one slot")
        while True:
            with self._lock:
                if self._ready:
                    return fill_slots(
                        slots, (self._ready.popleft() for _ in range(len(self._ready)))
                    )
            inner_slots = [None] * max(len(slots), 16)
            got = self.inner.recv(inner_slots, timeout=timeout)
            with self._lock:
                for i in range(got):
                    addr, payload = inner_slots[i]
                    self._ready.extend(self.transform_recv(addr, payload))
                if self._ready:
                    return fill_slots(
                        slots, (self._ready.popleft() for _ in range(len(self._ready)))
                    )
            if timeout is not None:
                # One bounded poll of the inner connection is all a finite
                # timeout allows; buffering layers may legitimately return 0.
                return 0

    def wait_readable(self, timeout: Optional[float] = None) -> bool:
        with self._lock:
            if self._ready:
                return True
        return self.inner.wait_readable(timeout)

    def close(self) -> None:
        self.inner.close()

    @property
    def local_endpoint(self):
        return self.inner.local_endpoint

    def _children(self) -> list:
        return [self.inner]


@dataclass
class SelectNode:
    """Preference-ordered binary choice between two sub-stacks.

    The left branch is strictly preferred.  Branches are layer lists in the
    same top-first order as a StackSpec and may nest further selects.
    """

    left: tuple
    right: tuple
    preorder_index: int = field(default=-1, compare=False)

    def __init__(self, left, right):
        self.left = _as_layer_tuple(left, "left")
        self.right = _as_layer_tuple(right, "right")
        self.preorder_index = -1

    @property
    def reconfig_class(self) -> str:
        for layer in _iter_transformers(self.left + self.right):
            if layer.reconfig_class == "multilateral":
                return "multilateral"
        return "unilateral"

    def branch(self, idx: int) -> tuple:
        return self.left if idx == 0 else self.right

    def __repr__(self):
        return f"select({list(self.left)}, {list(self.right)})"


def _as_layer_tuple(branch, name) -> tuple:
    if isinstance(branch, (Chunnel, SelectNode)):
        return (branch,)
    layers = tuple(branch)
    if not layers:
        raise ValueError(f"{name} branch of a select must be non-empty")
    return layers


def _iter_transformers(layers):
    for layer in layers:
        if isinstance(layer, SelectNode):
            yield from _iter_transformers(layer.left + layer.right)
        else:
            yield layer


def _count_selects(layers) -> int:
    n = 0
    for layer in layers:
        if isinstance(layer, SelectNode):
            n += 1 + _count_selects(layer.left) + _count_selects(layer.right)
    return n


def _index_selects(layers, start: int) -> int:
    """Assign pre-order indices (top-to-bottom, left-before-right)."""
    i = start
    for layer in layers:
        if isinstance(layer, SelectNode):
            layer.preorder_index = i
            i = _index_selects(layer.left, i + 1)
            i = _index_selects(layer.right, i)
    return i


@dataclass(frozen=True)
class StackSpec:
    """Validated ordered layer list, bottom (transport) layer last."""

    layers: tuple
    bottom_type: str  # "unit" for bootstrap stacks, else the provided type
    top_type: str = field(default="", compare=False)

    @property
    def select_count(self) -> int:
        return _count_selects(self.layers)


CandidateStack = tuple  # branch-index vector, one entry per select, pre-order


def make_stack(layers, *, bottom: str = UNIT_TYPE) -> StackSpec:
    """Validate a layer list into a StackSpec.

    Adjacent data types are checked now, before any connection exists.
    With ``bottom="unit"`` (the default) the bottom layer must be able to
    bootstrap from the unit connection.
    """
    layers = tuple(layers)
    if not layers:
        raise ValueError("a stack needs at least one layer")
    if bottom == UNIT_TYPE:
        _check_bootstrap_bottom(layers[-1])
    top_type = _check_types(layers, bottom)
    _index_selects(layers, 0)
    return StackSpec(layers=layers, bottom_type=bottom, top_type=top_type)


def _check_bootstrap_bottom(layer) -> None:
    if isinstance(layer, SelectNode):
        _check_bootstrap_bottom(layer.left[-1])
        _check_bootstrap_bottom(layer.right[-1])
        return
    if not layer.bootstrap:
        raise NoBootstrapLayer(f"bottom layer {layer!r} cannot transform unit")


def _check_types(layers, incoming: str) -> str:
    """Walk bottom-up computing the data type each layer exposes upward."""
    t = incoming
    for layer in reversed(layers):
        t = _apply_type(layer, t)
    return t


def _apply_type(layer, t: str) -> str:
    if isinstance(layer, SelectNode):
        left_t = _check_types(layer.left, t)
        right_t = _check_types(layer.right, t)
        if left_t != right_t:
            raise TypeMismatch(layer.left, layer.right, left_t, right_t)
        return left_t
    if t == UNIT_TYPE:
        if not layer.bootstrap:
            raise NoBootstrapLayer(f"layer {layer!r} cannot transform unit")
        if layer.output_type is None:
            raise TypeMismatch(UNIT, layer, UNIT_TYPE, "a concrete output type")
        return layer.output_type
    if layer.input_type == UNIT_TYPE:
        raise TypeMismatch(None, layer, t, UNIT_TYPE)
    if layer.input_type is not None and layer.input_type != t:
        raise TypeMismatch(None, layer, t, layer.input_type)
    return layer.output_type if layer.output_type is not None else t


# --- candidate enumeration ---------------------------------------------------


def enumerate_candidates(spec: StackSpec) -> list[CandidateStack]:
    """All concrete choices through the spec's selects, most preferred first.

    Candidates are branch-index vectors with one entry per select node in
    pre-order; entries for selects on unchosen branches are canonically 0.
    Ordering is lexicographic, which makes the all-left assignment first.
    """
    return [bits for bits, _ in _options(spec.layers)]


def concrete_layers(spec: StackSpec, choice: CandidateStack) -> tuple:
    """Resolve a candidate into a select-free transformer list."""
    _validate_choice(spec, choice)
    layers, _ = _resolve(spec.layers, choice, 0)
    return tuple(layers)


def _validate_choice(spec: StackSpec, choice) -> None:
    if len(choice) != spec.select_count:
        raise ValueError(
            f"choice length {len(choice)} != select count {spec.select_count}"
        )
    if any(b not in (0, 1) for b in choice):
        raise ValueError(f"branch indices must be 0 or 1: {choice!r}")


def _options(layers) -> list[tuple[CandidateStack, tuple]]:
    """Per-layer option product: (branch bits, concrete transformer list)."""
    per_layer = []
    for layer in layers:
        if isinstance(layer, SelectNode):
            n_left = _count_selects(layer.left)
            n_right = _count_selects(layer.right)
            opts = []
            for bits, conc in _options(layer.left):
                opts.append(((0,) + bits + (0,) * n_right, conc))
            for bits, conc in _options(layer.right):
                opts.append(((1,) + (0,) * n_left + bits, conc))
            per_layer.append(opts)
        else:
            per_layer.append([((), (layer,))])
    out = []
    for combo in itertools.product(*per_layer):
        bits = tuple(itertools.chain.from_iterable(b for b, _ in combo))
        conc = tuple(itertools.chain.from_iterable(c for _, c in combo))
        out.append((bits, conc))
    return out


def _resolve(layers, choice, i):
    concrete = []
    for layer in layers:
        if isinstance(layer, SelectNode):
            b = choice[i]
            n_left = _count_selects(layer.left)
            i += 1
            if b == 0:
                inner, _ = _resolve(layer.left, choice, i)
            else:
                inner, _ = _resolve(layer.right, choice, i + n_left)
            concrete.extend(inner)
            i += n_left + _count_selects(layer.right)
        else:
            concrete.append(layer)
    return concrete, i


# --- instantiation -----------------------------------------------------------


def instantiate(
    spec: StackSpec,
    choice: CandidateStack,
    base=UNIT,
    *,
    mechanism: str = "locked",
) -> Connection:
    """Build the connection bottom-up for one concrete choice.

    Each layer's connect_wrap receives the connection produced by the layer
    below.  Select nodes materialize as SelectConnections, which are the
    runtime switching points for reconfiguration.
    """
    _validate_choice(spec, choice)
    if mechanism not in ("locked", "barrier"):
        raise ValueError(f"unknown reconfiguration mechanism {mechanism!r}")
    conn, _ = _build(spec.layers, choice, 0, base, mechanism)
    return conn


def _build(layers, choice, i, inner, mechanism):
    conn = inner
    # Walk bottom-up; pre-order select indices still refer to the top-first
    # layer order, so compute each layer's index window first.
    windows = []
    j = i
    for layer in layers:
        if isinstance(layer, SelectNode):
            n = 1 + _count_selects(layer.left) + _count_selects(layer.right)
            windows.append((layer, j))
            j += n
        else:
            windows.append((layer, j))
    for layer, idx in reversed(windows):
        if isinstance(layer, SelectNode):
            conn = SelectConnection(layer, conn, choice, idx, mechanism)
        else:
            conn = _wrap(layer, conn)
    return conn, j


def _wrap(layer, inner) -> Connection:
    try:
        conn = layer.connect_wrap(inner)
    except InitFailure:
        raise
    except Exception as exc:
        raise InitFailure(layer, exc) from exc
    if conn is None:
        raise InitFailure(layer, "connect_wrap returned no connection")
    return conn


class SelectConnection(Connection):
    """Live switching point for one select node.

    Every data-path operation passes through a guard: the locked mechanism
    takes a per-connection lock, the barrier mechanism reads a stop flag and
    parks at a quiescence barrier when a reconfiguration is pending.  The
    guard's exclusive section is the only place the active branch changes.
    """

    def __init__(self, node: SelectNode, inner, choice, index, mechanism):
        self.node = node
        self.inner = inner
        self.mechanism = mechanism
        self.guard = LockedGuard() if mechanism == "locked" else QuiesceGuard()
        self.epoch = 0
        self.branch_index = choice[index]
        self._mechanism_name = mechanism
        branch = node.branch(self.branch_index)
        self._active, _ = _build(
            branch, choice, index + 1 + (0 if self.branch_index == 0 else _count_selects(node.left)),
            inner, mechanism,
        )
        self.data_type = self._active.data_type

    def send(self, msgs):
        with self.guard.enter():
            self._active.send(msgs)

    # Bound on how long a receiver waits for readability between polls; a
    # swap during the wait is picked up on the next poll.
    _POLL_SLICE = 0.02

    def recv(self, slots, timeout=None):
        # Poll under the guard, wait for data outside it, so a receiver
        # never blocks a pending reconfiguration (or, with the locked
        # mechanism, concurrent senders) while idle.
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            with self.guard.enter():
                got = self._active.recv(slots, timeout=0)
            if got:
                return got
            if deadline is not None:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return 0
                self._active.wait_readable(min(remaining, self._POLL_SLICE))
            else:
                self._active.wait_readable(self._POLL_SLICE)

    def wait_readable(self, timeout=None):
        return self._active.wait_readable(timeout)

    def close(self):
        self._active.close()

    @property
    def local_endpoint(self):
        return self._active.local_endpoint

    def export_state(self):
        return self._active.export_state()

    def import_state(self, state):
        self._active.import_state(state)

    def _children(self):
        return [self._active]

    def iter_selects(self):
        yield self
        yield from self._active.iter_selects()

    @property
    def active_connection(self):
        return self._active

    def swap(self, target_branch: int, sub_choice=None) -> None:
        """Initialize the target branch, transfer state, and switch.

        The new datapath is built outside the exclusive section; the state
        export/import and pointer swap happen inside it, so the guard's
        release (lock release or barrier resolution) is the switching point.
        On InitFailure the old implementation remains active.
        """
        branch = self.node.branch(target_branch)
        n_selects = _count_selects(branch)
        bits = tuple(sub_choice or ()) or (0,) * n_selects
        if len(bits) != n_selects:
            raise ValueError("sub-choice length mismatch for target branch")
        fresh, _ = _build(branch, bits, 0, self.inner, self.mechanism)
        with self.guard.exclusive():
            old = self._active
            state = old.export_state()
            try:
                fresh.import_state(state)
            except Exception as exc:
                raise InitFailure(branch, exc) from exc
            self._active = fresh
            self.branch_index = target_branch
            self.epoch += 1
        if hasattr(old, "detach"):
            old.detach()


class ClosedConnection(Connection):
    """Terminal datapath: every operation reports ConnectionClosed."""

    def send(self, msgs):
        raise ConnectionClosed("connection is closed")

    def recv(self, slots, timeout=None):
        raise ConnectionClosed("connection is closed")
