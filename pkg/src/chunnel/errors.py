"""Exception hierarchy shared by all chunnel subsystems."""


class ChunnelError(Exception):
    """Base class for every error raised by this library."""


# --- stack assembly ---------------------------------------------------------

class TypeMismatch(ChunnelError):
    """Adjacent layers in a stack have incompatible data types."""

    def __init__(self, lower, upper, produced, required):
        self.lower = lower
        self.upper = upper
        self.produced = produced
        self.required = required
        super().__init__(
            f"layer {upper!r} requires {required!r} but layer "
            f"{lower!r} produces {produced!r}"
        )


class NoBootstrapLayer(ChunnelError):
    """The bottom layer of a stack cannot create a base connection."""


class InitFailure(ChunnelError):
    """A layer's connect_wrap failed; carries the offending layer."""

    def __init__(self, layer, cause=None):
        self.layer = layer
        self.cause = cause
        super().__init__(f"failed to initialize layer {layer!r}: {cause}")


class IncompatibleState(ChunnelError):
    """A replacement datapath cannot import the exported state."""


# --- datapath ---------------------------------------------------------------

class ConnectionClosed(ChunnelError):
    """I/O attempted on a closed connection."""


class PayloadTooLarge(ChunnelError):
    """Datagram payload exceeds the 64 KiB limit."""


class AddressInUse(ChunnelError):
    """Endpoint already bound on this network."""


class DecodeError(ChunnelError):
    """Payload bytes do not parse under the expected format."""


class EmptyKey(ChunnelError):
    """Sharded traffic requires a non-empty key."""


# --- wire protocol ----------------------------------------------------------

class MalformedFrame(DecodeError):
    """Frame bytes violate the wire layout."""


class MalformedOffer(DecodeError):
    """Offer payload bytes violate the canonical offer encoding."""


class MalformedNonce(DecodeError):
    """Nonce bytes violate the nonce layout."""


class PeerUnreachable(ChunnelError):
    """Retransmission budget exhausted without an acknowledgment."""


# --- negotiation ------------------------------------------------------------

class NoCompatibleStack(ChunnelError):
    """No (server, client) candidate pair satisfies the compatibility rule."""


class NegotiationRejected(ChunnelError):
    """Peer rejected the negotiation; carries the reason string."""

    def __init__(self, reason):
        self.reason = reason
        super().__init__(reason)


class CapabilityModeConflict(ChunnelError):
    """One capability universe declared with two different match modes."""


# --- rendezvous -------------------------------------------------------------

class StoreUnavailable(ChunnelError):
    """The rendezvous key-value store cannot be reached."""


class NotJoined(ChunnelError):
    """leave() called by a participant that never joined."""


class CasConflict(ChunnelError):
    """A concurrent transition won the compare-and-swap race."""


# --- reconfiguration --------------------------------------------------------

class ReconfigError(ChunnelError):
    """Base class for reconfiguration failures."""


class BarrierTimeout(ReconfigError):
    """A registered thread failed to reach the quiescence barrier in time."""


class Aborted(ReconfigError):
    """A multilateral transition aborted; carries the vetoing peer or reason."""

    def __init__(self, who, reason):
        self.who = who
        self.reason = reason
        super().__init__(f"aborted by {who}: {reason}")
