"""Composable, negotiable, runtime-reconfigurable connection stacks."""

import logging
import os

from .core import (
    CandidateStack,
    CapabilityDescriptor,
    Chunnel,
    Connection,
    SelectConnection,
    SelectNode,
    StackSpec,
    TransformConnection,
    UNIT,
    concrete_layers,
    enumerate_candidates,
    instantiate,
    make_stack,
)
from .transport import (
    DatagramChunnel,
    Endpoint,
    SimNet,
    SimNetConfig,
    TopicBus,
    TopicChunnel,
    UdpNet,
)
from .control import ControlConfig, DataAdapter, FrameChannel
from .negotiation import (
    Listener,
    NegotiatedConnection,
    NegotiatedStack,
    ZeroRttCache,
    build_offer,
    check_compat,
    client_negotiate,
    client_reconnect_0rtt,
    server_negotiate,
    wait_zrtt_settled,
)
from .reconfig import (
    ReconfigHandle,
    reconfig_handle,
    reconfigure_multilateral,
    reconfigure_unilateral_barrier,
    reconfigure_unilateral_locked,
)
from .rendezvous import (
    InMemoryKvStore,
    JoinOutcome,
    KvStoreClient,
    KvStoreServer,
    PartyConnection,
    join,
    join_party,
    leave,
)
from .chunnels import (
    NoopChunnel,
    OrderingChunnel,
    Record,
    ReliabilityChunnel,
    SerializeChunnel,
    ShardChunnel,
    ShardMap,
    TagChunnel,
    fnv1a64,
)
from . import errors

__version__ = "0.1.0"

_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO, "warning": logging.WARNING}
_env_level = os.environ.get("CHUNNEL_LOG", "").lower()
if _env_level in _LEVELS:
    logging.basicConfig(level=_LEVELS[_env_level])
