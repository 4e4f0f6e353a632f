"""Stack assembly, candidate enumeration, instantiation, datapath semantics."""

import itertools
import random

import pytest

from chunnel.chunnels import NoopChunnel, SerializeChunnel
from chunnel.core import (
    Chunnel,
    SelectNode,
    TransformConnection,
    concrete_layers,
    enumerate_candidates,
    instantiate,
    make_stack,
)
from chunnel.errors import ConnectionClosed, InitFailure, NoBootstrapLayer, TypeMismatch
from chunnel.transport import DatagramChunnel, Endpoint, SimNet


class FakeLayer(Chunnel):
    """Named, typed no-op for assembly tests."""

    def __init__(self, name, input_type=None, output_type=None, bootstrap=False):
        self.name = name
        self.input_type = "unit" if bootstrap else input_type
        self.output_type = output_type

    def connect_wrap(self, inner):
        return _Passthrough(inner, self.output_type)

    def __repr__(self):
        return self.name


class _Passthrough(TransformConnection):
    def __init__(self, inner, out_type):
        super().__init__(inner, data_type=out_type)


class ByteMap(Chunnel):
    """Reversible per-byte transform; two of these compose non-commutatively."""

    input_type = "bytes"
    output_type = "bytes"

    def __init__(self, enc, dec):
        self._enc = enc
        self._dec = dec

    def connect_wrap(self, inner):
        chunnel = self

        class Conn(TransformConnection):
            def transform_send(self, addr, payload):
                yield addr, chunnel._enc(payload)

            def transform_recv(self, addr, payload):
                yield addr, chunnel._dec(payload)

        return Conn(inner)


def unit_base(name="A", output="bytes"):
    return FakeLayer(name, bootstrap=True, output_type=output)


# --- make_stack -------------------------------------------------------------------


def test_make_stack_listing_order():
    # serialize on top, sharding in the middle, transport at the bottom
    from chunnel.chunnels import ShardChunnel, ShardMap

    shard = ShardChunnel("client", ShardMap((Endpoint("s", 1),)))
    spec = make_stack([SerializeChunnel("fmtA"), shard, unit_base("udp")])
    assert len(spec.layers) == 3
    assert spec.top_type == "record"


def test_make_stack_two_layers_types_chain():
    spec = make_stack([SerializeChunnel("fmtA"), unit_base("udp")])
    assert spec.top_type == "record"
    assert spec.bottom_type == "unit"


def test_make_stack_transport_on_top_rejected():
    with pytest.raises(NoBootstrapLayer):
        make_stack([unit_base("udp"), SerializeChunnel("fmtA")])


def test_make_stack_type_mismatch_detected_before_connection():
    wants_record = FakeLayer("R", input_type="record", output_type="record")
    with pytest.raises(TypeMismatch):
        make_stack([wants_record, unit_base("udp", output="bytes")])


def test_make_stack_empty_rejected():
    with pytest.raises(ValueError):
        make_stack([])


def test_select_branches_must_agree_on_types():
    good = SelectNode([SerializeChunnel("fmtA")], [SerializeChunnel("fmtB")])
    make_stack([good, unit_base()])
    bad = SelectNode([SerializeChunnel("fmtA")], [NoopChunnel()])
    with pytest.raises(TypeMismatch):
        make_stack([bad, unit_base()])


def test_select_bottom_requires_bootstrap_both_branches():
    node = SelectNode([unit_base("a")], [SerializeChunnel("fmtA")])
    with pytest.raises(NoBootstrapLayer):
        make_stack([NoopChunnel(), node])


# --- enumerate_candidates ------------------------------------------------------------


def test_no_selects_single_empty_candidate():
    spec = make_stack([NoopChunnel(), unit_base()])
    assert enumerate_candidates(spec) == [()]


def test_two_independent_selects_cartesian_left_first():
    spec = make_stack(
        [
            SelectNode([FakeLayer("A")], [FakeLayer("B")]),
            SelectNode([FakeLayer("C")], [FakeLayer("D")]),
            unit_base(),
        ]
    )
    assert enumerate_candidates(spec) == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_nested_select_three_leaves_in_preference_order():
    A, B, C = FakeLayer("A"), FakeLayer("B"), FakeLayer("C")
    spec = make_stack([SelectNode([A], [SelectNode([B], [C])]), unit_base()])
    cands = enumerate_candidates(spec)
    assert len(cands) == 3
    resolved = [concrete_layers(spec, c) for c in cands]
    assert [r[0].name for r in resolved] == ["A", "B", "C"]


def _brute_force_leaves(layers):
    """Independent oracle: pre-order expansion of the select tree."""
    if not layers:
        return [[]]
    head, rest = layers[0], layers[1:]
    tails = _brute_force_leaves(rest)
    if isinstance(head, SelectNode):
        out = []
        for branch in (head.left, head.right):
            for prefix in _brute_force_leaves(list(branch)):
                out.extend([prefix + t for t in tails])
        return out
    return [[head] + t for t in tails]


def test_enumeration_matches_brute_force_oracle():
    rng = random.Random(5)

    def random_layers(depth, rng):
        n = rng.randrange(1, 3)
        layers = []
        for i in range(n):
            if depth < 2 and rng.random() < 0.5:
                layers.append(
                    SelectNode(random_layers(depth + 1, rng), random_layers(depth + 1, rng))
                )
            else:
                layers.append(FakeLayer(f"L{depth}.{i}.{rng.randrange(1000)}"))
        return layers

    for _ in range(50):
        layers = random_layers(0, rng) + [unit_base()]
        spec = make_stack(layers)
        cands = enumerate_candidates(spec)
        expected = _brute_force_leaves(list(spec.layers))
        resolved = [list(concrete_layers(spec, c)) for c in cands]
        assert resolved == expected  # bijection onto leaves, preference order
        assert len(set(map(tuple, resolved))) == len(resolved)
        assert cands[0] == (0,) * spec.select_count  # all-left first
        assert cands == sorted(cands)  # lexicographic == preference order


def test_candidate_length_always_select_count():
    spec = make_stack(
        [SelectNode([FakeLayer("A")], [SelectNode([FakeLayer("B")], [FakeLayer("C")])]), unit_base()]
    )
    for cand in enumerate_candidates(spec):
        assert len(cand) == spec.select_count == 2


# --- instantiate / send / recv ---------------------------------------------------------


def bound_pair(net=None, layers_fn=lambda: [NoopChunnel()]):
    net = net or SimNet()
    a = instantiate(make_stack(layers_fn() + [DatagramChunnel(net, Endpoint("t", 1))]), (0,) * 0 or ())
    b = instantiate(make_stack(layers_fn() + [DatagramChunnel(net, Endpoint("t", 2))]), ())
    return net, a, b


def test_noop_over_memory_base_roundtrip():
    _, a, b = bound_pair()
    a.send([(Endpoint("t", 2), b"x")])
    slots = [None] * 4
    assert b.recv(slots, timeout=1) == 1
    assert slots[0] == (Endpoint("t", 1), b"x")


def test_five_noops_wire_bytes_equal_input():
    net = SimNet(record_trace=True)
    _, a, b = bound_pair(net, lambda: [NoopChunnel() for _ in range(5)])
    payload = b"payload-bytes"
    a.send([(Endpoint("t", 2), payload)])
    assert net.trace[-1][3] == payload  # wire capture oracle
    slots = [None] * 2
    assert b.recv(slots, timeout=1) == 1
    assert slots[0][1] == payload


def test_empty_batch_no_wire_activity():
    net = SimNet(record_trace=True)
    _, a, _b = bound_pair(net)
    a.send([])
    assert net.trace == []


def test_batch_order_preserved():
    _, a, b = bound_pair()
    msgs = [(Endpoint("t", 2), bytes([i])) for i in range(10)]
    a.send(msgs)
    slots = [None] * 16
    got = b.recv(slots, timeout=1)
    assert [slots[i][1] for i in range(got)] == [bytes([i]) for i in range(10)]


def test_serialize_layer_wire_equals_independent_encoder():
    from chunnel.chunnels import Record, encode_fmt_a

    net = SimNet(record_trace=True)
    spec = make_stack([SerializeChunnel("fmtA"), DatagramChunnel(net, Endpoint("t", 1))])
    conn = instantiate(spec, ())
    net.bind(Endpoint("t", 2))
    rec = Record("key", b"value", group=3, seq=4)
    conn.send([(Endpoint("t", 2), rec)])
    assert net.trace[-1][3] == encode_fmt_a(rec)


def test_recv_slot_semantics():
    _, a, b = bound_pair()
    a.send([(Endpoint("t", 2), bytes([i])) for i in range(6)])
    slots = [None] * 4
    assert b.recv(slots, timeout=1) == 4
    assert b.recv(slots, timeout=1) == 2  # no loss across calls


def test_recv_on_closed_connection():
    _, a, b = bound_pair()
    b.close()
    with pytest.raises(ConnectionClosed):
        b.recv([None] * 4, timeout=0)


def test_init_failure_carries_layer():
    class Exploding(Chunnel):
        def connect_wrap(self, inner):
            raise RuntimeError("boom")

        def __repr__(self):
            return "Exploding"

    net = SimNet()
    spec = make_stack([Exploding(), DatagramChunnel(net, Endpoint("t", 9))])
    with pytest.raises(InitFailure) as err:
        instantiate(spec, ())
    assert "Exploding" in str(err.value)


# --- composition properties ---------------------------------------------------------------


def _xor_layer(k):
    return ByteMap(
        lambda p, k=k: bytes(b ^ k for b in p), lambda p, k=k: bytes(b ^ k for b in p)
    )


def _add_layer(k):
    return ByteMap(
        lambda p, k=k: bytes((b + k) % 256 for b in p),
        lambda p, k=k: bytes((b - k) % 256 for b in p),
    )


def _wire_bytes(layers):
    net = SimNet(record_trace=True)
    conn = instantiate(make_stack(layers + [DatagramChunnel(net, Endpoint("t", 1))]), ())
    net.bind(Endpoint("t", 2))
    conn.send([(Endpoint("t", 2), b"\x01\x02\x03\x80")])
    return net.trace[-1][3]


def test_composition_not_commutative():
    f, g = _xor_layer(0x55), _add_layer(7)
    assert _wire_bytes([f, g]) != _wire_bytes([g, f])


def test_composition_associative():
    f, g, h = _xor_layer(0x11), _add_layer(3), _xor_layer(0xF0)
    # Grouping cannot matter: the stack is a flat ordered composition, so
    # [f, g, h] built as one stack equals building [f] over [g, h]'s wire.
    assert _wire_bytes([f, g, h]) == _wire_bytes([f] + [g, h])


def test_roundtrip_property_random_stacks():
    rng = random.Random(9)
    for _ in range(25):
        layers = [
            rng.choice([_xor_layer(rng.randrange(256)), _add_layer(rng.randrange(256)), NoopChunnel()])
            for _ in range(rng.randrange(0, 4))
        ]
        net = SimNet()
        a = instantiate(make_stack(list(layers) + [DatagramChunnel(net, Endpoint("t", 1))]), ())
        b = instantiate(make_stack(list(layers) + [DatagramChunnel(net, Endpoint("t", 2))]), ())
        for _ in range(5):
            payload = rng.randbytes(rng.randrange(0, 200))
            a.send([(Endpoint("t", 2), payload)])
            slots = [None] * 2
            assert b.recv(slots, timeout=1) == 1
            assert slots[0][1] == payload


def test_instantiate_builds_bottom_up_applying_choice():
    A, B = FakeLayer("A", output_type="bytes"), FakeLayer("B", output_type="bytes")
    net = SimNet()
    spec = make_stack([SelectNode([A], [B]), DatagramChunnel(net, Endpoint("t", 5))])
    conn = instantiate(spec, (1,))
    sel = next(iter(conn.iter_selects()))
    assert sel.branch_index == 1


def test_one_to_many_expansion_allowed():
    class Fragment(Chunnel):
        input_type = "bytes"
        output_type = "bytes"

        def connect_wrap(self, inner):
            class Conn(TransformConnection):
                def transform_send(self, addr, payload):
                    half = (len(payload) + 1) // 2
                    yield addr, payload[:half]
                    yield addr, payload[half:]

            return Conn(inner)

    net = SimNet()
    a = instantiate(make_stack([Fragment(), DatagramChunnel(net, Endpoint("t", 1))]), ())
    b = net.bind(Endpoint("t", 2))
    a.send([(Endpoint("t", 2), b"abcd")])
    assert b.recv_from(timeout=1)[1] == b"ab"
    assert b.recv_from(timeout=1)[1] == b"cd"
