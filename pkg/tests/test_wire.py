"""Wire conformance: frames, offers, nonces against golden byte vectors."""

import json
import random
import struct
from pathlib import Path

import pytest

from chunnel.core import CapabilityDescriptor
from chunnel.errors import MalformedFrame, MalformedNonce, MalformedOffer
from chunnel.wire import (
    Frame,
    OfferCandidate,
    TAG_DATA,
    TAG_HELLO,
    capability_map,
    decode_capability_map,
    decode_frame,
    decode_nonce,
    decode_offer,
    encode_capability_map,
    encode_frame,
    encode_nonce,
    encode_offer,
    split_frame,
    stack_fingerprint,
)

GOLDEN = json.loads((Path(__file__).parent / "data" / "golden_vectors.json").read_text())


# --- golden vectors -----------------------------------------------------------


@pytest.mark.parametrize("vec", GOLDEN["frames"], ids=lambda v: v["name"])
def test_frame_golden(vec):
    frame = Frame(vec["tag"], vec["connid"], vec["seq"], bytes.fromhex(vec["payload_hex"]))
    assert encode_frame(frame).hex() == vec["bytes_hex"]
    assert decode_frame(bytes.fromhex(vec["bytes_hex"])) == frame


@pytest.mark.parametrize("vec", GOLDEN["nonces"], ids=lambda v: v["name"])
def test_nonce_golden(vec):
    fp = bytes.fromhex(vec["fingerprint_hex"])
    choice = tuple(vec["choice"])
    assert encode_nonce(choice, fp).hex() == vec["bytes_hex"]
    bits, got_fp = decode_nonce(bytes.fromhex(vec["bytes_hex"]))
    assert bits == choice and got_fp == fp


@pytest.mark.parametrize("vec", GOLDEN["offers"], ids=lambda v: v["name"])
def test_offer_golden(vec):
    candidates = [
        OfferCandidate(
            tuple(c["bits"]),
            tuple(
                CapabilityDescriptor(e["universe"], e["mode"], frozenset(e["labels"]))
                for e in c["entries"]
            ),
        )
        for c in vec["candidates"]
    ]
    assert encode_offer(candidates).hex() == vec["bytes_hex"]
    assert decode_offer(bytes.fromhex(vec["bytes_hex"])) == tuple(candidates)


# --- frame layout details ----------------------------------------------------


def test_frame_header_is_22_bytes_big_endian():
    raw = encode_frame(Frame(TAG_HELLO, 0xAABBCCDD, 7, b"xyz"))
    tag, flags, connid, seq, length = struct.unpack(">BBQQI", raw[:22])
    assert (tag, flags, connid, seq, length) == (1, 0, 0xAABBCCDD, 7, 3)
    assert raw[22:] == b"xyz"


def test_frame_roundtrip_generated():
    rng = random.Random(7)
    for _ in range(500):
        frame = Frame(
            rng.choice(range(0x0B)),
            rng.getrandbits(64),
            rng.getrandbits(64),
            rng.randbytes(rng.randrange(0, 64)),
        )
        assert decode_frame(encode_frame(frame)) == frame


def test_truncated_frame_rejected():
    raw = encode_frame(Frame(TAG_DATA, 1, 2, b"hello"))
    for cut in (0, 5, 21, len(raw) - 1):
        with pytest.raises(MalformedFrame):
            decode_frame(raw[:cut])


def test_declared_length_beyond_buffer_rejected():
    raw = bytearray(encode_frame(Frame(TAG_DATA, 1, 2, b"hello")))
    raw[18:22] = (100).to_bytes(4, "big")
    with pytest.raises(MalformedFrame):
        decode_frame(bytes(raw))


def test_invalid_tag_rejected():
    raw = bytearray(encode_frame(Frame(TAG_DATA, 1, 2, b"")))
    raw[0] = 0x0B
    with pytest.raises(MalformedFrame):
        decode_frame(bytes(raw))
    with pytest.raises(ValueError):
        Frame(0x0B, 1, 2, b"")


def test_nonzero_reserved_flags_rejected():
    raw = bytearray(encode_frame(Frame(TAG_DATA, 1, 2, b"")))
    raw[1] = 0x01
    with pytest.raises(MalformedFrame):
        decode_frame(bytes(raw))


def test_trailing_bytes_rejected_but_split_accepts():
    raw = encode_frame(Frame(TAG_DATA, 1, 2, b"ab")) + b"rest"
    with pytest.raises(MalformedFrame):
        decode_frame(raw)
    frame, rest = split_frame(raw)
    assert frame.payload == b"ab" and rest == b"rest"


# --- nonces ----------------------------------------------------------------------


def test_nonce_layout_sizes():
    fp = bytes(32)
    assert len(encode_nonce((), fp)) == 34
    assert len(encode_nonce((0, 1), fp)) == 35
    assert len(encode_nonce((0,) * 9, fp)) == 36
    assert encode_nonce((0, 1), fp)[34] == 0b01000000


def test_nonce_roundtrip_generated():
    rng = random.Random(3)
    for _ in range(1000):
        choice = tuple(rng.randrange(2) for _ in range(rng.randrange(0, 11)))
        fp = rng.randbytes(32)
        assert decode_nonce(encode_nonce(choice, fp)) == (choice, fp)


def test_nonce_nonzero_padding_rejected():
    raw = bytearray(encode_nonce((1,), bytes(32)))
    raw[-1] |= 0x01  # a padding bit
    with pytest.raises(MalformedNonce):
        decode_nonce(bytes(raw))


def test_nonce_truncated_rejected():
    with pytest.raises(MalformedNonce):
        decode_nonce(bytes(20))
    with pytest.raises(MalformedNonce):
        decode_nonce(encode_nonce((1, 1, 1), bytes(32))[:-1])


# --- offers --------------------------------------------------------------------------


def _random_offer(rng):
    universes = [("serialize", "exact"), ("shard", "compositional"), ("order", "compositional")]
    candidates = []
    for _ in range(rng.randrange(1, 5)):
        entries = []
        for universe, mode in rng.sample(universes, rng.randrange(1, 4)):
            labels = frozenset(
                rng.sample(["a", "b", "c", "fmtA", "fmtB"], rng.randrange(1, 4))
            )
            entries.append(CapabilityDescriptor(universe, mode, labels))
        bits = tuple(rng.randrange(2) for _ in range(rng.randrange(0, 4)))
        candidates.append(OfferCandidate(bits, tuple(entries)))
    return candidates


def test_offer_roundtrip_generated():
    rng = random.Random(11)
    for _ in range(300):
        offer = _random_offer(rng)
        assert decode_offer(encode_offer(offer)) == tuple(offer)


def test_offer_canonical_under_label_insertion_order():
    a = CapabilityDescriptor("serialize", "exact", frozenset(["x", "y", "z"]))
    b = CapabilityDescriptor("serialize", "exact", frozenset(["z", "y", "x"]))
    enc_a = encode_offer([OfferCandidate((), (a,))])
    enc_b = encode_offer([OfferCandidate((), (b,))])
    assert enc_a == enc_b


def test_offer_reencode_is_identity():
    rng = random.Random(12)
    for _ in range(200):
        raw = encode_offer(_random_offer(rng))
        assert encode_offer(list(decode_offer(raw))) == raw


def test_offer_unsorted_labels_rejected():
    # Hand-build an offer whose labels are out of order.
    raw = bytes.fromhex("00010000" + "0001" + "0005" + "6f72646572" + "01" + "0002")
    raw += bytes.fromhex("0001" + "62")  # "b"
    raw += bytes.fromhex("0001" + "61")  # "a" after "b": not canonical
    with pytest.raises(MalformedOffer):
        decode_offer(raw)


def test_empty_offer_rejected():
    with pytest.raises(MalformedOffer):
        decode_offer(b"\x00\x00")


# --- capability maps and fingerprints ---------------------------------------------------


def test_capability_map_roundtrip():
    agreed = {
        "serialize": ("exact", frozenset({"fmtA"})),
        "shard": ("compositional", frozenset({"client-shard", "server-shard"})),
    }
    assert decode_capability_map(encode_capability_map(agreed)) == agreed


def test_fingerprint_is_32_bytes_and_order_independent():
    m1 = {
        "serialize": ("exact", frozenset({"fmtA"})),
        "order": ("compositional", frozenset({"recv-side"})),
    }
    m2 = dict(reversed(list(m1.items())))
    assert len(stack_fingerprint(m1)) == 32
    assert stack_fingerprint(m1) == stack_fingerprint(m2)
    m3 = {**m1, "serialize": ("exact", frozenset({"fmtB"}))}
    assert stack_fingerprint(m1) != stack_fingerprint(m3)


def test_capability_map_mode_conflict():
    from chunnel.errors import CapabilityModeConflict

    entries = (
        CapabilityDescriptor("u", "exact", frozenset({"a"})),
        CapabilityDescriptor("u", "compositional", frozenset({"b"})),
    )
    with pytest.raises(CapabilityModeConflict):
        capability_map(entries)


def test_capability_map_unions_labels():
    entries = (
        CapabilityDescriptor("u", "compositional", frozenset({"a"})),
        CapabilityDescriptor("u", "compositional", frozenset({"b"})),
    )
    assert capability_map(entries) == {"u": ("compositional", frozenset({"a", "b"}))}
