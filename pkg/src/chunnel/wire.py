"""Wire encodings: frames, canonical offers, nonces, stack fingerprints.

Frame layout (all integers big-endian):

    tag      1 byte   (see TAG_* constants; anything else is invalid)
    flags    1 byte   (reserved, must be 0)
    connid   8 bytes
    seq      8 bytes
    length   4 bytes  (payload byte count)
    payload  `length` bytes

Offer payload layout (canonical: equal offers encode to identical bytes):

    candidate_count  2 bytes
    per candidate:
        branch_count 2 bytes
        branch bits  ceil(branch_count / 8) bytes, MSB-first, zero padding
        layer_count  2 bytes
        per layer entry:
            universe    2-byte length + UTF-8
            match mode  1 byte (0 exact, 1 compositional)
            label_count 2 bytes
            labels      sorted; each 2-byte length + UTF-8

Nonce layout: 32-byte fingerprint + 2-byte branch count + branch bits
(MSB-first, zero padding).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

from .core import CapabilityDescriptor
from .errors import (
    CapabilityModeConflict,
    MalformedFrame,
    MalformedNonce,
    MalformedOffer,
)

TAG_DATA = 0x00
TAG_HELLO = 0x01
TAG_ACCEPT = 0x02
TAG_REJECT = 0x03
TAG_ZRTT_HELLO = 0x04
TAG_ZRTT_FAIL = 0x05
TAG_PREPARE = 0x06
TAG_VOTE = 0x07
TAG_COMMIT = 0x08
TAG_ABORT = 0x09
TAG_ACK = 0x0A

VALID_TAGS = frozenset(range(0x0B))
CONTROL_TAGS = frozenset(VALID_TAGS - {TAG_DATA, TAG_ACK})

TAG_NAMES = {
    TAG_DATA: "DATA",
    TAG_HELLO: "HELLO",
    TAG_ACCEPT: "ACCEPT",
    TAG_REJECT: "REJECT",
    TAG_ZRTT_HELLO: "ZRTT_HELLO",
    TAG_ZRTT_FAIL: "ZRTT_FAIL",
    TAG_PREPARE: "PREPARE",
    TAG_VOTE: "VOTE",
    TAG_COMMIT: "COMMIT",
    TAG_ABORT: "ABORT",
    TAG_ACK: "ACK",
}

_HEADER = struct.Struct(">BBQQI")
HEADER_LEN = _HEADER.size  # 22 bytes
FINGERPRINT_LEN = 32


@dataclass(frozen=True)
class Frame:
    tag: int
    connid: int
    seq: int
    payload: bytes = b""
    flags: int = 0

    def __post_init__(self):
        if self.tag not in VALID_TAGS:
            raise ValueError(f"invalid frame tag 0x{self.tag:02x}")
        if self.flags != 0:
            raise ValueError("flags byte is reserved and must be 0")
        if len(self.payload) >= 1 << 32:
            raise ValueError("payload too long for a 4-byte length")

    @property
    def tag_name(self) -> str:
        return TAG_NAMES[self.tag]


def encode_frame(frame: Frame) -> bytes:
    return (
        _HEADER.pack(frame.tag, frame.flags, frame.connid, frame.seq, len(frame.payload))
        + frame.payload
    )


def decode_frame(data: bytes) -> Frame:
    """Strict decode: the buffer must hold exactly one frame."""
    frame, rest = split_frame(data)
    if rest:
        raise MalformedFrame(f"{len(rest)} trailing bytes after frame")
    return frame


def split_frame(data: bytes) -> tuple[Frame, bytes]:
    """Decode one frame from the front of a buffer, returning the remainder."""
    if len(data) < HEADER_LEN:
        raise MalformedFrame(f"truncated header: {len(data)} < {HEADER_LEN} bytes")
    tag, flags, connid, seq, length = _HEADER.unpack_from(data)
    if tag not in VALID_TAGS:
        raise MalformedFrame(f"invalid tag 0x{tag:02x}")
    if flags != 0:
        raise MalformedFrame(f"reserved flags byte is 0x{flags:02x}")
    end = HEADER_LEN + length
    if len(data) < end:
        raise MalformedFrame(f"declared length {length} exceeds available bytes")
    return Frame(tag, connid, seq, bytes(data[HEADER_LEN:end]), flags), data[end:]


# --- primitive readers/writers -------------------------------------------------


class _Reader:
    def __init__(self, data: bytes, err):
        self.data = data
        self.pos = 0
        self.err = err

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise self.err(f"truncated at byte {self.pos}: need {n} more")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return int.from_bytes(self.take(2), "big")

    def u64(self) -> int:
        return int.from_bytes(self.take(8), "big")

    def string(self) -> str:
        n = self.u16()
        raw = self.take(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise self.err(f"invalid UTF-8 at byte {self.pos}") from exc

    def done(self) -> bool:
        return self.pos == len(self.data)


def _u16(n: int) -> bytes:
    if not 0 <= n < 1 << 16:
        raise ValueError(f"{n} out of range for u16")
    return n.to_bytes(2, "big")


def _u64(n: int) -> bytes:
    return n.to_bytes(8, "big")


def _string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return _u16(len(raw)) + raw


def pack_bits(bits) -> bytes:
    out = bytearray((len(bits) + 7) // 8)
    for i, b in enumerate(bits):
        if b:
            out[i // 8] |= 0x80 >> (i % 8)
    return bytes(out)


def unpack_bits(data: bytes, count: int, err=MalformedNonce) -> tuple:
    need = (count + 7) // 8
    if len(data) != need:
        raise err(f"branch bits: expected {need} bytes, got {len(data)}")
    bits = tuple((data[i // 8] >> (7 - i % 8)) & 1 for i in range(count))
    # Padding bits must be zero for the encoding to be canonical.
    for i in range(count, need * 8):
        if (data[i // 8] >> (7 - i % 8)) & 1:
            raise err("nonzero padding bit")
    return bits


# --- capability entries and offers ---------------------------------------------

MODE_BYTE = {"exact": 0, "compositional": 1}
MODE_NAME = {0: "exact", 1: "compositional"}


@dataclass(frozen=True)
class OfferCandidate:
    """One concrete stack option: its branch bits and capability entries."""

    bits: tuple
    entries: tuple  # CapabilityDescriptor, top-to-bottom

    def capability_map(self):
        return capability_map(self.entries)


def encode_entries(entries) -> bytes:
    out = [_u16(len(entries))]
    for cap in entries:
        out.append(_string(cap.universe))
        out.append(bytes([MODE_BYTE[cap.mode]]))
        labels = sorted(cap.labels)
        out.append(_u16(len(labels)))
        for label in labels:
            out.append(_string(label))
    return b"".join(out)


def _read_entries(r: _Reader) -> tuple:
    n_layers = r.u16()
    entries = []
    for _ in range(n_layers):
        universe = r.string()
        mode_b = r.u8()
        if mode_b not in MODE_NAME:
            raise MalformedOffer(f"invalid match mode byte 0x{mode_b:02x}")
        n_labels = r.u16()
        if n_labels == 0:
            raise MalformedOffer(f"empty label set for universe {universe!r}")
        labels = [r.string() for _ in range(n_labels)]
        if labels != sorted(labels) or len(set(labels)) != len(labels):
            raise MalformedOffer(f"labels not in canonical order for {universe!r}")
        entries.append(
            CapabilityDescriptor(universe, MODE_NAME[mode_b], frozenset(labels))
        )
    return tuple(entries)


def decode_entries(data: bytes) -> tuple:
    r = _Reader(data, MalformedOffer)
    entries = _read_entries(r)
    if not r.done():
        raise MalformedOffer("trailing bytes after entries")
    return entries


def encode_offer(candidates) -> bytes:
    out = [_u16(len(candidates))]
    for cand in candidates:
        out.append(_u16(len(cand.bits)))
        out.append(pack_bits(cand.bits))
        out.append(encode_entries(cand.entries))
    return b"".join(out)


def decode_offer(data: bytes) -> tuple:
    r = _Reader(data, MalformedOffer)
    n = r.u16()
    if n == 0:
        raise MalformedOffer("offer lists no candidates")
    candidates = []
    for _ in range(n):
        n_bits = r.u16()
        bits = unpack_bits(r.take((n_bits + 7) // 8), n_bits, MalformedOffer)
        entries = _read_entries(r)
        candidates.append(OfferCandidate(bits, entries))
    if not r.done():
        raise MalformedOffer("trailing bytes after offer")
    return tuple(candidates)


def capability_map(entries) -> dict:
    """Aggregate entries into universe -> (mode, union of labels).

    A universe declared with two different match modes in one stack is a
    configuration error.
    """
    out: dict[str, tuple[str, frozenset]] = {}
    for cap in entries:
        if cap.universe in out:
            mode, labels = out[cap.universe]
            if mode != cap.mode:
                raise CapabilityModeConflict(
                    f"universe {cap.universe!r} declared both {mode} and {cap.mode}"
                )
            out[cap.universe] = (mode, labels | cap.labels)
        else:
            out[cap.universe] = (cap.mode, frozenset(cap.labels))
    return out


# --- agreed stacks and fingerprints ---------------------------------------------


def encode_capability_map(agreed: dict) -> bytes:
    """Canonical bytes for an agreed stack (universe -> (mode, labels))."""
    out = [_u16(len(agreed))]
    for universe in sorted(agreed):
        mode, labels = agreed[universe]
        out.append(_string(universe))
        out.append(bytes([MODE_BYTE[mode]]))
        labels = sorted(labels)
        out.append(_u16(len(labels)))
        for label in labels:
            out.append(_string(label))
    return b"".join(out)


def decode_capability_map(data: bytes) -> dict:
    r = _Reader(data, MalformedOffer)
    n = r.u16()
    out = {}
    for _ in range(n):
        universe = r.string()
        mode_b = r.u8()
        if mode_b not in MODE_NAME:
            raise MalformedOffer(f"invalid match mode byte 0x{mode_b:02x}")
        n_labels = r.u16()
        labels = frozenset(r.string() for _ in range(n_labels))
        out[universe] = (MODE_NAME[mode_b], labels)
    if not r.done():
        raise MalformedOffer("trailing bytes after capability map")
    return out


def stack_fingerprint(agreed: dict) -> bytes:
    """Collision-resistant 32-byte hash of the canonical agreed encoding."""
    h = hashlib.sha256(b"chunnel-stack-v1")
    h.update(encode_capability_map(agreed))
    return h.digest()


# --- nonces ---------------------------------------------------------------------


def encode_nonce(choice, fingerprint: bytes) -> bytes:
    if len(fingerprint) != FINGERPRINT_LEN:
        raise ValueError(f"fingerprint must be {FINGERPRINT_LEN} bytes")
    return fingerprint + _u16(len(choice)) + pack_bits(choice)


def decode_nonce(data: bytes) -> tuple:
    """Returns (choice bits, fingerprint); exact inverse of encode_nonce."""
    if len(data) < FINGERPRINT_LEN + 2:
        raise MalformedNonce(f"nonce too short: {len(data)} bytes")
    fingerprint = data[:FINGERPRINT_LEN]
    count = int.from_bytes(data[FINGERPRINT_LEN : FINGERPRINT_LEN + 2], "big")
    bits = unpack_bits(data[FINGERPRINT_LEN + 2 :], count)
    return bits, fingerprint


# --- small composite payloads ----------------------------------------------------


def encode_lp(blob: bytes) -> bytes:
    """2-byte length prefix, used to nest variable parts in payloads."""
    if len(blob) >= 1 << 16:
        raise ValueError("blob too long for a 2-byte length prefix")
    return _u16(len(blob)) + blob


@dataclass
class PayloadReader:
    """Reader over a frame payload with a configurable error type."""

    data: bytes
    err: type = field(default=MalformedFrame)

    def __post_init__(self):
        self._r = _Reader(self.data, self.err)

    def lp(self) -> bytes:
        return self._r.take(self._r.u16())

    def u8(self) -> int:
        return self._r.u8()

    def u64(self) -> int:
        return self._r.u64()

    def string(self) -> str:
        return self._r.string()

    def rest(self) -> bytes:
        out = self.data[self._r.pos :]
        self._r.pos = len(self.data)
        return out

    def done(self) -> bool:
        return self._r.done()


def encode_string(s: str) -> bytes:
    return _string(s)
