"""Logical message payloads carried inside transport frames.

Every multi-octet integer is big-endian; field elements use the
fixed-width little-endian encoding of their field (ceil(m/8) octets)
and each element-carrying message names its Mersenne exponent so the
receiver can decode without out-of-band context.  Quorums travel as a
64-bit bitmap with bit j-1 set for server j.

Messages larger than one frame payload are chunked by the channel
layer, not here.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .field import mersenne_field

# message type octets (also used as frame msg_type)
STORE_BUNDLE = 0x01
STORE_ACK = 0x02
PRECOMP_START = 0x10
PRECOMP_CONTRIB = 0x11
PRECOMP_DONE = 0x12
RECON_REQUEST = 0x20
RECON_RESPONSE = 0x21
KSA_REQUEST = 0x30
KSA_RESPONSE = 0x31
KEYSTATS_REQUEST = 0x32
KEYSTATS_RESPONSE = 0x33
KSA_FETCH = 0x34
ERROR = 0x7F

# phase attribution for key-consumption accounting
PHASE_REGISTER = "register"
PHASE_PRECOMPUTE = "precompute"
PHASE_RECONSTRUCT = "reconstruct"
PHASE_OVERHEAD = "overhead"

PHASE_OF = {
    STORE_BUNDLE: PHASE_REGISTER,
    STORE_ACK: PHASE_REGISTER,
    PRECOMP_START: PHASE_PRECOMPUTE,
    PRECOMP_CONTRIB: PHASE_PRECOMPUTE,
    PRECOMP_DONE: PHASE_PRECOMPUTE,
    RECON_REQUEST: PHASE_RECONSTRUCT,
    RECON_RESPONSE: PHASE_RECONSTRUCT,
    KSA_REQUEST: PHASE_OVERHEAD,
    KSA_RESPONSE: PHASE_OVERHEAD,
    KEYSTATS_REQUEST: PHASE_OVERHEAD,
    KEYSTATS_RESPONSE: PHASE_OVERHEAD,
    KSA_FETCH: PHASE_OVERHEAD,
    ERROR: PHASE_OVERHEAD,
}

# error codes
E_DUPLICATE = 1
E_MALFORMED = 2
E_UNKNOWN_DATA = 3
E_QUORUM_REJECTED = 4
E_POOL_EXHAUSTED = 5   # retryable
E_RATE_LIMITED = 6
E_KEY_EXHAUSTED = 7    # retryable
E_UNAUTHORIZED = 8
E_INTERNAL = 9


class MessageError(ValueError):
    """Undecodable or structurally invalid message body."""


def quorum_to_bitmap(quorum) -> int:
    bitmap = 0
    for j in quorum:
        if not 1 <= j <= 64:
            raise MessageError(f"server index {j} does not fit the bitmap")
        bitmap |= 1 << (j - 1)
    return bitmap


def bitmap_to_quorum(bitmap: int) -> tuple:
    return tuple(j + 1 for j in range(64) if bitmap >> j & 1)


def _elems_to_bytes(values, m: int) -> bytes:
    f = mersenne_field(m)
    return b"".join(f.to_bytes(v) for v in values)


def _elems_from_bytes(data: bytes, count: int, m: int) -> tuple:
    f = mersenne_field(m)
    w = f.elem_bytes
    if len(data) != count * w:
        raise MessageError(
            f"expected {count} elements of {w} octets, got {len(data)} octets")
    return tuple(f.from_bytes(data[i * w:(i + 1) * w]) for i in range(count))


@dataclass(frozen=True, slots=True)
class StoreBundleMsg:
    owner_id: int
    data_id: bytes
    m: int
    n: int
    t: int
    byte_length: int
    overwrite: bool
    password_share: int
    data_shares: tuple

    _HEAD = struct.Struct(">Q16sIHHQBI")

    def pack(self) -> bytes:
        head = self._HEAD.pack(self.owner_id, self.data_id, self.m, self.n,
                               self.t, self.byte_length, int(self.overwrite),
                               len(self.data_shares))
        return head + _elems_to_bytes(
            (self.password_share, *self.data_shares), self.m)

    @classmethod
    def unpack(cls, body: bytes) -> "StoreBundleMsg":
        head = cls._HEAD
        (owner_id, data_id, m, n, t, byte_length, overwrite,
         count) = head.unpack(body[:head.size])
        elems = _elems_from_bytes(body[head.size:], count + 1, m)
        return cls(owner_id, data_id, m, n, t, byte_length, bool(overwrite),
                   elems[0], elems[1:])


@dataclass(frozen=True, slots=True)
class StoreAckMsg:
    data_id: bytes

    def pack(self) -> bytes:
        return self.data_id

    @classmethod
    def unpack(cls, body: bytes) -> "StoreAckMsg":
        if len(body) != 16:
            raise MessageError("store ack must carry a 16-octet data id")
        return cls(body)


@dataclass(frozen=True, slots=True)
class PrecompStartMsg:
    data_id: bytes
    round_id: int
    quorum: tuple
    n_sets: int
    initiator: int

    _FMT = struct.Struct(">16sQQIH")

    def pack(self) -> bytes:
        return self._FMT.pack(self.data_id, self.round_id,
                              quorum_to_bitmap(self.quorum), self.n_sets,
                              self.initiator)

    @classmethod
    def unpack(cls, body: bytes) -> "PrecompStartMsg":
        data_id, round_id, bitmap, n_sets, initiator = cls._FMT.unpack(body)
        return cls(data_id, round_id, bitmap_to_quorum(bitmap), n_sets,
                   initiator)


@dataclass(frozen=True, slots=True)
class PrecompContribMsg:
    """Sender's evaluations for the receiver: n_sets (r, z) pairs."""

    data_id: bytes
    round_id: int
    quorum: tuple
    sender: int
    m: int
    pairs: tuple  # ((r_share, z_share), ...) indexed by set

    _HEAD = struct.Struct(">16sQQHI I")

    def pack(self) -> bytes:
        head = self._HEAD.pack(self.data_id, self.round_id,
                               quorum_to_bitmap(self.quorum), self.sender,
                               self.m, len(self.pairs))
        flat = [v for pair in self.pairs for v in pair]
        return head + _elems_to_bytes(flat, self.m)

    @classmethod
    def unpack(cls, body: bytes) -> "PrecompContribMsg":
        head = cls._HEAD
        data_id, round_id, bitmap, sender, m, count = head.unpack(
            body[:head.size])
        flat = _elems_from_bytes(body[head.size:], 2 * count, m)
        pairs = tuple((flat[2 * i], flat[2 * i + 1]) for i in range(count))
        return cls(data_id, round_id, bitmap_to_quorum(bitmap), sender, m,
                   pairs)


@dataclass(frozen=True, slots=True)
class PrecompDoneMsg:
    data_id: bytes
    round_id: int
    responder: int
    committed: int

    _FMT = struct.Struct(">16sQHI")

    def pack(self) -> bytes:
        return self._FMT.pack(self.data_id, self.round_id, self.responder,
                              self.committed)

    @classmethod
    def unpack(cls, body: bytes) -> "PrecompDoneMsg":
        return cls(*cls._FMT.unpack(body))


@dataclass(frozen=True, slots=True)
class ReconRequestMsg:
    owner_id: int
    data_id: bytes
    attempt_id: int
    quorum: tuple
    m: int
    password_share: int

    _HEAD = struct.Struct(">Q16sQQI")

    def pack(self) -> bytes:
        head = self._HEAD.pack(self.owner_id, self.data_id, self.attempt_id,
                               quorum_to_bitmap(self.quorum), self.m)
        return head + _elems_to_bytes((self.password_share,), self.m)

    @classmethod
    def unpack(cls, body: bytes) -> "ReconRequestMsg":
        head = cls._HEAD
        owner_id, data_id, attempt_id, bitmap, m = head.unpack(
            body[:head.size])
        (share,) = _elems_from_bytes(body[head.size:], 1, m)
        return cls(owner_id, data_id, attempt_id, bitmap_to_quorum(bitmap),
                   m, share)


@dataclass(frozen=True, slots=True)
class ReconResponseMsg:
    """All l+1 masked values from one server, plus the identity of the
    mask sets it consumed so the owner can confirm the quorum agreed."""

    data_id: bytes
    attempt_id: int
    server: int
    m: int
    byte_length: int
    binding_first: tuple  # (round_id, set_index)
    binding_fold: int
    values: tuple

    _HEAD = struct.Struct(">16sQHIQQIQI")

    def pack(self) -> bytes:
        head = self._HEAD.pack(self.data_id, self.attempt_id, self.server,
                               self.m, self.byte_length,
                               self.binding_first[0], self.binding_first[1],
                               self.binding_fold, len(self.values))
        return head + _elems_to_bytes(self.values, self.m)

    @classmethod
    def unpack(cls, body: bytes) -> "ReconResponseMsg":
        head = cls._HEAD
        (data_id, attempt_id, server, m, byte_length, b_round, b_index,
         fold, count) = head.unpack(body[:head.size])
        values = _elems_from_bytes(body[head.size:], count, m)
        return cls(data_id, attempt_id, server, m, byte_length,
                   (b_round, b_index), fold, values)


@dataclass(frozen=True, slots=True)
class KsaRequestMsg:
    app_id: int
    local_node: int
    peer_node: int
    n_octets: int
    purpose: str

    _HEAD = struct.Struct(">QHHQ")

    def pack(self) -> bytes:
        tag = self.purpose.encode()
        return self._HEAD.pack(self.app_id, self.local_node, self.peer_node,
                               self.n_octets) + tag

    @classmethod
    def unpack(cls, body: bytes) -> "KsaRequestMsg":
        head = cls._HEAD
        app_id, local_node, peer_node, n_octets = head.unpack(
            body[:head.size])
        return cls(app_id, local_node, peer_node, n_octets,
                   body[head.size:].decode())


@dataclass(frozen=True, slots=True)
class KsaResponseMsg:
    key_id: bytes
    n_octets: int
    expires_at: float
    octets: bytes = b""  # filled only when delivery crosses the wire

    _HEAD = struct.Struct(">16sQd")

    def pack(self) -> bytes:
        return self._HEAD.pack(self.key_id, self.n_octets,
                               self.expires_at) + self.octets

    @classmethod
    def unpack(cls, body: bytes) -> "KsaResponseMsg":
        head = cls._HEAD
        key_id, n_octets, expires_at = head.unpack(body[:head.size])
        return cls(key_id, n_octets, expires_at, body[head.size:])


@dataclass(frozen=True, slots=True)
class KsaFetchMsg:
    """Owner-side request for the octets of a key file delivered to its
    node (the stand-in for local KMA access when the owner talks to its
    KSA over a socket)."""

    app_id: int
    key_id: bytes

    _FMT = struct.Struct(">Q16s")

    def pack(self) -> bytes:
        return self._FMT.pack(self.app_id, self.key_id)

    @classmethod
    def unpack(cls, body: bytes) -> "KsaFetchMsg":
        return cls(*cls._FMT.unpack(body))


@dataclass(frozen=True, slots=True)
class KeystatsRequestMsg:
    def pack(self) -> bytes:
        return b""

    @classmethod
    def unpack(cls, body: bytes) -> "KeystatsRequestMsg":
        return cls()


@dataclass(frozen=True, slots=True)
class KeystatsResponseMsg:
    """Per-phase consumed key octets plus total delivered octets."""

    consumed: tuple  # ((phase, octets), ...)
    delivered: int

    def pack(self) -> bytes:
        out = struct.pack(">QH", self.delivered, len(self.consumed))
        for phase, octets in self.consumed:
            tag = phase.encode()
            out += struct.pack(">BQ", len(tag), octets) + tag
        return out

    @classmethod
    def unpack(cls, body: bytes) -> "KeystatsResponseMsg":
        delivered, count = struct.unpack(">QH", body[:10])
        pos = 10
        consumed = []
        for _ in range(count):
            tag_len, octets = struct.unpack(">BQ", body[pos:pos + 9])
            pos += 9
            consumed.append((body[pos:pos + tag_len].decode(), octets))
            pos += tag_len
        return cls(tuple(consumed), delivered)


@dataclass(frozen=True, slots=True)
class ErrorMsg:
    code: int
    retryable: bool
    detail: str

    def pack(self) -> bytes:
        return struct.pack(">HB", self.code, int(self.retryable)) + \
            self.detail.encode()

    @classmethod
    def unpack(cls, body: bytes) -> "ErrorMsg":
        code, retryable = struct.unpack(">HB", body[:3])
        return cls(code, bool(retryable), body[3:].decode())


_TYPES = {
    STORE_BUNDLE: StoreBundleMsg,
    STORE_ACK: StoreAckMsg,
    PRECOMP_START: PrecompStartMsg,
    PRECOMP_CONTRIB: PrecompContribMsg,
    PRECOMP_DONE: PrecompDoneMsg,
    RECON_REQUEST: ReconRequestMsg,
    RECON_RESPONSE: ReconResponseMsg,
    KSA_REQUEST: KsaRequestMsg,
    KSA_RESPONSE: KsaResponseMsg,
    KEYSTATS_REQUEST: KeystatsRequestMsg,
    KEYSTATS_RESPONSE: KeystatsResponseMsg,
    KSA_FETCH: KsaFetchMsg,
    ERROR: ErrorMsg,
}

_TYPE_OF = {cls: code for code, cls in _TYPES.items()}


def encode_message(msg) -> tuple[int, bytes]:
    try:
        return _TYPE_OF[type(msg)], msg.pack()
    except KeyError:
        raise MessageError(f"unknown message class {type(msg).__name__}") \
            from None


def decode_message(msg_type: int, body: bytes):
    cls = _TYPES.get(msg_type)
    if cls is None:
        raise MessageError(f"unknown message type {msg_type:#x}")
    try:
        return cls.unpack(body)
    except (struct.error, UnicodeDecodeError) as exc:
        raise MessageError(f"undecodable {cls.__name__}: {exc}") from exc
