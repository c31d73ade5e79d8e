"""One-time-pad encrypted, Wegman-Carter authenticated wire frames.

Every message between owner, servers, and among servers travels in an
AuthFrame: the payload is XORed with never-reused keystream octets and
the whole frame (clear header plus ciphertext) carries a one-time
polynomial-hash tag over GF(2^61 - 1).  Key octets are identified by
(key id, offset) so the receiver, holding the same key file, can locate
the exact pad and tag keys; the header therefore travels in clear but
is covered by the tag.

Wire layout (all header integers big-endian):

    magic      4   b"QSS1"
    version    1
    msg_type   1
    sender     2
    session    8
    sequence   8
    enc key id 16
    enc offset 8
    mac key id 16
    mac offset 8
    length     2   payload octets, <= 1500
    ciphertext length
    tag        8   field element, fixed-width little-endian

Per frame the key cost is exactly payload length + 16 octets: the pad,
plus 8 octets each for the one-time hash key pair (k, b).
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass

from .field import MersennePrime, mersenne_field

FRAME_MAGIC = b"QSS1"
FRAME_VERSION = 1
MAX_PAYLOAD = 1500
TAG_FIELD = mersenne_field(61)
TAG_OCTETS = TAG_FIELD.elem_bytes  # 8
MAC_KEY_OCTETS = 2 * TAG_OCTETS    # one-time (k, b)

_HEADER = struct.Struct(">4sBBHQQ16sQ16sQH")
HEADER_OCTETS = _HEADER.size  # 74


class TransportError(Exception):
    """Base for every frame-level failure."""


class KeyExhausted(TransportError):
    """Not enough unused key material; retryable after a refill."""


class TagMismatch(TransportError):
    """Authentication failed; the payload was not decrypted."""


class ReplayDetected(TransportError):
    """Sequence number did not advance within its session."""


class PadReuse(TransportError):
    """A frame referenced key octets that were already consumed."""


class FrameFormatError(TransportError):
    """Malformed frame bytes."""


class UnknownKey(TransportError):
    """Frame referenced a key id the receiver does not hold."""


@dataclass(frozen=True, slots=True)
class FrameHeader:
    msg_type: int
    sender: int
    session: int
    sequence: int
    enc_key_id: bytes
    enc_offset: int
    mac_key_id: bytes
    mac_offset: int
    length: int


def _hash_block_octets(field: MersennePrime) -> int:
    # blocks carry 8*b + 1 bits after padding and must stay below 2^m - 1
    return (field.m - 2) // 8


def poly_tag(blocks, key: tuple[int, int], field: MersennePrime = TAG_FIELD) -> int:
    """One-time polynomial hash: b + sum m_i * k^i over the field."""
    k, b = key
    acc = 0
    for block in reversed(list(blocks)):
        acc = field.mul(field.add(acc, block), k)
    return field.add(acc, b)


def message_blocks(message: bytes, field: MersennePrime = TAG_FIELD) -> list[int]:
    """Split into hash blocks with an injective length pad.

    Each chunk of floor((m-2)/8) octets gets a 0x01 octet appended
    before little-endian interpretation, so a short final chunk and a
    zero-extended one hash differently and the empty message has no
    blocks at all.
    """
    size = _hash_block_octets(field)
    return [
        int.from_bytes(message[i:i + size] + b"\x01", "little")
        for i in range(0, len(message), size)
    ]


def wc_tag(message: bytes, key: tuple[int, int],
           field: MersennePrime = TAG_FIELD) -> bytes:
    """Tag the message; forgery probability is at most s/q for s blocks."""
    return field.to_bytes(poly_tag(message_blocks(message, field), key, field))


def mac_key_from_octets(octets: bytes,
                        field: MersennePrime = TAG_FIELD) -> tuple[int, int]:
    """Derive the one-time (k, b) pair from 2*ceil(m/8) fresh key octets."""
    w = field.elem_bytes
    if len(octets) != 2 * w:
        raise TransportError(f"need {2 * w} mac key octets, got {len(octets)}")
    k = field.reduce(int.from_bytes(octets[:w], "little"))
    b = field.reduce(int.from_bytes(octets[w:], "little"))
    return k, b


def xor_bytes(data: bytes, pad: bytes) -> bytes:
    if len(data) != len(pad):
        raise TransportError("pad length must equal data length")
    return (int.from_bytes(data, "little")
            ^ int.from_bytes(pad, "little")).to_bytes(len(data), "little")


class KeystreamCursor:
    """Monotonic window over one key file's octets; one writer at a time.

    take(n) either returns (offset, octets) and advances, or raises
    KeyExhausted without consuming anything.
    """

    def __init__(self, key_id: bytes, octets_reader, length: int, start: int = 0):
        self.key_id = key_id
        self._read = octets_reader
        self._length = length
        self._offset = start
        self._lock = threading.Lock()

    @property
    def remaining(self) -> int:
        return self._length - self._offset

    @property
    def next_offset(self) -> int:
        return self._offset

    def take(self, n: int) -> tuple[int, bytes]:
        with self._lock:
            if n > self.remaining:
                raise KeyExhausted(
                    f"key {self.key_id.hex()} has {self.remaining} octets"
                    f" left, need {n}")
            offset = self._offset
            octets = self._read(offset, n)
            self._offset = offset + n
            return offset, octets


class KeyRangeAudit:
    """Tracks consumed (key id, offset, length) ranges and flags overlap.

    Used on the receive path to reject pad reuse, and globally by the
    test harness to audit a whole run.
    """

    def __init__(self):
        self._ranges: dict[bytes, list[tuple[int, int]]] = {}
        self._lock = threading.Lock()

    def _overlaps(self, key_id: bytes, start: int, length: int) -> bool:
        end = start + length
        for s, e in self._ranges.get(key_id, ()):
            if s < end and start < e:
                return True
        return False

    def check(self, key_id: bytes, start: int, length: int):
        if length and self._overlaps(key_id, start, length):
            raise PadReuse(
                f"key {key_id.hex()} range [{start}, {start + length})"
                f" already consumed")

    def record(self, key_id: bytes, start: int, length: int):
        if length == 0:
            return
        with self._lock:
            self.check(key_id, start, length)
            self._ranges.setdefault(key_id, []).append((start, start + length))

    def total_octets(self) -> int:
        return sum(e - s for spans in self._ranges.values() for s, e in spans)


def seal(plaintext: bytes, msg_type: int, sender: int, session: int,
         sequence: int, enc_cursor: KeystreamCursor,
         mac_cursor: KeystreamCursor,
         audit: KeyRangeAudit | None = None) -> bytes:
    """Build one frame, consuming len(plaintext) pad octets and 16 tag-key
    octets.  Availability is checked before anything is consumed."""
    if len(plaintext) > MAX_PAYLOAD:
        raise TransportError(
            f"payload of {len(plaintext)} octets exceeds the"
            f" {MAX_PAYLOAD}-octet cap")
    if enc_cursor.remaining < len(plaintext):
        raise KeyExhausted("pad cursor too short for payload")
    if mac_cursor.remaining < MAC_KEY_OCTETS:
        raise KeyExhausted("mac cursor too short for tag keys")

    enc_offset, pad = enc_cursor.take(len(plaintext))
    mac_offset, mac_octets = mac_cursor.take(MAC_KEY_OCTETS)
    if audit is not None:
        audit.record(enc_cursor.key_id, enc_offset, len(plaintext))
        audit.record(mac_cursor.key_id, mac_offset, MAC_KEY_OCTETS)

    ciphertext = xor_bytes(plaintext, pad)
    header = _HEADER.pack(
        FRAME_MAGIC, FRAME_VERSION, msg_type, sender, session, sequence,
        enc_cursor.key_id, enc_offset, mac_cursor.key_id, mac_offset,
        len(plaintext))
    tag = wc_tag(header + ciphertext, mac_key_from_octets(mac_octets))
    return header + ciphertext + tag


def parse_header(data: bytes) -> FrameHeader:
    if len(data) < HEADER_OCTETS:
        raise FrameFormatError("truncated header")
    (magic, version, msg_type, sender, session, sequence,
     enc_key_id, enc_offset, mac_key_id, mac_offset, length) = \
        _HEADER.unpack(data[:HEADER_OCTETS])
    if magic != FRAME_MAGIC:
        raise FrameFormatError(f"bad magic {magic!r}")
    if version != FRAME_VERSION:
        raise FrameFormatError(f"unsupported version {version}")
    if length > MAX_PAYLOAD:
        raise FrameFormatError(f"declared payload {length} exceeds cap")
    return FrameHeader(msg_type, sender, session, sequence,
                       enc_key_id, enc_offset, mac_key_id, mac_offset, length)


class ReplayGuard:
    """Strictly increasing sequence per (session, sender)."""

    def __init__(self):
        self._last: dict[tuple[int, int], int] = {}
        self._lock = threading.Lock()

    def admit(self, session: int, sender: int, sequence: int):
        with self._lock:
            key = (session, sender)
            last = self._last.get(key)
            if last is not None and sequence <= last:
                raise ReplayDetected(
                    f"sequence {sequence} does not advance past {last}"
                    f" in session {session:#x}")
            self._last[key] = sequence


def open_frame(data: bytes, key_lookup, replay: ReplayGuard | None = None,
               audit: KeyRangeAudit | None = None) -> tuple[FrameHeader, bytes]:
    """Verify and decrypt one frame.

    key_lookup(key_id) must return a reader callable (offset, n) ->
    octets.  The tag is checked before any decryption output exists;
    ranges are marked consumed only after the tag verifies, so a
    garbage frame cannot poison the audit state.
    """
    header = parse_header(data)
    body = data[HEADER_OCTETS:]
    if len(body) != header.length + TAG_OCTETS:
        raise FrameFormatError(
            f"frame body is {len(body)} octets, expected"
            f" {header.length + TAG_OCTETS}")
    ciphertext = body[:header.length]
    tag = body[header.length:]

    try:
        enc_read = key_lookup(header.enc_key_id)
        mac_read = key_lookup(header.mac_key_id)
    except KeyError as exc:
        raise UnknownKey(f"no key file for id {header.enc_key_id.hex()}"
                         f"/{header.mac_key_id.hex()}") from exc

    if audit is not None:
        audit.check(header.enc_key_id, header.enc_offset, header.length)
        audit.check(header.mac_key_id, header.mac_offset, MAC_KEY_OCTETS)

    mac_octets = mac_read(header.mac_offset, MAC_KEY_OCTETS)
    expected = wc_tag(data[:HEADER_OCTETS + header.length],
                      mac_key_from_octets(mac_octets))
    if expected != tag:
        raise TagMismatch("frame tag verification failed")

    if replay is not None:
        replay.admit(header.session, header.sender, header.sequence)
    if audit is not None:
        audit.record(header.enc_key_id, header.enc_offset, header.length)
        audit.record(header.mac_key_id, header.mac_offset, MAC_KEY_OCTETS)

    pad = enc_read(header.enc_offset, header.length)
    return header, xor_bytes(ciphertext, pad)


def frame_size(payload_length: int) -> int:
    return HEADER_OCTETS + payload_length + TAG_OCTETS


def key_cost(payload_length: int) -> int:
    """Key octets one frame consumes: pad plus one-time tag keys."""
    return payload_length + MAC_KEY_OCTETS
