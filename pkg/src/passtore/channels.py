"""Secure channels: logical messages over OTP-sealed frames on a socket.

A channel endpoint seals every outgoing frame with keystream from key
files it requests on demand from its node's KSA, and opens incoming
frames against the key files its node store holds (both endpoints of a
delivered key file see the same octets).  Messages larger than the
1500-octet frame payload cap are split into offset-addressed chunks and
reassembled in order on the far side.

Chunk payload layout: total length (u32), offset (u32), piece.
"""

from __future__ import annotations

import socket
import struct
import threading

from .messages import PHASE_OF, decode_message, encode_message
from .transport import (
    HEADER_OCTETS,
    KeyRangeAudit,
    KeystreamCursor,
    MAX_PAYLOAD,
    ReplayGuard,
    TAG_OCTETS,
    key_cost,
    open_frame,
    parse_header,
    seal,
)

_CHUNK_HEAD = struct.Struct(">II")
CHUNK_DATA = MAX_PAYLOAD - _CHUNK_HEAD.size

# key files are requested in blocks so short messages do not trigger a
# KSA round trip each
DEFAULT_PROVISION = 1 << 16


class ChannelClosed(ConnectionError):
    """The peer hung up mid-stream."""


class ConsumptionLedger:
    """Per-phase key-octet consumption totals (seal-time accounting)."""

    def __init__(self):
        self._totals: dict[str, int] = {}
        self._lock = threading.Lock()

    def record(self, phase: str, octets: int):
        with self._lock:
            self._totals[phase] = self._totals.get(phase, 0) + octets

    def totals(self) -> dict[str, int]:
        with self._lock:
            return dict(self._totals)

    def total(self) -> int:
        return sum(self.totals().values())

    def snapshot(self):
        return self.totals()


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        piece = sock.recv(n - len(buf))
        if not piece:
            raise ChannelClosed("connection closed by peer")
        buf += piece
    return bytes(buf)


class SecureChannel:
    """One endpoint of a duplex sealed-message stream.

    Sends are serialized by a lock and may run concurrently with the
    single reader.  `key_source(min_octets)` must return a fresh key
    file; `key_lookup(key_id)` must return a reader callable or raise
    KeyError.
    """

    def __init__(self, sock: socket.socket, sender_id: int, session_id: int,
                 key_source, key_lookup, replay: ReplayGuard | None = None,
                 range_audit: KeyRangeAudit | None = None,
                 ledger: ConsumptionLedger | None = None,
                 tap=None):
        self._sock = sock
        self.sender_id = sender_id
        self.session_id = session_id
        self._key_source = key_source
        self._key_lookup = key_lookup
        self._replay = replay if replay is not None else ReplayGuard()
        self._audit = range_audit
        self._ledger = ledger
        self._tap = tap
        self._cursor: KeystreamCursor | None = None
        self._sequence = 0
        self._send_lock = threading.Lock()
        self._recv_buffer = bytearray()
        self._recv_total: int | None = None
        self._recv_type: int | None = None
        self.last_sender: int | None = None
        self._closed = False

    def _cursor_for(self, octets_needed: int) -> KeystreamCursor:
        if self._cursor is None or self._cursor.remaining < octets_needed:
            kf = self._key_source(max(octets_needed, DEFAULT_PROVISION))
            self._cursor = KeystreamCursor(kf.key_id, kf.read, kf.length)
        return self._cursor

    def send_message(self, msg):
        msg_type, body = encode_message(msg)
        if self._tap is not None:
            self._tap(self.sender_id, msg_type, body)
        total = len(body)
        with self._send_lock:
            offset = 0
            while True:
                piece = body[offset:offset + CHUNK_DATA]
                payload = _CHUNK_HEAD.pack(total, offset) + piece
                cursor = self._cursor_for(key_cost(len(payload)))
                self._sequence += 1
                frame = seal(payload, msg_type, self.sender_id,
                             self.session_id, self._sequence, cursor, cursor,
                             self._audit)
                if self._ledger is not None:
                    self._ledger.record(PHASE_OF[msg_type],
                                        key_cost(len(payload)))
                self._sock.sendall(frame)
                offset += len(piece)
                if offset >= total:
                    break

    def _recv_frame(self):
        head = _recv_exact(self._sock, HEADER_OCTETS)
        header = parse_header(head)
        rest = _recv_exact(self._sock, header.length + TAG_OCTETS)
        return open_frame(head + rest, self._key_lookup, self._replay,
                          self._audit)

    def recv_message(self):
        """Block until one whole logical message arrives; returns it."""
        while True:
            header, payload = self._recv_frame()
            total, offset = _CHUNK_HEAD.unpack(payload[:_CHUNK_HEAD.size])
            piece = payload[_CHUNK_HEAD.size:]
            if offset != len(self._recv_buffer):
                raise ChannelClosed(
                    f"chunk at offset {offset} arrived out of order")
            if self._recv_type is None:
                self._recv_type = header.msg_type
                self._recv_total = total
            self.last_sender = header.sender
            self._recv_buffer += piece
            if len(self._recv_buffer) >= self._recv_total:
                body = bytes(self._recv_buffer)
                msg_type = self._recv_type
                self._recv_buffer = bytearray()
                self._recv_total = None
                self._recv_type = None
                return decode_message(msg_type, body)

    def close(self):
        if not self._closed:
            self._closed = True
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()


def channel_pair():
    """In-process duplex socket pair for loopback deployments."""
    return socket.socketpair()
