"""Simulated QKD key-supply fabric: links, KMAs, KMS routing, KSA delivery.

The quantum layer is a seeded deterministic generator per link: both
endpoints hold identically-seeded generators and therefore derive
byte-identical key streams, which is the whole interface contract the
application layer observes.  Above it, per-node key management agents
(KMAs) pool the link keys and relay keys hop by hop with one-time-pad
encapsulation, a key management server (KMS) keeps the routing table
and the usage audit, and per-node key supply agents (KSAs) hand
applications key files with ids, expiry, and traceability records.

The fabric keeps an exact octet ledger per link:

    generated == available-in-pool + consumed-by-relay + expired

and never reissues a key id or overlapping key material.
"""

from __future__ import annotations

import random
import struct
import threading
import time
import uuid
from dataclasses import dataclass
from datetime import datetime, timezone


class KeySupplyError(Exception):
    """Base for key-supply failures."""


class UnknownLink(KeySupplyError):
    pass


class UnknownKeyId(KeySupplyError):
    pass


class KeyExpired(KeySupplyError):
    """The key id is known but its octets have been erased."""


class NoRoute(KeySupplyError):
    pass


class InsufficientKey(KeySupplyError):
    """A hop's pool cannot cover the request; retryable after generation."""


class KeyRateExceeded(KeySupplyError):
    """Generation request outruns the link's configured key rate."""


class Unauthorized(KeySupplyError):
    pass


@dataclass(frozen=True, slots=True)
class LinkSpec:
    """Static description of one point-to-point QKD link."""

    name: str
    node_a: int
    node_b: int
    length_km: float = 0.0
    loss_db: float = 0.0
    rate_octets_per_s: float | None = None  # None: unthrottled

    @property
    def nodes(self) -> frozenset:
        return frozenset((self.node_a, self.node_b))


# Default four-node topology; link names, lengths and losses follow the
# published testbed table.  Key rates are not published, so links default
# to unthrottled and configs may pin rates per link.
DEFAULT_TOPOLOGY = (
    LinkSpec("NEC-0", 1, 2, 50, 10.0),
    LinkSpec("NEC-1", 2, 3, 22, 13.0),
    LinkSpec("Toshiba", 3, 4, 45, 14.5),
    LinkSpec("NTT-NICT", 1, 4, 90, 28.6),
    LinkSpec("Gakushuin", 1, 3, 2, 2.0),
    LinkSpec("SeQureNet", 2, 4, 2, 2.0),
)

AVAILABLE = "available"
RESERVED = "reserved"
CONSUMED = "consumed"
EXPIRED = "expired"


class KeyFile:
    """A delivered key: id, octets, route, lifecycle state.

    State machine: available -> reserved -> consumed, or
    available/reserved -> expired.  Consumed and expired keys keep their
    audit identity but their octets are zeroized and unreadable.
    """

    def __init__(self, key_id: bytes, route: tuple, octets: bytes,
                 created_at: float, expires_at: float):
        self.key_id = key_id
        self.route = route
        self.length = len(octets)
        self._octets: bytearray | None = bytearray(octets)
        self.created_at = created_at
        self.expires_at = expires_at
        self.state = AVAILABLE

    def read(self, offset: int, n: int) -> bytes:
        if self._octets is None:
            raise KeyExpired(f"key {self.key_id.hex()} octets are erased"
                             f" (state={self.state})")
        if offset < 0 or offset + n > self.length:
            raise KeySupplyError(
                f"read [{offset}, {offset + n}) outside key of {self.length}")
        return bytes(self._octets[offset:offset + n])

    def zeroize(self):
        if self._octets is not None:
            for i in range(len(self._octets)):
                self._octets[i] = 0
            self._octets = None

    def to_binary(self) -> bytes:
        """16-octet id, 8-octet length, octets, metadata trailer."""
        octets = bytes(self._octets) if self._octets is not None \
            else bytes(self.length)
        trailer = struct.pack(
            ">ddB B", self.created_at, self.expires_at,
            (AVAILABLE, RESERVED, CONSUMED, EXPIRED).index(self.state),
            len(self.route))
        trailer += b"".join(struct.pack(">H", node) for node in self.route)
        return self.key_id + struct.pack(">Q", self.length) + octets + trailer

    @classmethod
    def from_binary(cls, data: bytes) -> "KeyFile":
        key_id = data[:16]
        (length,) = struct.unpack(">Q", data[16:24])
        octets = data[24:24 + length]
        created, expires, state_idx, route_len = struct.unpack(
            ">ddB B", data[24 + length:24 + length + 18])
        route = tuple(
            struct.unpack(">H", data[24 + length + 18 + 2 * i:
                                     24 + length + 20 + 2 * i])[0]
            for i in range(route_len))
        kf = cls(key_id, route, octets, created, expires)
        kf.state = (AVAILABLE, RESERVED, CONSUMED, EXPIRED)[state_idx]
        if kf.state in (CONSUMED, EXPIRED):
            kf.zeroize()
        return kf


@dataclass(frozen=True, slots=True)
class AuditRecord:
    """Traceability entry the KSA writes and forwards to the KMS."""

    timestamp: float
    key_id: bytes
    app_id: int
    purpose: str
    event: str

    def line(self) -> str:
        ts = datetime.fromtimestamp(self.timestamp, tz=timezone.utc)
        return (f"ts={ts.isoformat()} key={self.key_id.hex()}"
                f" app={self.app_id} purpose={self.purpose} event={self.event}")


class AuditLog:
    """Append-only line-oriented record store, optionally file-backed."""

    def __init__(self, path=None):
        self._records: list[AuditRecord] = []
        self._path = path
        self._lock = threading.Lock()

    def append(self, record: AuditRecord):
        with self._lock:
            self._records.append(record)
            if self._path is not None:
                with open(self._path, "a", encoding="utf-8") as fh:
                    fh.write(record.line() + "\n")

    def records(self) -> list[AuditRecord]:
        return list(self._records)


class _LinkState:
    """One link's stream, pool, and octet ledger.

    Two identically-seeded generators stand in for the two endpoint
    devices; every generation draws from both and checks they agree.
    The pooled octets are stored once and viewed by both endpoint KMAs.
    """

    def __init__(self, spec: LinkSpec, seed: int, created_at: float):
        self.spec = spec
        self._rng_a = random.Random(seed)
        self._rng_b = random.Random(seed)
        self.created_at = created_at
        self.generated = 0
        self.consumed = 0
        self.expired = 0
        # segments of (created_at, bytearray); draws eat from the front
        self.segments: list[tuple[float, bytearray]] = []

    def available(self) -> int:
        return sum(len(seg) for _, seg in self.segments)

    def generate(self, n: int, now: float):
        spec = self.spec
        if spec.rate_octets_per_s is not None:
            budget = spec.rate_octets_per_s * (now - self.created_at)
            if self.generated + n > budget:
                raise KeyRateExceeded(
                    f"link {spec.name}: {n} octets exceeds remaining rate"
                    f" budget of {max(0, int(budget) - self.generated)}")
        octets_a = bytes(self._rng_a.randbytes(n))
        octets_b = bytes(self._rng_b.randbytes(n))
        if octets_a != octets_b:  # cannot happen with a shared seed
            raise KeySupplyError(f"link {spec.name} endpoints diverged")
        self.segments.append((now, bytearray(octets_a)))
        self.generated += n

    def draw(self, n: int) -> bytes:
        if self.available() < n:
            raise InsufficientKey(
                f"link {self.spec.name} pool has {self.available()} octets,"
                f" need {n}")
        out = bytearray()
        while len(out) < n:
            created, seg = self.segments[0]
            take = min(n - len(out), len(seg))
            out += seg[:take]
            if take == len(seg):
                self.segments.pop(0)
            else:
                self.segments[0] = (created, seg[take:])
        self.consumed += n
        return bytes(out)

    def expire_pool(self, cutoff: float) -> int:
        erased = 0
        kept = []
        for created, seg in self.segments:
            if created < cutoff:
                erased += len(seg)
                for i in range(len(seg)):
                    seg[i] = 0
            else:
                kept.append((created, seg))
        self.segments = kept
        self.expired += erased
        return erased


class RoutingTable:
    """Shortest relay paths between node pairs, with explicit overrides."""

    def __init__(self, links):
        self._links = {spec.name: spec for spec in links}
        self._adjacent: dict[int, list[tuple[int, str]]] = {}
        for spec in links:
            self._adjacent.setdefault(spec.node_a, []).append(
                (spec.node_b, spec.name))
            self._adjacent.setdefault(spec.node_b, []).append(
                (spec.node_a, spec.name))
        self._overrides: dict[tuple[int, int], tuple] = {}

    @property
    def nodes(self) -> tuple:
        return tuple(sorted(self._adjacent))

    def link_between(self, a: int, b: int) -> LinkSpec:
        for spec in self._links.values():
            if spec.nodes == frozenset((a, b)):
                return spec
        raise UnknownLink(f"no link between nodes {a} and {b}")

    def set_path(self, src: int, dst: int, path):
        path = tuple(path)
        if path[0] != src or path[-1] != dst:
            raise KeySupplyError("override path must start at src, end at dst")
        for a, b in zip(path, path[1:]):
            self.link_between(a, b)  # must reference existing links
        self._overrides[(src, dst)] = path
        self._overrides[(dst, src)] = tuple(reversed(path))

    def path(self, src: int, dst: int) -> tuple:
        """Node sequence src..dst; BFS shortest unless overridden."""
        if src == dst:
            raise NoRoute("source and destination coincide")
        override = self._overrides.get((src, dst))
        if override is not None:
            return override
        seen = {src: (src,)}
        frontier = [src]
        while frontier:
            nxt = []
            for node in frontier:
                for peer, _ in self._adjacent.get(node, ()):
                    if peer not in seen:
                        seen[peer] = seen[node] + (peer,)
                        if peer == dst:
                            return seen[peer]
                        nxt.append(peer)
            frontier = nxt
        raise NoRoute(f"no relay path from node {src} to node {dst}")

    def link_info(self, pools) -> dict:
        """KMS view: per-link rate, accumulated pool, metadata."""
        return {
            name: {
                "rate": spec.rate_octets_per_s,
                "length_km": spec.length_km,
                "loss_db": spec.loss_db,
                "accumulated": pools[name].available(),
            }
            for name, spec in self._links.items()
        }


class KmaView:
    """One node's view of its link pools and delivered key files."""

    def __init__(self, fabric: "KeySupplyFabric", node: int):
        self._fabric = fabric
        self.node = node

    def pool_level(self, link_name: str) -> int:
        link = self._fabric._link(link_name)
        if self.node not in link.spec.nodes:
            raise UnknownLink(f"node {self.node} is not an endpoint of"
                              f" {link_name}")
        return link.available()

    def key_file(self, key_id: bytes) -> KeyFile:
        return self._fabric.get_key_file(self.node, key_id)


class Ksa:
    """Application-facing key delivery for one node."""

    def __init__(self, fabric: "KeySupplyFabric", node: int):
        self._fabric = fabric
        self.node = node

    def request(self, app_id: int, peer_node: int, n_octets: int,
                purpose: str = "app") -> KeyFile:
        return self._fabric.ksa_request(app_id, self.node, peer_node,
                                        n_octets, purpose)

    def key_file(self, key_id: bytes) -> KeyFile:
        return self._fabric.get_key_file(self.node, key_id)


class KeySupplyFabric:
    """The whole platform: links, pools, routing, delivery, lifecycle."""

    def __init__(self, topology=DEFAULT_TOPOLOGY, seed: int | None = None,
                 now_fn=time.time, key_ttl_s: float = 3600.0,
                 authorized_apps=None, auto_generate: bool = True,
                 audit_path=None):
        self._now = now_fn
        self.key_ttl_s = key_ttl_s
        self.auto_generate = auto_generate
        self._lock = threading.RLock()
        master = random.Random(seed)
        created = self._now()
        self._links = {
            spec.name: _LinkState(spec, master.getrandbits(64), created)
            for spec in topology
        }
        self.routing = RoutingTable(topology)
        self._stores: dict[int, dict[bytes, KeyFile]] = {
            node: {} for node in self.routing.nodes}
        self._authorized = None if authorized_apps is None \
            else set(authorized_apps)
        self.audit = AuditLog(audit_path)
        self.kms_records: list[AuditRecord] = []
        self.delivered_log: list[tuple[str, int]] = []  # (purpose, octets)
        self._uuid_rng = random.Random(master.getrandbits(64))

    # -- quantum layer ------------------------------------------------

    def _link(self, name: str) -> _LinkState:
        try:
            return self._links[name]
        except KeyError:
            raise UnknownLink(f"no QKD link named {name}") from None

    def generate_link_keys(self, link_name: str, n_octets: int):
        """Push n fresh octets into both endpoint pools of a link."""
        with self._lock:
            self._link(link_name).generate(n_octets, self._now())

    def kma(self, node: int) -> KmaView:
        if node not in self._stores:
            raise KeySupplyError(f"no node {node} in the fabric")
        return KmaView(self, node)

    def ksa(self, node: int) -> Ksa:
        if node not in self._stores:
            raise KeySupplyError(f"no node {node} in the fabric")
        return Ksa(self, node)

    # -- key relay ----------------------------------------------------

    def _new_key_id(self) -> bytes:
        return uuid.UUID(int=self._uuid_rng.getrandbits(128), version=4).bytes

    def relay_key(self, src: int, dst: int, n_octets: int) -> KeyFile:
        """Share a fresh key between src and dst via hop-by-hop
        encapsulation; consumes n_octets of link key on every hop,
        all-or-nothing."""
        with self._lock:
            path = self.routing.path(src, dst)
            hops = [self.routing.link_between(a, b).name
                    for a, b in zip(path, path[1:])]
            states = [self._link(name) for name in hops]
            if self.auto_generate:
                for state in states:
                    short = n_octets - state.available()
                    if short > 0:
                        state.generate(short, self._now())
            for state in states:
                if state.available() < n_octets:
                    raise InsufficientKey(
                        f"link {state.spec.name} cannot cover {n_octets}"
                        f" octets")
            # the first hop's drawn octets become the key itself; each
            # further hop consumes an equal pad to forward it encapsulated,
            # and the receiving node's identical pad copy strips it again
            received = states[0].draw(n_octets)
            for state in states[1:]:
                pad = state.draw(n_octets)
                in_flight = bytes(a ^ b for a, b in zip(received, pad))
                received = bytes(a ^ b for a, b in zip(in_flight, pad))

            now = self._now()
            kf = KeyFile(self._new_key_id(), path, received, now,
                         now + self.key_ttl_s)
            self._stores[src][kf.key_id] = kf
            self._stores[dst][kf.key_id] = kf
            return kf

    # -- application-facing delivery -----------------------------------

    def ksa_request(self, app_id: int, local_node: int, peer_node: int,
                    n_octets: int, purpose: str = "app") -> KeyFile:
        if self._authorized is not None and app_id not in self._authorized:
            raise Unauthorized(f"app {app_id} is not authorized")
        with self._lock:
            kf = self.relay_key(local_node, peer_node, n_octets)
            kf.state = RESERVED
            record = AuditRecord(self._now(), kf.key_id, app_id, purpose,
                                 "delivered")
            self.audit.append(record)
            self.kms_records.append(record)  # forwarded for traceability
            self.delivered_log.append((purpose, n_octets))
            return kf

    def get_key_file(self, node: int, key_id: bytes) -> KeyFile:
        store = self._stores.get(node)
        if store is None:
            raise KeySupplyError(f"no node {node} in the fabric")
        kf = store.get(key_id)
        if kf is None:
            raise UnknownKeyId(f"node {node} holds no key {key_id.hex()}")
        if kf.state == EXPIRED:
            raise KeyExpired(f"key {key_id.hex()} expired")
        return kf

    def mark_consumed(self, key_id: bytes):
        """Application hand-back: erase the octets, keep the audit trail."""
        with self._lock:
            for store in self._stores.values():
                kf = store.get(key_id)
                if kf is not None and kf.state in (AVAILABLE, RESERVED):
                    kf.state = CONSUMED
                    kf.zeroize()

    # -- lifecycle ------------------------------------------------------

    def expire_keys(self, now: float | None = None) -> int:
        """Erase everything past expiry: key files and pooled link octets.
        Returns the number of key files erased."""
        now = self._now() if now is None else now
        erased = 0
        with self._lock:
            seen = set()
            for store in self._stores.values():
                for kf in store.values():
                    if kf.key_id in seen:
                        continue
                    seen.add(kf.key_id)
                    if kf.state in (AVAILABLE, RESERVED) and kf.expires_at < now:
                        kf.state = EXPIRED
                        kf.zeroize()
                        erased += 1
                        record = AuditRecord(now, kf.key_id, 0, "lifecycle",
                                             "expired")
                        self.audit.append(record)
                        self.kms_records.append(record)
            cutoff = now - self.key_ttl_s
            for state in self._links.values():
                state.expire_pool(cutoff)
        return erased

    # -- accounting -----------------------------------------------------

    def ledger(self) -> dict:
        """Exact per-link octet accounting."""
        with self._lock:
            return {
                name: {
                    "generated": s.generated,
                    "available": s.available(),
                    "consumed": s.consumed,
                    "expired": s.expired,
                }
                for name, s in self._links.items()
            }

    def check_conservation(self):
        """generated == available + consumed + expired on every link."""
        for name, row in self.ledger().items():
            balance = row["available"] + row["consumed"] + row["expired"]
            if row["generated"] != balance:
                raise KeySupplyError(
                    f"ledger violation on {name}: generated"
                    f" {row['generated']} != {balance}")

    def delivered_octets(self, purpose: str | None = None) -> int:
        return sum(n for p, n in self.delivered_log
                   if purpose is None or p == purpose)

    def link_info(self) -> dict:
        return self.routing.link_info(self._links)
