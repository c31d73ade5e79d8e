"""Storage server: persists share bundles, runs pre-computation rounds
with its peers, and answers reconstruction requests.

Admission of a reconstruction attempt is serialized per (owner, data
id): the l+1 mask sets for an attempt are bound atomically, in
block-index order, from the (data id, quorum) pool, so no interleaving
of concurrent attempts can ever serve a set twice or split an attempt's
masks.  Wrong-size quorums are rejected before any pool material is
touched.  A request that finds its pool short triggers one automatic
pre-computation round and then signals a retryable exhaustion error.

Bundles are persisted in an append-plus-index file with whole-record
CRC32 checksums; a restarted server reloads its index before serving.
"""

from __future__ import annotations

import heapq
import os
import struct
import threading
import zlib
from dataclasses import dataclass, field as dc_field

from . import messages as msg
from .field import mersenne_field
from .scheme import (
    PrecomputedSet,
    ReconstructionRequest,
    RegistrationBundle,
    SchemeError,
    SchemeParams,
    block_count,
    gen_precomputed_contribution,
    respond,
)

_M64 = (1 << 64) - 1


def _mix64(x: int) -> int:
    """splitmix64 finalizer; mixes set ids into an order-insensitive fold."""
    x = (x + 0x9E3779B97F4A7C15) & _M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


def binding_fold(set_ids) -> int:
    fold = 0
    for round_id, index in set_ids:
        fold ^= _mix64(round_id ^ _mix64(index))
    return fold


class ServerError(Exception):
    pass


class RoundAborted(ServerError):
    """A pre-computation round did not complete; nothing was committed."""


@dataclass(slots=True)
class ServerConfig:
    index: int
    data_dir: str | None = None
    rate_limit: int = 10          # served attempts per owner per window
    rate_window_s: float = 3600.0
    round_timeout_s: float = 30.0


class BundleStore:
    """Append-only record file with an in-memory index.

    Record: u32 payload length, u32 CRC32, payload.  The payload is the
    server index plus the StoreBundle wire encoding, so the store and
    the wire share one codec.  Later records for the same (owner, data
    id) shadow earlier ones, which implements overwrite.
    """

    def __init__(self, path: str | None):
        self._path = path
        self._index: dict[tuple, RegistrationBundle] = {}
        self._lock = threading.Lock()
        if path is not None and os.path.exists(path):
            self._load()

    def _load(self):
        with open(self._path, "rb") as fh:
            data = fh.read()
        pos = 0
        while pos + 8 <= len(data):
            length, crc = struct.unpack(">II", data[pos:pos + 8])
            payload = data[pos + 8:pos + 8 + length]
            if len(payload) < length or zlib.crc32(payload) != crc:
                break  # torn tail record; everything before it is intact
            pos += 8 + length
            (server,) = struct.unpack(">H", payload[:2])
            wire = msg.StoreBundleMsg.unpack(payload[2:])
            bundle = _bundle_from_wire(wire, server)
            self._index[(bundle.owner_id, bundle.data_id)] = bundle

    def get(self, owner_id: int, data_id: bytes) -> RegistrationBundle | None:
        return self._index.get((owner_id, data_id))

    def find_by_data_id(self, data_id: bytes) -> RegistrationBundle | None:
        for (_, did), bundle in list(self._index.items()):
            if did == data_id:
                return bundle
        return None

    def __len__(self):
        return len(self._index)

    def put(self, bundle: RegistrationBundle):
        with self._lock:
            if self._path is not None:
                wire = msg.StoreBundleMsg(
                    bundle.owner_id, bundle.data_id, bundle.params.field.m,
                    bundle.params.n, bundle.params.t, bundle.byte_length,
                    False, bundle.password_share, bundle.data_shares)
                payload = struct.pack(">H", bundle.server) + wire.pack()
                record = struct.pack(">II", len(payload),
                                     zlib.crc32(payload)) + payload
                with open(self._path, "ab") as fh:
                    fh.write(record)
                    fh.flush()
                    os.fsync(fh.fileno())
            self._index[(bundle.owner_id, bundle.data_id)] = bundle


def _bundle_from_wire(wire: msg.StoreBundleMsg, server: int) -> RegistrationBundle:
    params = SchemeParams(wire.n, wire.t, mersenne_field(wire.m))
    bundle = RegistrationBundle(
        owner_id=wire.owner_id, data_id=wire.data_id, server=server,
        params=params, data_shares=wire.data_shares,
        password_share=wire.password_share, byte_length=wire.byte_length)
    bundle.validate()
    return bundle


@dataclass(slots=True)
class _Round:
    quorum: tuple
    n_sets: int
    contributions: dict = dc_field(default_factory=dict)  # holder -> pairs
    assembled: threading.Event = dc_field(default_factory=threading.Event)
    done_from: set = dc_field(default_factory=set)
    all_done: threading.Event = dc_field(default_factory=threading.Event)


class _Pool:
    """Unconsumed PrecomputedSets for one (data id, quorum), ordered by
    set id so every server binds the same sets for the same attempt."""

    def __init__(self):
        self.sets: dict[tuple, PrecomputedSet] = {}
        self.heap: list[tuple] = []

    def add(self, pset: PrecomputedSet):
        self.sets[pset.set_id] = pset
        heapq.heappush(self.heap, pset.set_id)

    def available(self) -> int:
        return len(self.sets)

    def bind(self, count: int) -> list[PrecomputedSet]:
        if len(self.sets) < count:
            raise ServerError("pool short")
        bound = []
        while len(bound) < count:
            set_id = heapq.heappop(self.heap)
            pset = self.sets.pop(set_id, None)
            if pset is not None:
                bound.append(pset)
        return bound


class StorageServer:
    """One storage server's state and message handlers.

    Message I/O is injected: the deployment attaches channels and
    provides send_to_peer.  All handlers are thread-safe.
    """

    def __init__(self, config: ServerConfig, entropy, now_fn=None):
        import time
        self.config = config
        self.index = config.index
        self._entropy = entropy
        self._now = now_fn or time.time
        path = None
        if config.data_dir is not None:
            os.makedirs(config.data_dir, exist_ok=True)
            path = os.path.join(config.data_dir, f"bundles-{self.index}.dat")
        self.bundles = BundleStore(path)
        self._pools: dict[tuple, _Pool] = {}
        self._pool_lock = threading.Lock()
        self._rounds: dict[tuple, _Round] = {}
        self._rounds_lock = threading.Lock()
        self._admission_locks: dict[tuple, threading.Lock] = {}
        self._admission_guard = threading.Lock()
        self._attempt_times: dict[int, list[float]] = {}
        self.served_set_ids: list[tuple] = []  # (attempt_id, set_id) audit
        self._send_to_peer = None
        self.stopped = False

    def wire_peers(self, send_to_peer):
        """send_to_peer(peer_index, message) delivers to a quorum peer."""
        self._send_to_peer = send_to_peer

    # -- dispatch -------------------------------------------------------

    def dispatch(self, message, sender: int | None = None) -> list:
        """Handle one incoming message; returns reply messages."""
        if self.stopped:
            return []
        if isinstance(message, msg.StoreBundleMsg):
            return [self.handle_store(message)]
        if isinstance(message, msg.ReconRequestMsg):
            return [self.handle_reconstruct(message)]
        if isinstance(message, msg.PrecompStartMsg):
            return self.on_precomp_start(message)
        if isinstance(message, msg.PrecompContribMsg):
            self.on_precomp_contrib(message)
            return []
        if isinstance(message, msg.PrecompDoneMsg):
            self.on_precomp_done(message)
            return []
        if isinstance(message, msg.ErrorMsg):
            return []  # peer-side failure; the pending round will time out
        return [msg.ErrorMsg(msg.E_MALFORMED, False,
                             f"unexpected message {type(message).__name__}")]

    # -- registration ----------------------------------------------------

    def handle_store(self, message: msg.StoreBundleMsg):
        try:
            bundle = _bundle_from_wire(message, self.index)
        except SchemeError as exc:
            return msg.ErrorMsg(msg.E_MALFORMED, False, str(exc))
        existing = self.bundles.get(message.owner_id, message.data_id)
        if existing is not None and not message.overwrite:
            return msg.ErrorMsg(
                msg.E_DUPLICATE, False,
                f"data id {message.data_id.hex()} already registered")
        self.bundles.put(bundle)
        return msg.StoreAckMsg(message.data_id)

    # -- pre-computation ---------------------------------------------------

    def _pool(self, data_id: bytes, quorum: tuple) -> _Pool:
        key = (data_id, quorum)
        pool = self._pools.get(key)
        if pool is None:
            pool = self._pools.setdefault(key, _Pool())
        return pool

    def pool_level(self, data_id: bytes, quorum: tuple) -> int:
        with self._pool_lock:
            return self._pool(data_id, tuple(quorum)).available()

    def _round(self, data_id: bytes, round_id: int, quorum: tuple,
               n_sets: int) -> _Round:
        key = (data_id, round_id)
        with self._rounds_lock:
            state = self._rounds.get(key)
            if state is None:
                state = self._rounds[key] = _Round(quorum, n_sets)
            return state

    def _params_for(self, data_id: bytes) -> SchemeParams | None:
        bundle = self.bundles.find_by_data_id(data_id)
        return None if bundle is None else bundle.params

    def _contribute(self, data_id: bytes, round_id: int, quorum: tuple,
                    n_sets: int):
        """Generate own material for a round, deposit the self-addressed
        evaluations, and send each peer its column."""
        params = self._params_for(data_id)
        if params is None:
            raise ServerError(f"no bundle for data id {data_id.hex()}")
        per_peer = {p: [] for p in quorum}
        own_pairs = []
        for _ in range(n_sets):
            contrib = gen_precomputed_contribution(
                params, self.index, quorum, self._entropy)
            for p in quorum:
                pair = (contrib.randomizer_shares[p], contrib.zero_shares[p])
                if p == self.index:
                    own_pairs.append(pair)
                else:
                    per_peer[p].append(pair)
        for p in quorum:
            if p == self.index:
                continue
            self._send_to_peer(p, msg.PrecompContribMsg(
                data_id, round_id, quorum, self.index, params.field.m,
                tuple(per_peer[p])))
        self._deposit(data_id, round_id, quorum, n_sets, self.index,
                      own_pairs)

    def _deposit(self, data_id: bytes, round_id: int, quorum: tuple,
                 n_sets: int, holder: int, pairs):
        state = self._round(data_id, round_id, quorum, n_sets)
        with self._rounds_lock:
            state.contributions[holder] = list(pairs)
            complete = len(state.contributions) == len(state.quorum)
        if complete:
            self._commit_round(data_id, round_id, state)

    def _commit_round(self, data_id: bytes, round_id: int, state: _Round):
        """All contributions present: assemble and publish the sets."""
        with self._pool_lock:
            pool = self._pool(data_id, state.quorum)
            for idx in range(state.n_sets):
                pset = PrecomputedSet(
                    quorum=state.quorum,
                    holder=self.index,
                    randomizer_shares={
                        h: state.contributions[h][idx][0]
                        for h in state.quorum},
                    zero_shares={
                        h: state.contributions[h][idx][1]
                        for h in state.quorum},
                    set_id=(round_id, idx),
                )
                pool.add(pset)
        state.assembled.set()

    def on_precomp_start(self, message: msg.PrecompStartMsg) -> list:
        state = self._round(message.data_id, message.round_id,
                            message.quorum, message.n_sets)
        try:
            self._contribute(message.data_id, message.round_id,
                             message.quorum, message.n_sets)
        except ServerError as exc:
            return [msg.ErrorMsg(msg.E_UNKNOWN_DATA, False, str(exc))]
        if not state.assembled.wait(self.config.round_timeout_s):
            self._drop_round(message.data_id, message.round_id)
            return [msg.ErrorMsg(msg.E_INTERNAL, True,
                                 "round timed out awaiting contributions")]
        return [msg.PrecompDoneMsg(message.data_id, message.round_id,
                                   self.index, message.n_sets)]

    def on_precomp_contrib(self, message: msg.PrecompContribMsg):
        self._deposit(message.data_id, message.round_id, message.quorum,
                      len(message.pairs), message.sender, message.pairs)

    def on_precomp_done(self, message: msg.PrecompDoneMsg):
        key = (message.data_id, message.round_id)
        with self._rounds_lock:
            state = self._rounds.get(key)
            if state is None:
                return
            state.done_from.add(message.responder)
            peers = set(state.quorum) - {self.index}
            if peers <= state.done_from:
                state.all_done.set()

    def _drop_round(self, data_id: bytes, round_id: int):
        with self._rounds_lock:
            self._rounds.pop((data_id, round_id), None)

    def run_precompute_round(self, data_id: bytes, quorum, count: int = 1) -> int:
        """Initiate one round producing count attempts' worth of sets.

        Returns the number of sets committed locally; aborts (committing
        nothing anywhere that matters) if any peer fails to complete.
        """
        quorum = tuple(sorted(quorum))
        if self.index not in quorum:
            raise ServerError(f"server {self.index} not in quorum {quorum}")
        bundle = self.bundles.find_by_data_id(data_id)
        if bundle is None:
            raise ServerError(f"no bundle for data id {data_id.hex()}")
        n_sets = count * bundle.block_total
        round_id = self._entropy.getrandbits(63)
        state = self._round(data_id, round_id, quorum, n_sets)
        for p in quorum:
            if p != self.index:
                self._send_to_peer(p, msg.PrecompStartMsg(
                    data_id, round_id, quorum, n_sets, self.index))
        self._contribute(data_id, round_id, quorum, n_sets)
        if not state.assembled.wait(self.config.round_timeout_s):
            self._drop_round(data_id, round_id)
            raise RoundAborted("own assembly timed out; pool unchanged")
        if len(quorum) > 1 and not state.all_done.wait(
                self.config.round_timeout_s):
            raise RoundAborted("peers did not confirm the round")
        return n_sets

    # -- reconstruction ---------------------------------------------------

    def _admission_lock(self, owner_id: int, data_id: bytes) -> threading.Lock:
        key = (owner_id, data_id)
        with self._admission_guard:
            lock = self._admission_locks.get(key)
            if lock is None:
                lock = self._admission_locks[key] = threading.Lock()
            return lock

    def _rate_limited(self, owner_id: int) -> bool:
        now = self._now()
        window = self._attempt_times.setdefault(owner_id, [])
        cutoff = now - self.config.rate_window_s
        while window and window[0] < cutoff:
            window.pop(0)
        return len(window) >= self.config.rate_limit

    def handle_reconstruct(self, message: msg.ReconRequestMsg):
        bundle = self.bundles.get(message.owner_id, message.data_id)
        if bundle is None:
            return msg.ErrorMsg(msg.E_UNKNOWN_DATA, False,
                                f"unknown data id {message.data_id.hex()}")
        params = bundle.params
        quorum = tuple(message.quorum)
        # improper requests are rejected before any pool material is bound
        if len(quorum) != params.quorum_size or self.index not in quorum \
                or len(set(quorum)) != len(quorum) \
                or any(not 1 <= j <= params.n for j in quorum):
            return msg.ErrorMsg(
                msg.E_QUORUM_REJECTED, False,
                f"improper request: quorum {quorum} is not"
                f" {params.quorum_size} distinct servers")
        if message.m != params.field.m:
            return msg.ErrorMsg(msg.E_MALFORMED, False,
                                "field exponent mismatch")

        l_plus_1 = bundle.block_total
        admission = self._admission_lock(message.owner_id, message.data_id)
        with admission:
            if self._rate_limited(message.owner_id):
                return msg.ErrorMsg(msg.E_RATE_LIMITED, False,
                                    "attempt rate limit exceeded")
            with self._pool_lock:
                pool = self._pool(message.data_id, quorum)
                try:
                    bound = pool.bind(l_plus_1)
                except ServerError:
                    bound = None
            if bound is None:
                self._refill_pool(message.data_id, quorum)
                return msg.ErrorMsg(
                    msg.E_POOL_EXHAUSTED, True,
                    "mask pool exhausted; a pre-computation round was"
                    " triggered, retry")
            self._attempt_times.setdefault(message.owner_id, []).append(
                self._now())
            request = ReconstructionRequest(
                quorum, message.password_share, message.data_id,
                message.attempt_id)
            values = []
            for i, pset in enumerate(bound, start=1):
                values.append(respond(bundle, pset, request, i))
                self.served_set_ids.append((message.attempt_id, pset.set_id))

        set_ids = [pset.set_id for pset in bound]
        return msg.ReconResponseMsg(
            data_id=message.data_id, attempt_id=message.attempt_id,
            server=self.index, m=params.field.m,
            byte_length=bundle.byte_length,
            binding_first=set_ids[0], binding_fold=binding_fold(set_ids),
            values=tuple(values))

    def _refill_pool(self, data_id: bytes, quorum: tuple):
        if self._send_to_peer is None and len(quorum) > 1:
            return
        try:
            self.run_precompute_round(data_id, quorum, count=1)
        except (ServerError, OSError):
            pass  # the exhaustion error already tells the owner to retry

    def stop(self):
        """Simulated crash: drop every future message on the floor."""
        self.stopped = True
