"""Deployment wiring: key fabric, storage servers, and sealed channels.

The in-process Deployment runs everything in one process over socket
pairs (the default for tests and benchmarking); the same pieces can be
hosted behind TCP listeners for the command-line client.  Server j
lives at QKD node ((j-1) mod nodes) + 1 and the data owner at node 1,
which also hosts server 1.

Every frame sealed anywhere in a deployment records its key cost in a
shared per-phase ledger and its (key id, offset, length) ranges in a
shared audit, so a whole run can be checked for pad reuse after the
fact.
"""

from __future__ import annotations

import random
import socket
import threading

from . import messages as msg
from .channels import (
    ChannelClosed,
    ConsumptionLedger,
    SecureChannel,
    channel_pair,
)
from .keysupply import (
    DEFAULT_TOPOLOGY,
    InsufficientKey,
    KeyFile,
    KeySupplyFabric,
    Unauthorized,
    UnknownKeyId,
)
from .scheme import SchemeParams
from .server import ServerConfig, StorageServer
from .transport import KeyRangeAudit, ReplayGuard

OWNER_SENDER = 0x7FFF  # transport-level sender id for the data owner


class DeploymentError(Exception):
    pass


class KsaService:
    """Frame-facing KSA endpoint: key delivery, key fetch, usage stats.

    Answers the owner's sealed KSA_REQUEST / KSA_FETCH / KEYSTATS
    messages.  Octets cross the wire only on this channel, which is why
    its own sealing pad (the pre-provisioned bootstrap key) must be at
    least as long as everything delivered through it.
    """

    def __init__(self, fabric: KeySupplyFabric, node: int,
                 ledger: ConsumptionLedger | None = None,
                 include_octets: bool = True):
        self._fabric = fabric
        self._node = node
        self._ledger = ledger
        self._include_octets = include_octets

    def handle(self, message):
        if isinstance(message, msg.KsaRequestMsg):
            try:
                kf = self._fabric.ksa_request(
                    message.app_id, self._node, message.peer_node,
                    message.n_octets, message.purpose)
            except Unauthorized as exc:
                return msg.ErrorMsg(msg.E_UNAUTHORIZED, False, str(exc))
            except InsufficientKey as exc:
                return msg.ErrorMsg(msg.E_KEY_EXHAUSTED, True, str(exc))
            octets = kf.read(0, kf.length) if self._include_octets else b""
            return msg.KsaResponseMsg(kf.key_id, kf.length, kf.expires_at,
                                      octets)
        if isinstance(message, msg.KsaFetchMsg):
            try:
                kf = self._fabric.get_key_file(self._node, message.key_id)
            except UnknownKeyId as exc:
                return msg.ErrorMsg(msg.E_UNKNOWN_DATA, False, str(exc))
            return msg.KsaResponseMsg(kf.key_id, kf.length, kf.expires_at,
                                      kf.read(0, kf.length))
        if isinstance(message, msg.KeystatsRequestMsg):
            totals = self._ledger.totals() if self._ledger else {}
            return msg.KeystatsResponseMsg(
                tuple(sorted(totals.items())),
                self._fabric.delivered_octets())
        return msg.ErrorMsg(msg.E_MALFORMED, False,
                            f"unexpected {type(message).__name__} at KSA")


class Deployment:
    """Everything in one process: fabric, n servers, sealed loopback
    channels, shared pad audit and consumption ledger."""

    def __init__(self, params: SchemeParams, seed: int | None = None,
                 data_dir: str | None = None, rate_limit: int = 1_000_000,
                 rate_window_s: float = 3600.0, topology=DEFAULT_TOPOLOGY,
                 round_timeout_s: float = 30.0, owner_id: int = 1,
                 tap=None, now_fn=None):
        self.params = params
        self.owner_id = owner_id
        self._rng = random.Random(seed)
        self.fabric = KeySupplyFabric(topology=topology,
                                      seed=self._rng.getrandbits(64),
                                      auto_generate=True,
                                      **({"now_fn": now_fn} if now_fn else {}))
        self.range_audit = KeyRangeAudit()
        self.ledger = ConsumptionLedger()
        self.tap = tap
        self._nodes = self.fabric.routing.nodes
        self._threads: list[threading.Thread] = []
        self._channels: list[SecureChannel] = []
        self._replay_guards = {node: ReplayGuard() for node in self._nodes}
        self._owner_replay = ReplayGuard()

        self.servers: dict[int, StorageServer] = {}
        for j in range(1, params.n + 1):
            config = ServerConfig(index=j, data_dir=data_dir,
                                  rate_limit=rate_limit,
                                  rate_window_s=rate_window_s,
                                  round_timeout_s=round_timeout_s)
            entropy = random.Random(self._rng.getrandbits(64))
            self.servers[j] = StorageServer(config, entropy)
        self._wire_peers()

    # -- channel plumbing -------------------------------------------------

    def node_of_server(self, j: int) -> int:
        return (j - 1) % len(self._nodes) + 1

    @property
    def owner_node(self) -> int:
        return 1

    def _key_source(self, local_node: int, peer_node: int, app_id: int,
                    purpose: str):
        def source(n_octets: int) -> KeyFile:
            return self.fabric.ksa(local_node).request(
                app_id, peer_node, n_octets, purpose)
        return source

    def _key_lookup(self, node: int):
        def lookup(key_id: bytes):
            try:
                return self.fabric.get_key_file(node, key_id).read
            except UnknownKeyId:
                raise KeyError(key_id.hex()) from None
        return lookup

    def _make_channel(self, sock, sender_id: int, session: int,
                      local_node: int, peer_node: int, purpose: str,
                      replay: ReplayGuard) -> SecureChannel:
        channel = SecureChannel(
            sock, sender_id, session,
            key_source=self._key_source(local_node, peer_node, sender_id,
                                        purpose),
            key_lookup=self._key_lookup(local_node),
            replay=replay, range_audit=self.range_audit, ledger=self.ledger,
            tap=self.tap)
        self._channels.append(channel)
        return channel

    def _serve_loop(self, server: StorageServer, channel: SecureChannel):
        try:
            while True:
                message = channel.recv_message()
                for reply in server.dispatch(message, channel.last_sender):
                    channel.send_message(reply)
        except (ChannelClosed, OSError):
            pass

    def _attach(self, server: StorageServer, channel: SecureChannel):
        thread = threading.Thread(target=self._serve_loop,
                                  args=(server, channel), daemon=True)
        thread.start()
        self._threads.append(thread)

    def _wire_peers(self):
        """A dedicated sealed duplex channel per server pair."""
        sends: dict[int, dict[int, SecureChannel]] = {
            j: {} for j in self.servers}
        for i in self.servers:
            for j in self.servers:
                if i >= j:
                    continue
                sock_i, sock_j = channel_pair()
                session = self._rng.getrandbits(63)
                chan_i = self._make_channel(
                    sock_i, i, session, self.node_of_server(i),
                    self.node_of_server(j), f"transport:s{i}-s{j}",
                    self._replay_guards[self.node_of_server(i)])
                chan_j = self._make_channel(
                    sock_j, j, session, self.node_of_server(j),
                    self.node_of_server(i), f"transport:s{j}-s{i}",
                    self._replay_guards[self.node_of_server(j)])
                self._attach(self.servers[i], chan_i)
                self._attach(self.servers[j], chan_j)
                sends[i][j] = chan_i
                sends[j][i] = chan_j
        for j, server in self.servers.items():
            peer_map = sends[j]
            server.wire_peers(
                lambda peer, message, _m=peer_map: _m[peer].send_message(
                    message))

    def client_channel(self, j: int) -> SecureChannel:
        """Fresh owner->server channel; the server side is attached to a
        handler thread."""
        if j not in self.servers:
            raise DeploymentError(f"no server {j} in this deployment")
        if self.servers[j].stopped:
            raise ChannelClosed(f"server {j} is down")
        owner_sock, server_sock = channel_pair()
        session = self._rng.getrandbits(63)
        node_j = self.node_of_server(j)
        owner_chan = self._make_channel(
            owner_sock, OWNER_SENDER, session, self.owner_node, node_j,
            "transport:owner", self._owner_replay)
        server_chan = self._make_channel(
            server_sock, j, session, node_j, self.owner_node,
            f"transport:s{j}-owner", self._replay_guards[node_j])
        self._attach(self.servers[j], server_chan)
        return owner_chan

    def ksa_channel(self, bootstrap_octets: int = 1 << 22) -> SecureChannel:
        """Owner->KSA channel sealed under a pre-provisioned bootstrap key
        (the owner shares node 1 with its KSA)."""
        owner_sock, ksa_sock = channel_pair()
        session = self._rng.getrandbits(63)
        bootstrap = self.fabric.ksa(self.owner_node).request(
            self.owner_id, self.owner_node + 1, bootstrap_octets, "bootstrap")
        service = KsaService(self.fabric, self.owner_node, self.ledger)

        def fixed_source(n):
            return bootstrap

        owner_chan = SecureChannel(
            owner_sock, OWNER_SENDER, session, key_source=fixed_source,
            key_lookup=self._key_lookup(self.owner_node),
            replay=self._owner_replay, range_audit=self.range_audit,
            ledger=self.ledger, tap=self.tap)
        ksa_chan = SecureChannel(
            ksa_sock, 0, session, key_source=fixed_source,
            key_lookup=self._key_lookup(self.owner_node),
            replay=self._replay_guards[self.owner_node],
            range_audit=self.range_audit, ledger=self.ledger, tap=self.tap)
        self._channels += [owner_chan, ksa_chan]

        def loop():
            try:
                while True:
                    message = ksa_chan.recv_message()
                    ksa_chan.send_message(service.handle(message))
            except (ChannelClosed, OSError):
                pass

        thread = threading.Thread(target=loop, daemon=True)
        thread.start()
        self._threads.append(thread)
        return owner_chan

    # -- convenience -------------------------------------------------------

    def prefill_pools(self, data_id: bytes, quorum, attempts: int = 1):
        """Run pre-computation rounds ahead of reconstruction."""
        quorum = tuple(sorted(quorum))
        initiator = self.servers[quorum[0]]
        return initiator.run_precompute_round(data_id, quorum, attempts)

    def keystats(self) -> dict:
        totals = self.ledger.totals()
        return {
            "consumed": totals,
            "consumed_total": sum(totals.values()),
            "delivered_total": self.fabric.delivered_octets(),
        }

    def stop_server(self, j: int):
        self.servers[j].stop()

    def close(self):
        for channel in self._channels:
            channel.close()


# Shared by the in-process deployment and the TCP host: one sealed
# duplex channel serving one client connection.
def serve_tcp(listener: socket.socket, accept_channel, handler):
    """Accept loop: build a channel per connection, dispatch messages."""
    def accept_loop():
        while True:
            try:
                sock, _ = listener.accept()
            except OSError:
                return
            channel = accept_channel(sock)

            def conn_loop(chan=channel):
                try:
                    while True:
                        message = chan.recv_message()
                        for reply in handler(message, chan):
                            chan.send_message(reply)
                except (ChannelClosed, OSError):
                    pass

            threading.Thread(target=conn_loop, daemon=True).start()

    thread = threading.Thread(target=accept_loop, daemon=True)
    thread.start()
    return thread
