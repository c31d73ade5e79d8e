"""Password-authenticated secret sharing: the three-phase protocol core.

Registration splits the data into (m-1)-bit blocks, appends a
polynomial MAC block keyed by the password, shares every block at
degree 2t and the password at degree t.  Pre-computation has each
quorum member contribute a degree-t sharing of a fresh random value and
a degree-2t sharing of zero.  At reconstruction each server answers

    F = (f_P(j) - f_P'(j)) * R + Z + f_D(j)

where R and Z sum the quorum's randomizer and zero shares for this
block; the masks cancel at x = 0 exactly when the password guess is
correct, and any wrong guess leaves every reconstructed block uniform.
Masks are consume-once: a PrecomputedSet is dead after a single
response, successful or not.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field as dc_field
from typing import Optional

from .field import MersennePrime
from .sharing import (
    Share,
    SharingError,
    interpolate_at_zero,
    random_polynomial,
    zero_polynomial,
)


class SchemeError(ValueError):
    """Parameter, codec, or protocol-state violation."""


class AuthenticationFailure(Exception):
    """MAC mismatch: wrong password or forged responses, by design
    indistinguishable."""


class SetConsumed(SchemeError):
    """A PrecomputedSet was offered for a second response."""


@dataclass(frozen=True, slots=True)
class SchemeParams:
    """Protocol parameters: n servers, corruption bound t, field.

    Data and zero polynomials have degree 2t, password and randomizer
    polynomials degree t, and a reconstruction quorum holds 2t + 1
    servers.  Valid only when n >= 2t + 1.
    """

    n: int
    t: int
    field: MersennePrime

    def __post_init__(self):
        if self.t < 1:
            raise SchemeError("corruption bound t must be >= 1")
        if self.n < 2 * self.t + 1:
            raise SchemeError(
                f"n={self.n} violates n >= 2t+1 for t={self.t}")
        if self.n >= self.field.q:
            raise SchemeError(f"n={self.n} too large for m={self.field.m}")

    @property
    def data_degree(self) -> int:
        return 2 * self.t

    @property
    def pass_degree(self) -> int:
        return self.t

    @property
    def quorum_size(self) -> int:
        return 2 * self.t + 1

    def check_quorum(self, quorum: tuple) -> tuple:
        """Validate a quorum: correct size, distinct indices in 1..n."""
        quorum = tuple(quorum)
        if len(quorum) != self.quorum_size or len(set(quorum)) != len(quorum):
            raise SchemeError(
                f"improper request: quorum {quorum} must name"
                f" {self.quorum_size} distinct servers")
        for j in quorum:
            if not 1 <= j <= self.n:
                raise SchemeError(f"quorum member {j} outside 1..{self.n}")
        return quorum


# ---------------------------------------------------------------------------
# Block codec


@dataclass(frozen=True, slots=True)
class BlockVector:
    """Data as (m-1)-bit blocks plus the MAC block.

    blocks[i] carries bits i*(m-1) .. (i+1)*(m-1)-1 of the data read as
    a little-endian integer, so blocks[0] is the lowest limb.  Every
    data block is < 2^(m-1); the MAC block is an unrestricted field
    element.
    """

    blocks: tuple
    byte_length: int
    field: MersennePrime
    mac_block: Optional[int] = None

    def with_mac(self, mac: int) -> "BlockVector":
        return BlockVector(self.blocks, self.byte_length, self.field, mac)

    @property
    def block_count(self) -> int:
        return len(self.blocks)


def block_count(byte_length: int, m: int) -> int:
    """Number of (m-1)-bit blocks needed for byte_length octets."""
    if byte_length < 1:
        raise SchemeError("data must be non-empty")
    return -(-8 * byte_length // (m - 1))


def encode_blocks(data: bytes, field: MersennePrime) -> BlockVector:
    """Split data into (m-1)-bit limbs, least significant first.

    The final limb is zero-padded; the exact byte length is kept so the
    padding can be stripped and checked on decode.
    """
    if not data:
        raise SchemeError("data must be non-empty")
    width = field.m - 1
    mask = (1 << width) - 1
    value = int.from_bytes(data, "little")
    l = block_count(len(data), field.m)
    blocks = []
    for _ in range(l):
        blocks.append(value & mask)
        value >>= width
    return BlockVector(tuple(blocks), len(data), field)


def decode_blocks(bv: BlockVector) -> bytes:
    """Exact inverse of encode_blocks, rejecting inconsistent blocks."""
    width = bv.field.m - 1
    if len(bv.blocks) != block_count(bv.byte_length, bv.field.m):
        raise SchemeError(
            f"{len(bv.blocks)} blocks inconsistent with"
            f" {bv.byte_length}-byte payload at m={bv.field.m}")
    value = 0
    for i, b in enumerate(bv.blocks):
        if not 0 <= b < (1 << width):
            raise SchemeError(f"block {i} value {b} overflows {width} bits")
        value |= b << (i * width)
    if value >> (8 * bv.byte_length):
        raise SchemeError("nonzero padding bits in final block")
    return value.to_bytes(bv.byte_length, "little")


def encode_password(passphrase: bytes, field: MersennePrime) -> int:
    """Interpret passphrase octets directly as a little-endian integer.

    No hashing or stretching: compression would void the
    information-theoretic analysis.  The value must fit in m - 1 bits.
    """
    if not passphrase:
        raise SchemeError("empty password")
    value = int.from_bytes(passphrase, "little")
    if value >> (field.m - 1):
        raise SchemeError(
            f"password does not fit in {field.m - 1} bits; use a larger m"
            f" or a shorter passphrase")
    return value


def compute_mac(blocks, password: int, field: MersennePrime) -> int:
    """Polynomial checksum sum_{i=1..l} D_i * P^i, Horner form."""
    blocks = list(blocks)
    if not blocks:
        raise SchemeError("MAC needs at least one block")
    acc = 0
    for b in reversed(blocks):
        acc = field.mul(field.add(acc, b), password)
    return acc


# ---------------------------------------------------------------------------
# Registration


@dataclass(frozen=True, slots=True)
class RegistrationBundle:
    """Everything server j stores for one data object.

    data_shares[i] is f_{D_{i+1}}(j) for blocks 1..l plus the MAC block
    l+1; password_share is f_P(j).  byte_length travels with the bundle
    so a reconstructing owner needs no local state.
    """

    owner_id: int
    data_id: bytes
    server: int
    params: SchemeParams
    data_shares: tuple
    password_share: int
    byte_length: int

    @property
    def block_total(self) -> int:
        return len(self.data_shares)

    def validate(self):
        l = block_count(self.byte_length, self.params.field.m)
        if len(self.data_shares) != l + 1:
            raise SchemeError(
                f"bundle holds {len(self.data_shares) + 1} shares,"
                f" expected {l + 2}")
        for v in (*self.data_shares, self.password_share):
            self.params.field.check(v)


def register(data: bytes, password: int, params: SchemeParams, entropy,
             owner_id: int = 0, data_id: bytes = b"") -> list[RegistrationBundle]:
    """Share data blocks (degree 2t) and password (degree t) for all n
    servers; returns one bundle per server index 1..n."""
    f = params.field
    if password >> (f.m - 1):
        raise SchemeError("password exceeds m-1 bits")
    bv = encode_blocks(data, f)
    mac = compute_mac(bv.blocks, password, f)
    all_blocks = (*bv.blocks, mac)

    per_server = [[] for _ in range(params.n)]
    for block in all_blocks:
        poly = random_polynomial(block, params.data_degree, f, entropy)
        for j in range(1, params.n + 1):
            per_server[j - 1].append(poly.evaluate(j))
    pass_poly = random_polynomial(password, params.pass_degree, f, entropy)

    return [
        RegistrationBundle(
            owner_id=owner_id,
            data_id=data_id,
            server=j,
            params=params,
            data_shares=tuple(per_server[j - 1]),
            password_share=pass_poly.evaluate(j),
            byte_length=len(data),
        )
        for j in range(1, params.n + 1)
    ]


# ---------------------------------------------------------------------------
# Pre-computation


@dataclass(frozen=True, slots=True)
class PrecomputedContribution:
    """One server's fresh material for one set: a degree-t sharing of a
    uniform random value and a degree-2t sharing of zero, both evaluated
    at every quorum point."""

    holder: int
    quorum: tuple
    randomizer_shares: dict  # point -> f_{R_h}(point)
    zero_shares: dict        # point -> f_{0_h}(point)


def gen_precomputed_contribution(params: SchemeParams, holder: int,
                                 quorum: tuple, entropy) -> PrecomputedContribution:
    quorum = params.check_quorum(quorum)
    if holder not in quorum:
        raise SchemeError(f"server {holder} is not in quorum {quorum}")
    f = params.field
    r_poly = random_polynomial(f.random_element(entropy), params.pass_degree,
                               f, entropy)
    z_poly = zero_polynomial(params.data_degree, f, entropy)
    return PrecomputedContribution(
        holder=holder,
        quorum=quorum,
        randomizer_shares={p: r_poly.evaluate(p) for p in quorum},
        zero_shares={p: z_poly.evaluate(p) for p in quorum},
    )


_consume_lock = threading.Lock()


@dataclass(slots=True)
class PrecomputedSet:
    """Server j's consume-once mask material for one block response.

    randomizer_shares[h] = f_{R_h}(j) and zero_shares[h] = f_{0_h}(j)
    for every h in the quorum.  block_index is stamped when the set is
    bound to an attempt.  The consumed flag flips false -> true exactly
    once; a second consumption attempt raises SetConsumed.
    """

    quorum: tuple
    holder: int
    randomizer_shares: dict
    zero_shares: dict
    set_id: tuple = (0, 0)
    block_index: Optional[int] = None
    consumed: bool = dc_field(default=False)

    def consume(self, block_index: int):
        with _consume_lock:
            if self.consumed:
                raise SetConsumed(f"set {self.set_id} already consumed")
            self.consumed = True
            self.block_index = block_index


def assemble_set(contributions, holder: int, set_id=(0, 0)) -> PrecomputedSet:
    """Collect one contribution per quorum member into holder's set."""
    contributions = list(contributions)
    quorum = contributions[0].quorum
    holders = sorted(c.holder for c in contributions)
    if holders != sorted(quorum):
        raise SchemeError(
            f"need one contribution per quorum member {quorum}, got {holders}")
    for c in contributions:
        if c.quorum != quorum:
            raise SchemeError("contributions disagree on the quorum")
    return PrecomputedSet(
        quorum=quorum,
        holder=holder,
        randomizer_shares={c.holder: c.randomizer_shares[holder]
                           for c in contributions},
        zero_shares={c.holder: c.zero_shares[holder] for c in contributions},
        set_id=set_id,
    )


# ---------------------------------------------------------------------------
# Reconstruction


@dataclass(frozen=True, slots=True)
class ReconstructionRequest:
    """What one server receives: the quorum and its share of the guess."""

    quorum: tuple
    password_share: int
    data_id: bytes = b""
    attempt_id: int = 0


@dataclass(frozen=True, slots=True)
class ReconstructionResponse:
    """One server's masked values F_{j,1} .. F_{j,l+1}."""

    server: int
    values: tuple


def make_request(password_guess: int, params: SchemeParams, quorum: tuple,
                 entropy, data_id: bytes = b"",
                 attempt_id: int = 0) -> dict[int, ReconstructionRequest]:
    """Degree-t sharing of the guess, one request per quorum member."""
    quorum = params.check_quorum(quorum)
    poly = random_polynomial(password_guess, params.pass_degree,
                             params.field, entropy)
    return {
        j: ReconstructionRequest(quorum, poly.evaluate(j), data_id, attempt_id)
        for j in quorum
    }


def respond(bundle: RegistrationBundle, pset: PrecomputedSet,
            request: ReconstructionRequest, block_index: int) -> int:
    """F_{j,i} = (f_P(j) - f_P'(j)) * R + Z + f_{D_i}(j).

    Consumes the set (exactly once) whatever the outcome of the wider
    attempt; rejects quorum mismatches and wrong-size quorums before
    touching the masks.
    """
    params = bundle.params
    quorum = params.check_quorum(request.quorum)
    if pset.quorum != quorum:
        raise SchemeError(
            f"precomputed set is bound to quorum {pset.quorum},"
            f" request names {quorum}")
    if not 1 <= block_index <= bundle.block_total:
        raise SchemeError(f"block index {block_index} out of range")
    pset.consume(block_index)

    f = params.field
    r_sum = 0
    z_sum = 0
    for h in quorum:
        r_sum = f.add(r_sum, pset.randomizer_shares[h])
        z_sum = f.add(z_sum, pset.zero_shares[h])
    diff = f.sub(bundle.password_share, request.password_share)
    masked = f.add(f.mul(diff, r_sum), z_sum)
    return f.add(masked, bundle.data_shares[block_index - 1])


def reconstruct(per_block_responses, params: SchemeParams,
                byte_length: int) -> BlockVector:
    """Interpolate every block's responses at zero (degree 2t).

    per_block_responses[i] is the list of (server, F) pairs for block
    i + 1; the last block is the MAC block.
    """
    f = params.field
    values = []
    for responses in per_block_responses:
        shares = [Share(j, v) for j, v in responses]
        values.append(interpolate_at_zero(shares, params.data_degree, f))
    if len(values) < 2:
        raise SchemeError("need at least one data block plus the MAC block")
    return BlockVector(tuple(values[:-1]), byte_length, f, values[-1])


def verify_and_decode(bv: BlockVector, password: int) -> bytes:
    """Recompute the MAC; on match decode, on mismatch fail closed.

    A mismatch means a wrong password or tampered responses; the two
    are indistinguishable by design.
    """
    if bv.mac_block is None:
        raise SchemeError("block vector carries no MAC block")
    expected = compute_mac(bv.blocks, password, bv.field)
    if expected != bv.mac_block:
        raise AuthenticationFailure("reconstructed data failed authentication")
    return decode_blocks(bv)
