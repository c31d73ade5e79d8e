import random

import pytest

from passtore.field import mersenne_field
from passtore.stats import bernoulli_bound
from passtore.transport import (
    HEADER_OCTETS,
    KeyExhausted,
    KeyRangeAudit,
    KeystreamCursor,
    PadReuse,
    ReplayDetected,
    ReplayGuard,
    TAG_FIELD,
    TAG_OCTETS,
    TagMismatch,
    TransportError,
    frame_size,
    key_cost,
    mac_key_from_octets,
    message_blocks,
    open_frame,
    parse_header,
    poly_tag,
    seal,
    wc_tag,
    xor_bytes,
)


def _key_material(rng, n=1 << 16, key_id=None):
    octets = rng.randbytes(n)
    key_id = key_id or rng.randbytes(16)
    reader = lambda off, k: octets[off:off + k]
    return key_id, octets, reader


def _cursors(rng):
    enc_id, _, enc_read = _key_material(rng)
    mac_id, _, mac_read = _key_material(rng)
    enc = KeystreamCursor(enc_id, enc_read, 1 << 16)
    mac = KeystreamCursor(mac_id, mac_read, 1 << 16)
    lookup = {enc_id: enc_read, mac_id: mac_read}
    return enc, mac, lookup.__getitem__


def test_poly_tag_single_block():
    assert poly_tag([5], (2, 3)) == 13  # b + m1*k


def test_wc_tag_empty_message_is_b():
    key = (12345, 999)
    assert wc_tag(b"", key) == TAG_FIELD.to_bytes(999)


def test_message_blocks_length_padding_is_injective():
    assert message_blocks(b"\x00") != message_blocks(b"\x00\x00")
    assert message_blocks(b"ab") != message_blocks(b"ab\x00")
    # 7-octet chunks at the 61-bit field
    assert len(message_blocks(b"x" * 14)) == 2
    assert len(message_blocks(b"x" * 15)) == 3


def test_mac_key_from_octets_reduces_into_field():
    k, b = mac_key_from_octets(b"\xff" * 16)
    assert 0 <= k < TAG_FIELD.q and 0 <= b < TAG_FIELD.q


def test_xor_bytes():
    assert xor_bytes(b"\xaa", b"\x0f") == b"\xa5"
    data = bytes(range(256))
    pad = bytes(reversed(range(256)))
    assert xor_bytes(xor_bytes(data, pad), pad) == data


def test_seal_open_round_trip():
    rng = random.Random(1)
    enc, mac, lookup = _cursors(rng)
    replay = ReplayGuard()
    for seq, size in enumerate([0, 1, 77, 1499, 1500]):
        plaintext = rng.randbytes(size)
        frame = seal(plaintext, 7, 3, 0xABCD, seq, enc, mac)
        assert len(frame) == frame_size(size)
        header, out = open_frame(frame, lookup, replay)
        assert out == plaintext
        assert (header.msg_type, header.sender) == (7, 3)


def test_seal_rejects_oversized_payload():
    rng = random.Random(2)
    enc, mac, _ = _cursors(rng)
    with pytest.raises(TransportError):
        seal(b"\x00" * 1501, 1, 1, 1, 1, enc, mac)


def test_seal_key_exhaustion_consumes_nothing():
    rng = random.Random(3)
    enc_id, _, enc_read = _key_material(rng)
    mac_id, _, mac_read = _key_material(rng)
    enc = KeystreamCursor(enc_id, enc_read, 10)
    mac = KeystreamCursor(mac_id, mac_read, 1 << 16)
    with pytest.raises(KeyExhausted):
        seal(b"\x00" * 11, 1, 1, 1, 1, enc, mac)
    assert enc.next_offset == 0 and mac.next_offset == 0
    # and a short mac cursor likewise
    mac_short = KeystreamCursor(mac_id, mac_read, 15)
    with pytest.raises(KeyExhausted):
        seal(b"\x00" * 5, 1, 1, 1, 2, enc, mac_short)
    assert enc.next_offset == 0 and mac_short.next_offset == 0


def test_key_cost_per_frame():
    assert key_cost(1500) == 1516
    assert key_cost(0) == 16


def test_single_bit_flips_never_accepted():
    rng = random.Random(4)
    enc, mac, lookup = _cursors(rng)
    plaintext = rng.randbytes(300)
    frame = seal(plaintext, 2, 1, 5, 1, enc, mac)
    accepted = 0
    for _ in range(10_000):
        bit = rng.randrange(len(frame) * 8)
        tampered = bytearray(frame)
        tampered[bit // 8] ^= 1 << (bit % 8)
        try:
            _, out = open_frame(bytes(tampered), lookup)
        except TransportError:
            continue
        accepted += 1
    assert accepted == 0


def test_ciphertext_flip_gives_tag_mismatch_before_decryption():
    rng = random.Random(5)
    enc, mac, lookup = _cursors(rng)
    frame = bytearray(seal(b"secret", 2, 1, 5, 1, enc, mac))
    frame[HEADER_OCTETS] ^= 0x01  # first ciphertext octet
    with pytest.raises(TagMismatch):
        open_frame(bytes(frame), lookup)


def test_replay_rejected():
    rng = random.Random(6)
    enc, mac, lookup = _cursors(rng)
    replay = ReplayGuard()
    f1 = seal(b"a", 1, 9, 77, 1, enc, mac)
    f2 = seal(b"b", 1, 9, 77, 2, enc, mac)
    open_frame(f2, lookup, replay)
    with pytest.raises(ReplayDetected):
        open_frame(f1, lookup, replay)  # sequence went backwards
    with pytest.raises(ReplayDetected):
        open_frame(f2, lookup, replay)  # exact repeat


def test_pad_reuse_detected_on_receive():
    rng = random.Random(7)
    enc_id, _, enc_read = _key_material(rng)
    mac_id, _, mac_read = _key_material(rng)
    lookup = {enc_id: enc_read, mac_id: mac_read}.__getitem__
    audit = KeyRangeAudit()
    # two frames whose cursors were (wrongly) rewound over the same range
    f1 = seal(b"hello", 1, 1, 3, 1,
              KeystreamCursor(enc_id, enc_read, 1 << 16),
              KeystreamCursor(mac_id, mac_read, 1 << 16))
    f2 = seal(b"world", 1, 1, 3, 2,
              KeystreamCursor(enc_id, enc_read, 1 << 16),
              KeystreamCursor(mac_id, mac_read, 1 << 16))
    open_frame(f1, lookup, audit=audit)
    with pytest.raises(PadReuse):
        open_frame(f2, lookup, audit=audit)


def test_audit_overlap_detection():
    audit = KeyRangeAudit()
    audit.record(b"k" * 16, 0, 100)
    audit.record(b"k" * 16, 100, 16)
    with pytest.raises(PadReuse):
        audit.record(b"k" * 16, 99, 2)
    audit.record(b"x" * 16, 0, 100)  # other key file is independent
    assert audit.total_octets() == 216


def test_unknown_key_id_rejected():
    rng = random.Random(8)
    enc, mac, _ = _cursors(rng)
    frame = seal(b"payload", 1, 1, 4, 1, enc, mac)

    def lookup(key_id):
        raise KeyError(key_id)

    from passtore.transport import UnknownKey
    with pytest.raises(UnknownKey):
        open_frame(frame, lookup)


def test_parse_header_rejects_garbage():
    from passtore.transport import FrameFormatError
    with pytest.raises(FrameFormatError):
        parse_header(b"nope")
    with pytest.raises(FrameFormatError):
        parse_header(b"XXXX" + bytes(HEADER_OCTETS - 4))


def _poly_from_roots(roots, field):
    """Coefficients (low to high) of prod (x - r)."""
    coeffs = [1]
    for r in roots:
        neg_r = field.neg(r)
        nxt = [0] * (len(coeffs) + 1)
        for i, c in enumerate(coeffs):
            nxt[i] = field.add(nxt[i], field.mul(c, neg_r))
            nxt[i + 1] = field.add(nxt[i + 1], c)
        coeffs = nxt
    return coeffs


def test_toy_field_forgery_rate_within_universal_hash_bound():
    # adversarial perturbation with s planted roots at GF(2^13 - 1):
    # acceptance means the tag key k hit a root, probability s/q
    field = mersenne_field(13)
    rng = random.Random(9)
    s = 4
    trials = 100_000
    accepted = 0
    blocks = [rng.randrange(field.q) for _ in range(s)]
    for _ in range(trials):
        key = (rng.randrange(field.q), rng.randrange(field.q))
        tag = poly_tag(blocks, key, field)
        # delta(x) = x * prod_{i<s-1} (x - u_i): degree s, zero constant term
        roots = rng.sample(range(1, field.q), s - 1)
        delta = _poly_from_roots(roots, field)
        forged = [field.add(b, d) for b, d in zip(blocks, delta)]
        if poly_tag(forged, key, field) == tag:
            accepted += 1
    bound = bernoulli_bound(s / field.q, trials)
    assert accepted / trials <= bound, (accepted / trials, bound)
