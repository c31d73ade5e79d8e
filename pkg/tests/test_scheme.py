import random

import pytest

from passtore.field import StubBits, mersenne_field
from passtore.scheme import (
    AuthenticationFailure,
    BlockVector,
    PrecomputedContribution,
    PrecomputedSet,
    RegistrationBundle,
    SchemeError,
    SchemeParams,
    SetConsumed,
    assemble_set,
    block_count,
    compute_mac,
    decode_blocks,
    encode_blocks,
    encode_password,
    gen_precomputed_contribution,
    make_request,
    reconstruct,
    register,
    respond,
    verify_and_decode,
)
from passtore.sharing import SharePolynomial

GF31 = mersenne_field(5)
GF8191 = mersenne_field(13)
GF521 = mersenne_field(521)

PARAMS31 = SchemeParams(n=3, t=1, field=GF31)


def test_params_validation():
    with pytest.raises(SchemeError):
        SchemeParams(n=2, t=1, field=GF31)
    with pytest.raises(SchemeError):
        SchemeParams(n=3, t=0, field=GF31)
    with pytest.raises(SchemeError):
        SchemeParams(n=40, t=1, field=GF31)
    p = SchemeParams(n=4, t=1, field=GF31)
    assert (p.data_degree, p.pass_degree, p.quorum_size) == (2, 1, 3)


def test_encode_blocks_examples():
    bv = encode_blocks(b"\xab", GF31)
    assert bv.blocks == (11, 10)
    assert bv.byte_length == 1

    assert encode_blocks(b"\x00", GF31).blocks == (0, 0)

    big = encode_blocks(bytes(6955), GF521)
    assert big.block_count == 107


def test_block_count_formula():
    assert block_count(6955, 521) == 107
    assert block_count(46000, 86243) == 5
    # non-increasing in m for fixed size
    ms = sorted(m for m in (521, 1279, 2203, 3217, 4253))
    counts = [block_count(13695, m) for m in ms]
    assert counts == sorted(counts, reverse=True)


def test_decode_blocks_round_trip():
    rng = random.Random(1)
    for size in range(1, 65):
        data = rng.randbytes(size)
        assert decode_blocks(encode_blocks(data, GF31)) == data


def test_decode_blocks_examples_and_errors():
    assert decode_blocks(BlockVector((11, 10), 1, GF31)) == b"\xab"
    with pytest.raises(SchemeError):
        decode_blocks(BlockVector((16, 0), 1, GF31))  # limb overflow
    with pytest.raises(SchemeError):
        decode_blocks(BlockVector((256,), 1, GF8191))  # nonzero padding bits
    with pytest.raises(SchemeError):
        decode_blocks(BlockVector((11,), 1, GF31))  # wrong block count


def test_encode_password():
    assert encode_password(b"\x05", GF8191) == 5
    assert encode_password(b"pw", GF521) == int.from_bytes(b"pw", "little")
    with pytest.raises(SchemeError):
        encode_password(b"\xff", GF31)  # 255 needs more than 4 bits
    with pytest.raises(SchemeError):
        encode_password(b"", GF31)


def test_compute_mac_examples():
    assert compute_mac([5, 7], 2, GF31) == 7  # 5*2 + 7*4 = 38 = 7 mod 31
    assert compute_mac([5, 7], 0, GF31) == 0
    assert compute_mac([0, 0, 0], 13, GF31) == 0


def test_register_structure_single_block():
    # one data block D_1 = 5 (one byte at m=13), password 2
    params = SchemeParams(n=3, t=1, field=GF8191)
    bundles = register(b"\x05", 2, params, random.Random(2))
    assert len(bundles) == 3
    for j, b in enumerate(bundles, start=1):
        assert b.server == j
        assert len(b.data_shares) == 2  # block + MAC block
        b.validate()
    # the MAC block itself: any 2t+1 shares of block 2 interpolate to 10
    mac_responses = [(b.server, b.data_shares[1]) for b in bundles]
    bv = reconstruct([[(j, b.data_shares[0]) for j, b in
                       zip((1, 2, 3), bundles)], mac_responses],
                     params, byte_length=1)
    assert bv.blocks == (5,)
    assert bv.mac_block == 10  # compute_mac([5], 2)


def test_register_shares_interpolate_back():
    params = SchemeParams(n=5, t=2, field=GF31)
    rng = random.Random(3)
    data = b"\x37\x9a"
    bundles = register(data, 6, params, rng)
    bv = encode_blocks(data, GF31)
    for i in range(len(bv.blocks)):
        responses = [(b.server, b.data_shares[i]) for b in bundles[:5]]
        from passtore.sharing import Share, interpolate_at_zero
        got = interpolate_at_zero([Share(j, v) for j, v in responses],
                                  params.data_degree, GF31)
        assert got == bv.blocks[i]


def test_register_rejects_oversized_password():
    with pytest.raises(SchemeError):
        register(b"\x01", 16, PARAMS31, random.Random(0))  # 16 >= 2^4


def test_gen_precomputed_contribution_fixed():
    # R = 7, randomizer coefficient 1: polynomial 7 + x; zero poly 0
    contrib = gen_precomputed_contribution(
        PARAMS31, 1, (1, 2, 3), StubBits([7, 1, 0, 0]))
    assert contrib.randomizer_shares == {1: 8, 2: 9, 3: 10}
    assert contrib.zero_shares == {1: 0, 2: 0, 3: 0}


def test_contribution_requires_membership():
    params = SchemeParams(n=4, t=1, field=GF31)
    with pytest.raises(SchemeError):
        gen_precomputed_contribution(params, 4, (1, 2, 3), random.Random(0))


def test_zero_contributions_interpolate_to_zero():
    from passtore.sharing import Share, interpolate_at_zero
    rng = random.Random(4)
    for _ in range(25):
        contrib = gen_precomputed_contribution(PARAMS31, 2, (1, 2, 3), rng)
        shares = [Share(p, v) for p, v in contrib.zero_shares.items()]
        assert interpolate_at_zero(shares, 2, GF31) == 0


def test_contribution_rounds_are_independent():
    # correlation across rounds of the randomizer share at one point
    rng = random.Random(5)
    pairs = []
    prev = None
    for _ in range(10_000):
        c = gen_precomputed_contribution(PARAMS31, 1, (1, 2, 3), rng)
        v = c.randomizer_shares[2]
        if prev is not None:
            pairs.append((prev, v))
        prev = v
    n = len(pairs)
    mean = 15.0  # uniform over 0..30
    var = (31 * 31 - 1) / 12
    cov = sum((a - mean) * (b - mean) for a, b in pairs) / n
    assert abs(cov / var) < 0.05


def test_make_request_fixed_polynomial():
    requests = make_request(2, PARAMS31, (1, 2, 3), StubBits([6]))
    assert {j: r.password_share for j, r in requests.items()} == {
        1: 8, 2: 14, 3: 20}


def test_make_request_share_is_uniform():
    from passtore.stats import chi_square_critical, chi_square_uniform
    rng = random.Random(6)
    counts = [0] * 31
    for _ in range(100_000):
        counts[make_request(2, PARAMS31, (1, 2, 3), rng)[1].password_share] += 1
    assert chi_square_uniform(counts) < chi_square_critical(30, 0.01)


def test_make_request_rejects_bad_quorum():
    with pytest.raises(SchemeError):
        make_request(2, PARAMS31, (1, 2), StubBits([6]))


# ---------------------------------------------------------------------------
# Full hand trace over GF(31), n=3, t=1:
#   f_P = 2 + 4x;  f_D1 = 5 + 3x + 2x^2
#   randomizers 7+x, 1+2x, 4+5x;  zero polys x+x^2, 2x, 3x^2
#   correct-guess request from 2 + 6x, wrong-guess from 3 + 6x


def _poly(*coeffs):
    return SharePolynomial(tuple(coeffs), GF31)


def _trace_fixture():
    quorum = (1, 2, 3)
    f_p = _poly(2, 4)
    f_d = _poly(5, 3, 2)
    randomizers = {1: _poly(7, 1), 2: _poly(1, 2), 3: _poly(4, 5)}
    zeros = {1: _poly(0, 1, 1), 2: _poly(0, 2, 0), 3: _poly(0, 0, 3)}
    contribs = [
        PrecomputedContribution(
            holder=h,
            quorum=quorum,
            randomizer_shares={p: randomizers[h].evaluate(p) for p in quorum},
            zero_shares={p: zeros[h].evaluate(p) for p in quorum},
        )
        for h in quorum
    ]
    bundles = {
        j: RegistrationBundle(
            owner_id=0, data_id=b"", server=j, params=PARAMS31,
            data_shares=(f_d.evaluate(j),),
            password_share=f_p.evaluate(j), byte_length=1)
        for j in quorum
    }
    sets = {j: assemble_set(contribs, holder=j) for j in quorum}
    return quorum, bundles, sets


def test_respond_hand_trace_correct_guess():
    quorum, bundles, sets = _trace_fixture()
    requests = make_request(2, PARAMS31, quorum, StubBits([6]))
    values = {j: respond(bundles[j], sets[j], requests[j], 1) for j in quorum}
    assert values == {1: 8, 2: 22, 3: 16}
    bv = reconstruct([[(j, values[j]) for j in quorum]] * 2,
                     PARAMS31, byte_length=1)
    assert bv.blocks[0] == 5


def test_respond_hand_trace_wrong_guess():
    quorum, bundles, sets = _trace_fixture()
    requests = make_request(3, PARAMS31, quorum, StubBits([6]))
    values = {j: respond(bundles[j], sets[j], requests[j], 1) for j in quorum}
    assert values == {1: 19, 2: 25, 3: 11}
    bv = reconstruct([[(j, values[j]) for j in quorum]] * 2,
                     PARAMS31, byte_length=1)
    # F(0) = (P - P') * f_R(0) + D_1 = -12 + 5 = 24 mod 31
    assert bv.blocks[0] == 24


def test_respond_consume_once():
    quorum, bundles, sets = _trace_fixture()
    requests = make_request(2, PARAMS31, quorum, StubBits([6]))
    respond(bundles[1], sets[1], requests[1], 1)
    with pytest.raises(SetConsumed):
        respond(bundles[1], sets[1], requests[1], 1)


def test_respond_rejects_quorum_mismatch():
    params = SchemeParams(n=4, t=1, field=GF31)
    rng = random.Random(7)
    bundles = register(b"\x05", 2, params, rng)
    quorum_a = (1, 2, 3)
    quorum_b = (1, 2, 4)
    contribs = [gen_precomputed_contribution(params, h, quorum_a, rng)
                for h in quorum_a]
    pset = assemble_set(contribs, holder=1)
    request = make_request(2, params, quorum_b, rng)[1]
    with pytest.raises(SchemeError):
        respond(bundles[0], pset, request, 1)
    assert not pset.consumed


def test_reconstruct_constant_responses():
    bv = reconstruct([[(1, 9), (2, 9), (3, 9)], [(1, 4), (2, 4), (3, 4)]],
                     PARAMS31, byte_length=1)
    assert bv.blocks == (9,)
    assert bv.mac_block == 4


def test_verify_and_decode_accepts_matching_mac():
    bv = BlockVector((5,), 1, GF8191, mac_block=10)
    assert verify_and_decode(bv, 2) == b"\x05"


def test_verify_and_decode_rejects_mismatch():
    bv = BlockVector((5,), 1, GF8191, mac_block=11)
    with pytest.raises(AuthenticationFailure):
        verify_and_decode(bv, 2)


def _run_attempt(data, password, guess, params, rng):
    """Full in-memory protocol round: register, precompute, respond,
    reconstruct.  Returns the reconstructed BlockVector."""
    bundles = {b.server: b for b in register(data, password, params, rng)}
    quorum = tuple(range(1, params.quorum_size + 1))
    requests = make_request(guess, params, quorum, rng)
    l_plus_1 = bundles[1].block_total
    per_block = []
    for i in range(1, l_plus_1 + 1):
        contribs = [gen_precomputed_contribution(params, h, quorum, rng)
                    for h in quorum]
        responses = []
        for j in quorum:
            pset = assemble_set(contribs, holder=j)
            responses.append((j, respond(bundles[j], pset, requests[j], i)))
        per_block.append(responses)
    return reconstruct(per_block, params, len(data))


def test_end_to_end_correct_password_over_gf31():
    rng = random.Random(8)
    for _ in range(20):
        data = rng.randbytes(rng.randrange(1, 6))
        password = rng.randrange(16)
        bv = _run_attempt(data, password, password, PARAMS31, rng)
        assert verify_and_decode(bv, password) == data


def test_correct_guess_recovers_blocks_for_every_password():
    # exhaustive over the password space at q=31, t=1, differing polynomials
    rng = random.Random(9)
    for password in range(16):
        bv = _run_attempt(b"\x92", password, password, PARAMS31, rng)
        assert bv.blocks == encode_blocks(b"\x92", GF31).blocks


def test_wrong_guess_fails_authentication():
    rng = random.Random(10)
    failures = 0
    for _ in range(50):
        password = rng.randrange(16)
        guess = (password + 1 + rng.randrange(14)) % 16
        bv = _run_attempt(rng.randbytes(3), password, guess, PARAMS31, rng)
        try:
            verify_and_decode(bv, guess)
        except AuthenticationFailure:
            failures += 1
    # acceptance probability is l/q per attempt; 50 attempts at l=7, q=31
    # may admit a rare fluke but never most of them
    assert failures >= 45


def test_correctness_identity_random_instances():
    # F(x) = (f_P(x) - f_P'(x)) * f_R(x) + f_Z(x) + f_D(x) with f_R, f_Z
    # the sums of the per-holder polynomials
    rng = random.Random(11)
    for _ in range(200):
        params = PARAMS31
        f = GF31
        quorum = (1, 2, 3)
        f_p = _poly(*(rng.randrange(31) for _ in range(2)))
        f_g = _poly(*(rng.randrange(31) for _ in range(2)))
        f_d = _poly(*(rng.randrange(31) for _ in range(3)))
        r_polys = {h: _poly(*(rng.randrange(31) for _ in range(2)))
                   for h in quorum}
        z_polys = {h: _poly(0, *(rng.randrange(31) for _ in range(2)))
                   for h in quorum}
        contribs = [
            PrecomputedContribution(
                holder=h, quorum=quorum,
                randomizer_shares={p: r_polys[h].evaluate(p) for p in quorum},
                zero_shares={p: z_polys[h].evaluate(p) for p in quorum})
            for h in quorum
        ]
        for j in quorum:
            bundle = RegistrationBundle(
                owner_id=0, data_id=b"", server=j, params=params,
                data_shares=(f_d.evaluate(j),),
                password_share=f_p.evaluate(j), byte_length=1)
            pset = assemble_set(contribs, holder=j)
            got = respond(
                bundle, pset,
                make_request_like(quorum, f_g.evaluate(j)), 1)
            r_sum = 0
            z_sum = 0
            for h in quorum:
                r_sum = f.add(r_sum, r_polys[h].evaluate(j))
                z_sum = f.add(z_sum, z_polys[h].evaluate(j))
            expect = f.add(
                f.add(f.mul(f.sub(f_p.evaluate(j), f_g.evaluate(j)), r_sum),
                      z_sum),
                f_d.evaluate(j))
            assert got == expect


def make_request_like(quorum, share):
    from passtore.scheme import ReconstructionRequest
    return ReconstructionRequest(quorum, share)
