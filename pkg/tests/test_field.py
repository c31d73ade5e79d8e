import random

import pytest

from passtore.field import (
    EntropyExhausted,
    FieldElement,
    FieldError,
    MersennePrime,
    StubBits,
    mersenne_field,
)
from passtore.stats import chi_square_critical, chi_square_uniform

GF31 = mersenne_field(5)
GF521 = mersenne_field(521)


def test_construction_rejects_non_mersenne_exponents():
    for bad in (4, 11, 10041, 0, -5):
        with pytest.raises(FieldError):
            MersennePrime(bad)


def test_modulus_value():
    assert GF31.q == 31
    assert mersenne_field(61).q == 2**61 - 1
    assert GF521.q == 2**521 - 1


def test_reduce_examples():
    assert GF31.reduce(35) == 4
    assert GF31.reduce(31) == 0
    assert GF31.reduce(1022) == 30  # 1022 - 32*31


def test_reduce_matches_naive_modulo():
    rng = random.Random(0xF01D)
    for f in (GF31, GF521):
        for _ in range(10_000):
            x = rng.randrange(1 << (2 * f.m))
            assert f.reduce(x) == x % f.q


def test_add_examples():
    assert GF31.add(25, 10) == 4
    assert GF31.add(0, 17) == 17
    assert GF31.add(30, 1) == 0


def test_mul_examples():
    assert GF31.mul(6, 7) == 11
    assert GF31.mul(1, 23) == 23
    assert GF521.mul(2**520, 2) == 1  # 2^m == 1 mod 2^m - 1


def test_inv_examples():
    assert GF31.inv(2) == 16
    assert GF31.inv(1) == 1
    with pytest.raises(ZeroDivisionError):
        GF31.inv(0)


def _egcd_inverse(a, q):
    x0, x1, r0, r1 = 1, 0, a, q
    while r1:
        quot = r0 // r1
        x0, x1 = x1, x0 - quot * x1
        r0, r1 = r1, r0 - quot * r1
    return x0 % q


def test_inv_matches_extended_euclid_on_all_of_gf31():
    for a in range(1, 31):
        assert GF31.inv(a) == _egcd_inverse(a, 31)
        assert GF31.mul(a, GF31.inv(a)) == 1


def test_field_algebra_randomized():
    rng = random.Random(7)
    for f in (GF31, GF521):
        for _ in range(300):
            a = rng.randrange(f.q)
            b = rng.randrange(f.q)
            c = rng.randrange(f.q)
            assert f.add(a, b) == f.add(b, a)
            assert f.mul(a, b) == f.mul(b, a)
            assert f.add(f.add(a, b), c) == f.add(a, f.add(b, c))
            assert f.mul(f.mul(a, b), c) == f.mul(a, f.mul(b, c))
            assert f.mul(a, f.add(b, c)) == f.add(f.mul(a, b), f.mul(a, c))
            assert f.add(a, f.neg(a)) == 0
            assert f.sub(a, b) == f.add(a, f.neg(b))


def test_serialization_fixed_width_little_endian():
    assert GF31.to_bytes(4) == b"\x04"
    assert mersenne_field(61).to_bytes(1) == b"\x01" + b"\x00" * 7
    assert GF521.elem_bytes == 66


def test_serialization_round_trip_exhaustive_gf31():
    for x in range(31):
        assert GF31.from_bytes(GF31.to_bytes(x)) == x


def test_serialization_round_trip_random_gf521():
    rng = random.Random(11)
    for _ in range(1000):
        x = rng.randrange(GF521.q)
        encoded = GF521.to_bytes(x)
        assert len(encoded) == 66
        assert GF521.from_bytes(encoded) == x


def test_deserialization_rejects_out_of_range_and_wrong_length():
    with pytest.raises(FieldError):
        GF31.from_bytes(b"\x1f")  # 31 == q
    with pytest.raises(FieldError):
        GF31.from_bytes(b"\x01\x00")
    with pytest.raises(FieldError):
        GF521.from_bytes(b"\xff" * 66)


def test_random_element_stubbed_draws():
    assert GF31.random_element(StubBits([0b00101])) == 5
    # the all-ones pattern equals q and is rejected, then redrawn
    assert GF31.random_element(StubBits([0b11111, 0b00011])) == 3


def test_random_element_entropy_exhaustion():
    with pytest.raises(EntropyExhausted):
        GF31.random_element(StubBits([0b11111]))


def test_random_element_uniformity_chi_square():
    rng = random.Random(0xACE)
    counts = [0] * 31
    for _ in range(100_000):
        counts[GF31.random_element(rng)] += 1
    stat = chi_square_uniform(counts)
    assert stat < chi_square_critical(30, 0.01), stat


def test_field_element_wrapper_ops():
    a = FieldElement(25, GF31)
    b = FieldElement(10, GF31)
    assert (a + b).value == 4
    assert (a * b).value == GF31.mul(25, 10)
    assert (a - b).value == 15
    assert (a / b).value == GF31.mul(25, GF31.inv(10))
    assert (-a).value == 6
    assert int(a ** 2) == GF31.mul(25, 25)
    assert FieldElement.from_bytes(a.to_bytes(), GF31) == a


def test_field_element_mismatch_rejected():
    a = FieldElement(3, GF31)
    b = FieldElement(3, mersenne_field(13))
    for op in (lambda: a + b, lambda: a * b, lambda: a - b, lambda: a / b):
        with pytest.raises(FieldError):
            op()


def test_field_element_canonical_invariant():
    with pytest.raises(FieldError):
        FieldElement(31, GF31)
    with pytest.raises(FieldError):
        FieldElement(-1, GF31)
