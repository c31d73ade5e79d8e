"""Arithmetic in GF(q) for Mersenne primes q = 2^m - 1.

All protocol values live in such a field.  Elements are canonical
residues held as plain Python ints in [0, q); the MersennePrime object
carries the modulus and provides the operations.  A thin FieldElement
wrapper exists for code that wants operator syntax and cross-field
mixing checks; the protocol internals use the int-level methods.

Reduction never divides: because 2^m == 1 (mod q), a value is reduced
by repeatedly folding its high bits onto its low m bits.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

# Exponents m for which 2^m - 1 is prime, restricted to the sizes this
# package uses: 5/13/31/61 for tests and transport tags, the rest for
# data storage.  2^10041 - 1 is composite (10041 = 3 * 3347), so any
# config asking for it is rejected here; 9941 is the nearby prime index.
KNOWN_MERSENNE_EXPONENTS = frozenset({
    5, 13, 31, 61, 521, 1279, 2203, 3217, 4253,
    9941, 11213, 19937, 23209, 44497, 86243,
})


class FieldError(ValueError):
    """Bad element, bad exponent, or cross-field operand mix."""


class EntropyExhausted(RuntimeError):
    """The supplied bit source ran out of bits."""


class MersennePrime:
    """The field GF(2^m - 1) with fold-based reduction.

    Instances are immutable and hashable; all methods are pure, so one
    instance may be shared freely across threads.
    """

    __slots__ = ("m", "q", "elem_bytes")

    def __init__(self, m: int):
        if m not in KNOWN_MERSENNE_EXPONENTS:
            raise FieldError(f"2^{m} - 1 is not a supported Mersenne prime")
        self.m = m
        self.q = (1 << m) - 1
        self.elem_bytes = (m + 7) // 8

    def __repr__(self):
        return f"MersennePrime(m={self.m})"

    def __eq__(self, other):
        return isinstance(other, MersennePrime) and other.m == self.m

    def __hash__(self):
        return hash(("MersennePrime", self.m))

    def reduce(self, x: int) -> int:
        """Canonical residue of a non-negative integer.

        Folds (x >> m) + (x & q) until the value fits in m bits, then
        maps the all-ones pattern (== q) to 0.
        """
        if x < 0:
            raise FieldError("reduce expects a non-negative integer")
        q = self.q
        while x > q:
            x = (x & q) + (x >> self.m)
        return 0 if x == q else x

    def check(self, a: int) -> int:
        """Validate that a is already canonical; returns it unchanged."""
        if not 0 <= a < self.q:
            raise FieldError(f"{a} is not a canonical element of GF(2^{self.m}-1)")
        return a

    def add(self, a: int, b: int) -> int:
        s = a + b
        return s - self.q if s >= self.q else s

    def sub(self, a: int, b: int) -> int:
        s = a - b
        return s + self.q if s < 0 else s

    def neg(self, a: int) -> int:
        return self.q - a if a else 0

    def mul(self, a: int, b: int) -> int:
        return self.reduce(a * b)

    def pow(self, a: int, e: int) -> int:
        return pow(a, e, self.q)

    def inv(self, a: int) -> int:
        """Multiplicative inverse via Fermat: a^(q-2) mod q."""
        if a == 0:
            raise ZeroDivisionError(f"0 has no inverse in GF(2^{self.m}-1)")
        return pow(a, self.q - 2, self.q)

    def to_bytes(self, a: int) -> bytes:
        """Fixed-width little-endian encoding, ceil(m/8) octets."""
        return self.check(a).to_bytes(self.elem_bytes, "little")

    def from_bytes(self, data: bytes) -> int:
        if len(data) != self.elem_bytes:
            raise FieldError(
                f"element encoding must be exactly {self.elem_bytes} octets,"
                f" got {len(data)}")
        value = int.from_bytes(data, "little")
        if value >= self.q:
            raise FieldError(f"decoded value {value} is out of range for m={self.m}")
        return value

    def random_element(self, entropy) -> int:
        """Uniform draw from [0, q) by rejection of m-bit patterns.

        Every m-bit pattern except all-ones is a distinct element, so
        only that single pattern is ever redrawn.  `entropy` must offer
        getrandbits(m).
        """
        while True:
            x = entropy.getrandbits(self.m)
            if x != self.q:
                return x


_field_cache: dict[int, MersennePrime] = {}


def mersenne_field(m: int) -> MersennePrime:
    """Shared MersennePrime instance for the given exponent."""
    field = _field_cache.get(m)
    if field is None:
        field = _field_cache[m] = MersennePrime(m)
    return field


@dataclass(frozen=True, slots=True)
class FieldElement:
    """A canonical residue paired with its field.

    Arithmetic between elements of different fields raises FieldError
    instead of silently mixing moduli.
    """

    value: int
    field: MersennePrime

    def __post_init__(self):
        self.field.check(self.value)

    def _coerce(self, other: "FieldElement") -> int:
        if not isinstance(other, FieldElement):
            raise TypeError(f"cannot combine FieldElement with {type(other).__name__}")
        if other.field != self.field:
            raise FieldError(
                f"field mismatch: m={self.field.m} vs m={other.field.m}")
        return other.value

    def __add__(self, other):
        return FieldElement(self.field.add(self.value, self._coerce(other)), self.field)

    def __sub__(self, other):
        return FieldElement(self.field.sub(self.value, self._coerce(other)), self.field)

    def __mul__(self, other):
        return FieldElement(self.field.mul(self.value, self._coerce(other)), self.field)

    def __truediv__(self, other):
        return FieldElement(
            self.field.mul(self.value, self.field.inv(self._coerce(other))),
            self.field)

    def __neg__(self):
        return FieldElement(self.field.neg(self.value), self.field)

    def __pow__(self, e: int):
        return FieldElement(self.field.pow(self.value, e), self.field)

    def inverse(self) -> "FieldElement":
        return FieldElement(self.field.inv(self.value), self.field)

    def to_bytes(self) -> bytes:
        return self.field.to_bytes(self.value)

    @classmethod
    def from_bytes(cls, data: bytes, field: MersennePrime) -> "FieldElement":
        return cls(field.from_bytes(data), field)

    def __int__(self):
        return self.value


class StubBits:
    """Deterministic bit source for tests: yields scripted draws.

    Each entry feeds one getrandbits call; running past the script
    raises EntropyExhausted.
    """

    def __init__(self, draws):
        self._draws = list(draws)
        self._next = 0

    def getrandbits(self, k: int) -> int:
        if self._next >= len(self._draws):
            raise EntropyExhausted("stub bit source is empty")
        value = self._draws[self._next]
        self._next += 1
        if value >> k:
            raise ValueError(f"scripted draw {value} does not fit in {k} bits")
        return value


def system_entropy() -> random.SystemRandom:
    """OS-backed entropy source (stand-in for a physical RNG)."""
    return random.SystemRandom()
