"""Shamir share generation and Lagrange reconstruction at zero.

Three polynomial varieties back the protocol: secret-embedding
(free coefficient = the secret), random (free coefficient drawn
uniformly), and zero (free coefficient forced to 0, used to
re-randomize responses without changing the shared value).
Reconstruction only ever needs the polynomial's value at x = 0, so
interpolation computes the Lagrange weights at zero and never the full
polynomial.
"""

from __future__ import annotations

from dataclasses import dataclass

from .field import MersennePrime


class SharingError(ValueError):
    """Parameter or share-set violation (counts, duplicates, range)."""


@dataclass(frozen=True, slots=True)
class Share:
    """Evaluation of a share polynomial at the public point x = j."""

    point: int
    value: int


@dataclass(frozen=True, slots=True)
class SharePolynomial:
    """Coefficients c_0..c_d, low to high; degree bound d = len - 1.

    Leading coefficients may be zero ("degree at most d"); the length is
    always exactly d + 1.
    """

    coefficients: tuple
    field: MersennePrime

    @property
    def degree_bound(self) -> int:
        return len(self.coefficients) - 1

    @property
    def at_zero(self) -> int:
        return self.coefficients[0]

    def evaluate(self, x: int) -> int:
        """Horner evaluation at a canonical point."""
        f = self.field
        acc = 0
        for c in reversed(self.coefficients):
            acc = f.add(f.mul(acc, x), c)
        return acc

    def shares_at(self, points) -> list[Share]:
        return [Share(p, self.evaluate(p)) for p in points]


def random_polynomial(secret: int, degree: int, field: MersennePrime,
                      entropy) -> SharePolynomial:
    """Degree-at-most-`degree` polynomial with c_0 = secret and the rest
    drawn uniformly from the field."""
    if degree < 0:
        raise SharingError("degree must be >= 0")
    field.check(secret)
    coeffs = (secret,) + tuple(
        field.random_element(entropy) for _ in range(degree))
    return SharePolynomial(coeffs, field)


def zero_polynomial(degree: int, field: MersennePrime, entropy) -> SharePolynomial:
    """Random polynomial with the free coefficient pinned to 0."""
    return random_polynomial(0, degree, field, entropy)


def _check_points(n: int, field: MersennePrime):
    if n < 1:
        raise SharingError("need at least one share")
    if n >= field.q:
        raise SharingError(f"cannot place {n} distinct shares in GF(2^{field.m}-1)")


def make_shares(secret: int, degree: int, n: int, field: MersennePrime,
                entropy) -> list[Share]:
    """Shares of `secret` at points 1..n."""
    _check_points(n, field)
    poly = random_polynomial(secret, degree, field, entropy)
    return poly.shares_at(range(1, n + 1))


def make_zero_shares(degree: int, n: int, field: MersennePrime,
                     entropy) -> list[Share]:
    """Shares of the value 0 at points 1..n (free coefficient forced to 0)."""
    _check_points(n, field)
    poly = zero_polynomial(degree, field, entropy)
    return poly.shares_at(range(1, n + 1))


_weight_cache: dict[tuple, tuple] = {}


def lagrange_weights_at_zero(points: tuple, field: MersennePrime) -> tuple:
    """Weights w_i with f(0) = sum w_i * f(x_i) for distinct points x_i.

    w_i = prod_{j != i} x_j / (x_j - x_i).  Denominators are inverted in
    one batch (Montgomery trick) and the result is cached per
    (points, field): the protocol reuses the same quorum for every block.
    """
    key = (points, field.m)
    cached = _weight_cache.get(key)
    if cached is not None:
        return cached

    if len(set(points)) != len(points):
        raise SharingError(f"duplicate evaluation points in {points}")
    for p in points:
        if not 0 < p < field.q:
            raise SharingError(f"evaluation point {p} out of range")

    k = len(points)
    numerators = []
    denominators = []
    for i in range(k):
        num, den = 1, 1
        for j in range(k):
            if j == i:
                continue
            num = field.mul(num, points[j])
            den = field.mul(den, field.sub(points[j], points[i]))
        numerators.append(num)
        denominators.append(den)

    # Batch inversion: one field inversion for all k denominators.
    prefix = [1] * (k + 1)
    for i in range(k):
        prefix[i + 1] = field.mul(prefix[i], denominators[i])
    inv_all = field.inv(prefix[k])
    inverses = [0] * k
    for i in range(k - 1, -1, -1):
        inverses[i] = field.mul(inv_all, prefix[i])
        inv_all = field.mul(inv_all, denominators[i])

    weights = tuple(field.mul(numerators[i], inverses[i]) for i in range(k))
    _weight_cache[key] = weights
    return weights


def interpolate_at_zero(shares, degree: int, field: MersennePrime) -> int:
    """f(0) of the unique degree-<=degree polynomial through the shares.

    Requires exactly degree + 1 shares with distinct points; duplicates
    are rejected before any arithmetic.
    """
    shares = list(shares)
    if len(shares) != degree + 1:
        raise SharingError(
            f"need exactly {degree + 1} shares for degree {degree},"
            f" got {len(shares)}")
    points = tuple(s.point for s in shares)
    if len(set(points)) != len(points):
        raise SharingError(f"duplicate evaluation points in {points}")
    weights = lagrange_weights_at_zero(points, field)
    acc = 0
    for share, w in zip(shares, weights):
        acc = field.add(acc, field.mul(w, share.value))
    return acc
