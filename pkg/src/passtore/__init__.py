"""Password-authenticated secret-sharing storage over a simulated QKD
key-supply fabric, with one-time-pad transport between every party."""

from .field import FieldElement, MersennePrime, mersenne_field
from .scheme import SchemeParams

__all__ = ["FieldElement", "MersennePrime", "mersenne_field", "SchemeParams"]
__version__ = "0.1.0"
