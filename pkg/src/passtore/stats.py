"""Chi-square helpers shared by the adversary harness and the tests."""

from __future__ import annotations

import math

from scipy.stats import chi2


def chi_square_uniform(counts) -> float:
    """Pearson statistic against the uniform distribution over the bins."""
    total = sum(counts)
    expected = total / len(counts)
    return sum((c - expected) ** 2 / expected for c in counts)


def chi_square_critical(dof: int, significance: float = 0.01) -> float:
    """Upper critical value: reject uniformity when the statistic exceeds it."""
    return float(chi2.ppf(1.0 - significance, dof))


def two_sample_chi_square(counts_a, counts_b) -> tuple[float, int]:
    """Homogeneity test between two histograms over the same bins.

    Returns (statistic, degrees of freedom); bins empty in both samples
    are dropped.
    """
    if len(counts_a) != len(counts_b):
        raise ValueError("histograms must share their bins")
    total_a = sum(counts_a)
    total_b = sum(counts_b)
    stat = 0.0
    used = 0
    for a, b in zip(counts_a, counts_b):
        if a + b == 0:
            continue
        used += 1
        expected_a = (a + b) * total_a / (total_a + total_b)
        expected_b = (a + b) * total_b / (total_a + total_b)
        stat += (a - expected_a) ** 2 / expected_a
        stat += (b - expected_b) ** 2 / expected_b
    return stat, used - 1


def bernoulli_bound(p: float, trials: int, sigmas: float = 3.0) -> float:
    """p plus `sigmas` standard errors of a Bernoulli(p) mean over `trials`."""
    return p + sigmas * math.sqrt(p * (1.0 - p) / trials)
