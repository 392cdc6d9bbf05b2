"""Paired success-rate statistics: exact one-sided sign test and average gain."""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

__all__ = ["SignTestResult", "sign_test", "avg_gain", "format_p"]


@dataclass(frozen=True)
class SignTestResult:
    """Exact binomial sign test over paired rates, ties excluded."""

    pairs: int
    non_tie: int
    improved: int
    p_value: float | None

    def as_tuple(self) -> tuple[int, int, float | None]:
        return (self.non_tie, self.improved, self.p_value)


def sign_test(pairs) -> SignTestResult:
    """One-sided exact binomial test that the second entry tends to be larger.

    pairs is a sequence of (rate_a, rate_b).  Ties drop out of the count;
    with n non-ties and k improvements the p-value is sum_{j>=k} C(n,j) / 2^n,
    computed exactly.  When every pair ties the p-value is undefined (None).
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("sign_test: need at least one pair")
    non_tie = 0
    improved = 0
    for a, b in pairs:
        if b > a:
            non_tie += 1
            improved += 1
        elif b < a:
            non_tie += 1
    if non_tie == 0:
        return SignTestResult(len(pairs), 0, 0, None)
    numerator = sum(comb(non_tie, j) for j in range(improved, non_tie + 1))
    return SignTestResult(len(pairs), non_tie, improved, numerator / 2**non_tie)


def avg_gain(pairs) -> float:
    """Mean of (rate_b - rate_a) over all pairs, ties included."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("avg_gain: need at least one pair")
    return sum(b - a for a, b in pairs) / len(pairs)


def format_p(p: float | None) -> str:
    """Two-significant-figure scientific form, e.g. 1.2e-4; undefined -> 'n/a'."""
    if p is None:
        return "n/a"
    mantissa, exponent = f"{p:.1e}".split("e")
    return f"{mantissa}e{int(exponent)}"
