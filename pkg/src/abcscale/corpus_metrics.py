"""Corpus statistics: sequence-length coverage and repeat-sign detection rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

from abcscale.abc_parser import iter_barlines

REPEAT_SIGN = ":|"
PERCENTILES = (50, 90, 99)


class EmptyCorpus(ValueError):
    pass


@dataclass
class CoverageReport:
    context_length: int
    covered_fraction: float
    n_sequences: int
    length_percentiles: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "context_length": self.context_length,
            "covered_fraction": self.covered_fraction,
            "n_sequences": self.n_sequences,
            "length_percentiles": dict(self.length_percentiles),
        }


def nearest_rank(sorted_values: Sequence[int], p: float) -> int:
    """Nearest-rank percentile of an ascending sequence (0 < p <= 100)."""
    if not sorted_values:
        raise EmptyCorpus("no values")
    rank = max(1, math.ceil(p / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


def _lengths(corpus: Iterable[Union[Sequence[int], int]]) -> list[int]:
    return [x if isinstance(x, int) else len(x) for x in corpus]


def length_coverage(corpus: Iterable[Union[Sequence[int], int]], context_length: int) -> CoverageReport:
    """Share of sequences that fit in ``context_length`` tokens.

    ``corpus`` holds token-id sequences (or their lengths directly).
    """
    lengths = sorted(_lengths(corpus))
    if not lengths:
        raise EmptyCorpus("cannot compute coverage of an empty corpus")
    covered = sum(1 for n in lengths if n <= context_length)
    return CoverageReport(
        context_length=context_length,
        covered_fraction=covered / len(lengths),
        n_sequences=len(lengths),
        length_percentiles={f"p{p}": nearest_rank(lengths, p) for p in PERCENTILES},
    )


def length_histogram(corpus: Iterable[Union[Sequence[int], int]], bin_width: int) -> list[tuple[int, int, int]]:
    """``(lo, hi, count)`` rows with half-open bins ``[lo, hi)``; empty bins kept."""
    lengths = _lengths(corpus)
    if not lengths:
        raise EmptyCorpus("cannot histogram an empty corpus")
    if bin_width < 1:
        raise ValueError("bin_width must be positive")
    n_bins = max(lengths) // bin_width + 1
    counts = [0] * n_bins
    for n in lengths:
        counts[n // bin_width] += 1
    return [(i * bin_width, (i + 1) * bin_width, c) for i, c in enumerate(counts)]


def has_repeat(piece: str) -> bool:
    return any(tok == REPEAT_SIGN for tok in iter_barlines(piece))


def repetition_rate(pieces: Iterable[str]) -> float:
    """Fraction of pieces whose barline stream contains ``:|``.

    Detection goes through the barline scanner, so ``:|`` inside a quoted
    annotation, a decoration or a comment is not counted.
    """
    flags = [has_repeat(p) for p in pieces]
    if not flags:
        raise EmptyCorpus("no pieces")
    return sum(flags) / len(flags)
