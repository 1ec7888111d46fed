"""Seeded fixture generators: ABC tunes, corpus lines and loss logs."""

from __future__ import annotations

from typing import Optional

import numpy as np

from abcscale.fitting import LossObservation
from abcscale.laws import Law, LawParams, OverfitParams, predict

NOTES = "CDEFGABcdefgab"
LENGTHS = ("", "2", "3", "4", "/2")
INNER_BARLINES = ("|", "|", "|", "||", "|:", ":|")
CHORDS = ('"C"', '"G7"', '"Am"', '"F"')

# Values picked for the fixtures only.
CHINCHILLA_FIXTURE = LawParams(Law.CHINCHILLA, a=400.0, b=410.0, e=1.7, alpha=0.34, beta=0.28)
CHINCHILLA_N = (1.9e8, 5.05e8, 1.07e9, 1.97e9)
CHINCHILLA_D = (1e8, 3e8, 1e9, 3e9, 1e10, 3e10)

# The overfit offset puts the (1.07e9, 2.1e9) curve's valley near 6e10 tokens.
# The base loss is scaled up so the overfit rise stays in the near-linear part
# of GELU without swamping the repetition structure.
SMS_FIXTURE = LawParams(
    Law.SMS, a=2500.0, b=6000.0, e=3.5, alpha=0.3, beta=0.32, d=2e4, k_eff=0.3,
    overfit=OverfitParams(k_d=8e-11, k_n=0.4, k_u=0.2, k_in=9.5733),
)
SMS_N = (1.9e8, 5.05e8, 1.07e9, 1.97e9, 4.23e9)
SMS_U = (2.1e9, 8.4e9, 33.6e9)
SMS_D = tuple(float(x) for x in np.concatenate([np.geomspace(1e9, 2e10, 6), np.linspace(3e10, 1.2e11, 10)]))


def _bar_content(rng: np.random.Generator, chord_prob: float = 0.1) -> str:
    out = []
    if rng.random() < chord_prob:
        out.append(CHORDS[rng.integers(len(CHORDS))])
    for _ in range(rng.integers(1, 6)):
        out.append(NOTES[rng.integers(len(NOTES))] + LENGTHS[rng.integers(len(LENGTHS))])
    text = "".join(out)
    # a lone letter before ":|" at a line start would read as a field line
    return text if len(text) > 1 else text + "2"


def _track_body(rng: np.random.Generator, n_bars: int) -> str:
    parts = []
    for i in range(n_bars):
        bar = INNER_BARLINES[rng.integers(len(INNER_BARLINES))] if i < n_bars - 1 else "|]"
        parts.append(_bar_content(rng) + bar)
    return "".join(parts)


def random_tune_text(rng: np.random.Generator, n_tracks: int, n_bars: int, index: int = 1,
                     bar_counts: Optional[list[int]] = None) -> str:
    """Multi-track tune; every track gets ``n_bars`` bars unless ``bar_counts`` is given."""
    counts = bar_counts or [n_bars] * n_tracks
    lines = [f"X:{index}", f"T:Tune {index}", "M:4/4", "L:1/8", "K:C"]
    for v, nb in enumerate(counts, 1):
        lines.append(f"V:{v}")
        lines.append(_track_body(rng, nb))
    return "\n".join(lines)


def aligned_corpus(seed: int, n_tunes: int, max_tracks: int = 8, max_bars: int = 64) -> list[str]:
    rng = np.random.default_rng(seed)
    return [
        random_tune_text(rng, int(rng.integers(1, max_tracks + 1)), int(rng.integers(1, max_bars + 1)), i + 1)
        for i in range(n_tunes)
    ]


def misaligned_tune_text(rng: np.random.Generator, index: int = 1) -> str:
    n_tracks = int(rng.integers(2, 6))
    n_bars = int(rng.integers(2, 32))
    counts = [n_bars] * n_tracks
    counts[int(rng.integers(n_tracks))] += int(rng.integers(1, 4))
    return random_tune_text(rng, n_tracks, n_bars, index, bar_counts=counts)


def mixed_corpus(seed: int, n_tunes: int, n_misaligned: int) -> list[str]:
    """Aligned tunes with ``n_misaligned`` bar-count mismatches at seeded positions."""
    rng = np.random.default_rng(seed)
    bad = set(rng.choice(n_tunes, size=n_misaligned, replace=False).tolist())
    out = []
    for i in range(n_tunes):
        if i in bad:
            out.append(misaligned_tune_text(rng, i + 1))
        else:
            out.append(random_tune_text(rng, int(rng.integers(1, 9)), int(rng.integers(1, 65)), i + 1))
    return out


def corpus_lines(seed: int, n_lines: int) -> list[str]:
    """Single-line bar strings with spaces, as tokenizer training text."""
    rng = np.random.default_rng(seed)
    lines = []
    for _ in range(n_lines):
        n_bars = int(rng.integers(1, 9))
        bars = [_bar_content(rng, 0.2) + INNER_BARLINES[rng.integers(len(INNER_BARLINES))] for _ in range(n_bars)]
        lines.append(" ".join(bars))
    return lines


def pieces_with_repeats(seed: int, n_pieces: int, n_with_repeat: int) -> list[str]:
    """Pieces where exactly ``n_with_repeat`` contain a ``:|`` barline.

    The others may carry ``:|`` inside a quoted annotation, which must not count.
    """
    rng = np.random.default_rng(seed)
    marked = set(rng.choice(n_pieces, size=n_with_repeat, replace=False).tolist())
    out = []
    for i in range(n_pieces):
        bars = [_bar_content(rng) + "|" for _ in range(int(rng.integers(2, 9)))]
        if i in marked:
            k = int(rng.integers(len(bars)))
            bars[k] = bars[k][:-1] + ":|"
        elif rng.random() < 0.3:
            bars[0] = '"^:|"' + bars[0]
        out.append(f"X:{i + 1}\nK:C\n" + "".join(bars)[:-1] + "|]")
    return out


def _noisy(rng: np.random.Generator, loss: np.ndarray, rel_noise: float) -> np.ndarray:
    return loss * np.exp(rel_noise * rng.standard_normal(loss.shape))


def chinchilla_observations(seed: int = 0, rel_noise: float = 1e-3,
                            params: LawParams = CHINCHILLA_FIXTURE) -> list[LossObservation]:
    """4x6 (N, D) grid with log-normal multiplicative noise; one epoch each."""
    rng = np.random.default_rng(seed)
    n, d = (a.ravel() for a in np.meshgrid(CHINCHILLA_N, CHINCHILLA_D, indexing="ij"))
    loss = _noisy(rng, np.asarray(predict(params, n, d)), rel_noise)
    return [LossObservation(n=float(a), d=float(b), u_d=float(b), loss=float(y), run_id=f"n{a:.0e}")
            for a, b, y in zip(n, d, loss)]


def sms_observations(seed: int = 0, rel_noise: float = 1e-3,
                     params: LawParams = SMS_FIXTURE) -> list[LossObservation]:
    """Training curves over (N, U_D) with repeated epochs and late overfitting."""
    rng = np.random.default_rng(seed)
    out = []
    for n in SMS_N:
        for u in SMS_U:
            d = np.array(SMS_D)
            loss = _noisy(rng, np.asarray(predict(params, np.full_like(d, n), d, np.full_like(d, u))), rel_noise)
            out.extend(LossObservation(n=n, d=float(x), u_d=u, loss=float(y), run_id=f"{n:.3g}-{u:.3g}")
                       for x, y in zip(d, loss))
    return out
