"""Synchronized multi-track ABC (SMT-ABC).

Bars sharing an index across all tracks are concatenated, each keeping its
right barline, and the concatenation is wrapped in a pair of ``<|>``
symbols::

    X:1            X:1
    K:C            K:C
    V:1      ->    V:1
    A|B|]          V:2
    V:2            <|>A|c|<|>
    c|d|]          <|>B|]d|]<|>

Headers and voice lines are kept verbatim ahead of the groups, one group per
line. Tunes whose tracks have different bar counts are skipped.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from abcscale.abc_parser import Bar, Track, Tune, _split_header, scan_bars

GROUP_SYMBOL = "<|>"

_VOICE_RE = re.compile(r"^V:")


class SyncError(ValueError):
    """A tune that cannot be synchronized. ``reason`` keys the skip report."""

    reason = "sync_error"

    def __init__(self, message: str, reason: Optional[str] = None):
        if reason is not None:
            self.reason = reason
        super().__init__(message)


class MisalignedError(SyncError):
    reason = "bar_count_mismatch"


class ReservedSymbolError(SyncError):
    reason = "reserved_symbol"


class InverseError(ValueError):
    """SMT text that does not decompose into the requested number of tracks."""


@dataclass(frozen=True)
class BarGroup:
    entries: tuple[Bar, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    def inner_text(self) -> str:
        return "".join(b.text() for b in self.entries)


@dataclass(frozen=True)
class SyncTune:
    headers: tuple[str, ...]
    n_tracks: int
    groups: tuple[BarGroup, ...]
    voice_labels: tuple[str, ...] = ()
    source_id: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "headers", tuple(self.headers))
        object.__setattr__(self, "groups", tuple(self.groups))
        labels = tuple(self.voice_labels) or ("",) * self.n_tracks
        object.__setattr__(self, "voice_labels", labels)
        if self.n_tracks < 1:
            raise ValueError("n_tracks must be positive")
        if len(labels) != self.n_tracks:
            raise ValueError("one voice label per track required")
        for g in self.groups:
            if len(g.entries) != self.n_tracks:
                raise ValueError(f"group has {len(g.entries)} entries, expected {self.n_tracks}")


@dataclass
class SkipReport:
    total: int = 0
    converted: int = 0
    skipped: int = 0
    skip_reasons: dict[str, int] = field(default_factory=dict)

    def record_skip(self, reason: str) -> None:
        self.total += 1
        self.skipped += 1
        self.skip_reasons[reason] = self.skip_reasons.get(reason, 0) + 1

    def record_ok(self) -> None:
        self.total += 1
        self.converted += 1

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "converted": self.converted,
            "skipped": self.skipped,
            "skip_reasons": dict(sorted(self.skip_reasons.items())),
        }


def _check_reserved(tune: Tune) -> None:
    texts = list(tune.headers)
    for track in tune.tracks:
        texts.append(track.voice_label)
        texts.append(track.body())
    if any(GROUP_SYMBOL in t for t in texts):
        raise ReservedSymbolError(f"input already contains {GROUP_SYMBOL!r}")


def synchronize(tune: Tune) -> SyncTune:
    """Group same-index bars of every track.

    Raises:
        MisalignedError: tracks have different bar counts.
        ReservedSymbolError: the tune already contains ``<|>``.
        SyncError: a track ends with unterminated music (``unterminated_bar``;
            a whitespace-only remainder is dropped instead),
            or a group's concatenation would not split back into the same bars
            (``ambiguous_junction``, e.g. a bar ending in ``<`` followed by a
            bar starting with ``>``).
    """
    _check_reserved(tune)
    for track in tune.tracks:
        if track.tail.strip():
            raise SyncError(f"text after the last barline: {track.tail!r}", "unterminated_bar")
    counts = [len(t.bars) for t in tune.tracks]
    if len(set(counts)) != 1:
        raise MisalignedError(f"bar counts differ across tracks: {counts}")

    groups = []
    for i in range(counts[0]):
        group = BarGroup(tuple(t.bars[i] for t in tune.tracks))
        inner = group.inner_text()
        bars, tail = scan_bars(inner, line_start=False)
        if GROUP_SYMBOL in inner or tail or tuple(bars) != group.entries:
            raise SyncError(f"bar group {i} does not split back into its tracks", "ambiguous_junction")
        groups.append(group)
    return SyncTune(
        headers=tune.headers,
        n_tracks=tune.n_tracks,
        groups=tuple(groups),
        voice_labels=tuple(t.voice_label for t in tune.tracks),
        source_id=tune.source_id,
    )


def render_smt(sync: SyncTune) -> str:
    lines = list(sync.headers)
    lines.extend(label for label in sync.voice_labels if label)
    for g in sync.groups:
        lines.append(GROUP_SYMBOL + g.inner_text() + GROUP_SYMBOL)
    return "\n".join(lines)


def _split_groups(body: str) -> list[str]:
    inners = []
    pos = 0
    n = len(body)
    sym = len(GROUP_SYMBOL)
    while True:
        while pos < n and body[pos].isspace():
            pos += 1
        if pos >= n:
            return inners
        if not body.startswith(GROUP_SYMBOL, pos):
            raise InverseError(f"expected {GROUP_SYMBOL!r} at offset {pos}")
        end = body.find(GROUP_SYMBOL, pos + sym)
        if end < 0:
            raise InverseError(f"unclosed bar group at offset {pos}")
        inners.append(body[pos + sym:end])
        pos = end + sym


def desynchronize(text: str, n_tracks: Optional[int] = None) -> Tune:
    """Rebuild the track-by-track tune from SMT-ABC text.

    The number of tracks comes from the ``V:`` lines in the header block. An
    explicit ``n_tracks`` must agree with them; without voice lines it is
    required for multi-track input (labels ``V:1``... are then synthesised).
    Whitespace between groups is ignored.
    """
    if text.endswith("\n"):
        text = text[:-1]
    lines = text.split("\n")
    start = next((i for i, line in enumerate(lines) if line.startswith(GROUP_SYMBOL)), len(lines))
    block = lines[:start]
    inners = _split_groups("\n".join(lines[start:]))
    if not inners:
        raise InverseError("no bar groups found")

    first_voice, _ = _split_header(block)
    if first_voice >= 0:
        headers, labels = block[:first_voice], block[first_voice:]
        if not all(_VOICE_RE.match(v) for v in labels):
            raise InverseError("non-voice line between voice lines and bar groups")
    else:
        headers, labels = block, []

    if labels:
        if n_tracks is not None and n_tracks != len(labels):
            raise InverseError(f"header declares {len(labels)} voices, n_tracks={n_tracks}")
        n = len(labels)
    else:
        n = 1 if n_tracks is None else n_tracks
        if n < 1:
            raise InverseError("n_tracks must be positive")
        labels = [""] if n == 1 else [f"V:{i + 1}" for i in range(n)]

    columns: list[list[Bar]] = [[] for _ in range(n)]
    for gi, inner in enumerate(inners):
        bars, tail = scan_bars(inner, line_start=False)
        if tail or len(bars) != n:
            raise InverseError(
                f"group {gi} has {len(bars)} barline-terminated segments"
                + (" and trailing text" if tail else "") + f", expected {n}"
            )
        for j, bar in enumerate(bars):
            columns[j].append(bar)
    tracks = tuple(Track(labels[j], tuple(columns[j])) for j in range(n))
    return Tune(tuple(headers), tracks)


def batch_convert(tunes: Iterable[Tune]) -> tuple[list[SyncTune], SkipReport]:
    """Synchronize every tune, skipping (and counting) the ones that fail."""
    report = SkipReport()
    out = []
    for tune in tunes:
        try:
            out.append(synchronize(tune))
        except SyncError as exc:
            report.record_skip(exc.reason)
        else:
            report.record_ok()
    return out, report


def alignment_violations(syncs: Sequence[SyncTune]) -> int:
    """Count groups whose rendered text does not split into n_tracks segments."""
    bad = 0
    for s in syncs:
        for g in s.groups:
            bars, tail = scan_bars(g.inner_text(), line_start=False)
            if tail or len(bars) != s.n_tracks:
                bad += 1
    return bad

