"""Parse ABC notation into headers, tracks and bars, and write it back out.

Only bar structure is recovered. Everything between two barlines is kept as
opaque text, so ``serialize_tune(parse_tune(text)) == text`` for any tune in
the supported subset (each ``V:`` voice appears once in the body).

http://abcnotation.com/wiki/abc:standard:v2.1
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

# Longest tokens first; the scanner takes the first match at each position.
BARLINES: tuple[str, ...] = ("||", "|]", "[|", "|:", ":|", "::", "|")
_BARLINE_SET = frozenset(BARLINES)

_FIELD_RE = re.compile(r"^[A-Za-z]:")
# unanchored twin for Pattern.match(s, pos), where "^" would not match at pos
_FIELD_AT = re.compile(r"[A-Za-z]:")
_VOICE_RE = re.compile(r"^V:")
_KEY_RE = re.compile(r"^K:")


class ParseError(ValueError):
    """Raised when ABC text cannot be split into tracks and bars.

    ``reason`` is one of ``no_body``, ``empty_bar_stream``, ``encoding`` or
    ``invalid_tune``.
    """

    def __init__(self, reason: str, message: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {message}" if message else reason)


@dataclass(frozen=True)
class Bar:
    content: str
    right_barline: str

    def __post_init__(self):
        if self.right_barline not in _BARLINE_SET:
            raise ValueError(f"unsupported barline {self.right_barline!r}")

    def text(self) -> str:
        return self.content + self.right_barline


@dataclass(frozen=True)
class Track:
    """One voice. ``voice_label`` is the literal ``V:`` line, or ``""`` for an
    unlabelled single-track tune. ``tail`` holds whatever follows the last
    barline (usually nothing)."""

    voice_label: str
    bars: tuple[Bar, ...]
    tail: str = ""

    def __post_init__(self):
        object.__setattr__(self, "bars", tuple(self.bars))
        if not self.bars:
            raise ValueError("a track needs at least one bar")

    def body(self) -> str:
        return "".join(b.text() for b in self.bars) + self.tail

    @property
    def barlines(self) -> list[str]:
        return [b.right_barline for b in self.bars]


@dataclass(frozen=True)
class Tune:
    headers: tuple[str, ...]
    tracks: tuple[Track, ...]
    source_id: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "headers", tuple(self.headers))
        object.__setattr__(self, "tracks", tuple(self.tracks))
        if not self.tracks:
            raise ValueError("a tune needs at least one track")
        if len(self.tracks) > 1 and not all(_VOICE_RE.match(t.voice_label) for t in self.tracks):
            raise ValueError("every track of a multi-track tune needs a V: label")

    @property
    def n_tracks(self) -> int:
        return len(self.tracks)


def is_field_line(line: str) -> bool:
    """True for ``X:``-style information fields and ``%``/``%%`` lines."""
    return bool(_FIELD_RE.match(line)) or line.startswith("%")


def voice_id(label: str) -> str:
    rest = label[2:].strip()
    return rest.split()[0] if rest else ""


def scan_bars(body: str, line_start: bool = True) -> tuple[list[Bar], str]:
    """Split a track body on barlines.

    Barline characters inside ``"..."`` chord symbols/annotations, ``!...!``
    or ``+...+`` decorations, ``%`` comments and whole field lines such as
    ``w:`` lyrics are not split on. Quote and decoration state is reset at
    each newline so a stray delimiter cannot swallow the rest of the tune.

    ``line_start=False`` says ``body`` continues a line, so its first
    characters cannot open a field line.

    Returns the bars and the unterminated remainder after the last barline.
    """
    bars: list[Bar] = []
    start = 0
    i = 0
    n = len(body)
    opener = ""  # active delimiter: '"', '!', '+' or '%' (to end of line)
    while i < n:
        ch = body[i]
        if ch == "\n":
            opener = ""
            i += 1
            continue
        if (body[i - 1] == "\n" if i else line_start) and _FIELD_AT.match(body, i):
            opener = "%"
            i += 1
            continue
        if opener:
            if ch == opener and opener != "%":
                opener = ""
            i += 1
            continue
        if ch in "\"!+%":
            opener = ch
            i += 1
            continue
        tok = _barline_at(body, i)
        if tok:
            bars.append(Bar(body[start:i], tok))
            i += len(tok)
            start = i
        else:
            i += 1
    return bars, body[start:]


def _barline_at(s: str, i: int) -> str:
    two = s[i:i + 2]
    if len(two) == 2 and two in _BARLINE_SET:
        return two
    if s[i] == "|":
        return "|"
    return ""


def _track_from_body(label: str, body: str) -> Track:
    bars, tail = scan_bars(body)
    if not bars:
        name = label or "body"
        raise ParseError("empty_bar_stream", f"no barline found in {name}")
    return Track(label, tuple(bars), tail)


def _decode(text: Union[str, bytes]) -> str:
    if isinstance(text, bytes):
        try:
            return text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError("encoding", str(exc)) from exc
    return text


def _source_id(headers: Sequence[str]) -> str:
    for h in headers:
        if h.startswith("X:"):
            return h[2:].strip()
    return ""


def _split_header(lines: Sequence[str]) -> tuple[int, int]:
    """Return (index of first voice line, end of leading field block).

    The voice index is -1 for single-track tunes. ``V:`` lines that precede
    the ``K:`` line of the header block are voice declarations, not tracks.
    """
    prefix_end = 0
    while prefix_end < len(lines) and is_field_line(lines[prefix_end]):
        prefix_end += 1
    first_key = next((i for i in range(prefix_end) if _KEY_RE.match(lines[i])), -1)
    for j in range(first_key + 1, len(lines)):
        if _VOICE_RE.match(lines[j]):
            return j, prefix_end
    return -1, prefix_end


def parse_tune(text: Union[str, bytes], source_id: str | None = None) -> Tune:
    """Parse one ABC tune.

    A single trailing newline is ignored. Multi-track tunes are recognised by
    ``V:`` lines; all lines before the first one belong to the headers.
    Repeated voices are concatenated onto the first occurrence.

    Raises:
        ParseError: ``no_body`` when nothing follows the headers,
            ``empty_bar_stream`` when a track has no barline.
    """
    text = _decode(text)
    if text.endswith("\n"):
        text = text[:-1]
    if not text.strip():
        raise ParseError("no_body", "empty input")
    lines = text.split("\n")
    first_voice, prefix_end = _split_header(lines)

    if first_voice < 0:
        headers = lines[:prefix_end]
        body = lines[prefix_end:]
        if not body:
            raise ParseError("no_body", "no music lines after the headers")
        tracks = [_track_from_body("", "\n".join(body))]
    else:
        headers = lines[:first_voice]
        order: list[str] = []
        labels: dict[str, str] = {}
        bodies: dict[str, list[str]] = {}
        current = None
        for line in lines[first_voice:]:
            if _VOICE_RE.match(line):
                current = voice_id(line)
                if current not in labels:
                    order.append(current)
                    labels[current] = line
                    bodies[current] = []
                continue
            bodies[current].append(line)
        tracks = [_track_from_body(labels[v], "\n".join(bodies[v])) for v in order]

    sid = source_id if source_id is not None else _source_id(headers)
    return Tune(tuple(headers), tuple(tracks), sid)


def serialize_tune(tune: Tune) -> str:
    """Inverse of :func:`parse_tune` (without the trailing newline)."""
    lines = list(tune.headers)
    for track in tune.tracks:
        if track.voice_label:
            lines.append(track.voice_label)
        lines.append(track.body())
    return "\n".join(lines)


def split_tunebook(text: str) -> list[str]:
    """Split a multi-tune file on blank (whitespace-only) lines."""
    chunks: list[str] = []
    current: list[str] = []
    for line in text.split("\n"):
        if line.strip():
            current.append(line)
        elif current:
            chunks.append("\n".join(current))
            current = []
    if current:
        chunks.append("\n".join(current))
    return chunks


def join_tunebook(tunes: Sequence[str]) -> str:
    return "\n\n".join(tunes) + "\n" if tunes else ""


def iter_barlines(text: str) -> Iterator[str]:
    """Yield the barline tokens of the music lines of ``text``.

    Information-field and comment lines are skipped; the input does not
    need to be a well-formed tune (generated samples often are not).
    """
    body = "\n".join(line for line in text.split("\n") if not is_field_line(line))
    bars, _ = scan_bars(body)
    for bar in bars:
        yield bar.right_barline
