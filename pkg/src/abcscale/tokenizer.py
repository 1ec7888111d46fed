"""Byte-pair encoding over raw ABC text.

No normalization and no dummy prefix: a text is split into characters, each
space becomes the ``<n>`` marker, and merges are learnt over whole texts
(there is no word pre-tokenization). Ties between equally frequent pairs go
to the lexicographically smallest ``(left, right)``.
"""

from __future__ import annotations

import heapq
import json
import operator
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

SPACE_SYMBOL = "<n>"
DEFAULT_VOCAB_SIZE = 2000
FULL_CORPUS_VOCAB_SIZE = 50_000


class ConfigError(ValueError):
    pass


class UnknownChar(ValueError):
    def __init__(self, char: str, offset: int):
        self.char = char
        self.offset = offset
        super().__init__(f"character {char!r} at offset {offset} is not in the vocabulary")


class BadId(ValueError):
    pass


def to_symbols(text: str, space_symbol: str = SPACE_SYMBOL) -> list[str]:
    return [space_symbol if ch == " " else ch for ch in text]


@dataclass
class Vocab:
    """Merge list plus the token/id maps.

    ``tokens[i]`` is the string of id ``i``: base symbols first (the space
    marker at id 0, then characters in sorted order), then one token per merge.
    """

    merges: list[tuple[str, str]]
    tokens: list[str]
    space_symbol: str = SPACE_SYMBOL
    token_to_id: dict[str, int] = field(init=False, repr=False)
    _ranks: dict[tuple[str, str], int] = field(init=False, repr=False)
    _surface: list[str] = field(init=False, repr=False)

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ConfigError("duplicate token strings in vocabulary")
        n_base = len(self.tokens) - len(self.merges)
        for (left, right), tok in zip(self.merges, self.tokens[n_base:]):
            if left + right != tok or left not in self.token_to_id or right not in self.token_to_id:
                raise ConfigError(f"merge ({left!r}, {right!r}) inconsistent with token {tok!r}")
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}
        # Decoded text per id; built from merges so a literal "<n>" in the
        # corpus never decodes to a space.
        surface = [" " if t == self.space_symbol else t for t in self.tokens[:n_base]]
        for left, right in self.merges:
            surface.append(surface[self.token_to_id[left]] + surface[self.token_to_id[right]])
        self._surface = surface

    @property
    def base(self) -> list[str]:
        return self.tokens[: len(self.tokens) - len(self.merges)]

    def __len__(self) -> int:
        return len(self.tokens)

    def to_json(self) -> dict:
        return {
            "space_symbol": self.space_symbol,
            "merges": [list(m) for m in self.merges],
            "tokens": list(self.tokens),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Vocab":
        return cls(
            merges=[tuple(m) for m in obj["merges"]],
            tokens=list(obj["tokens"]),
            space_symbol=obj["space_symbol"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def base_alphabet(corpus: Iterable[str], space_symbol: str = SPACE_SYMBOL) -> list[str]:
    chars = set()
    for text in corpus:
        chars.update(text)
    chars.discard(" ")
    return [space_symbol] + sorted(chars)


def _merge_seq(seq: list[str], left: str, right: str, new: str) -> list[str]:
    out = []
    i = 0
    n = len(seq)
    while i < n:
        if i + 1 < n and seq[i] == left and seq[i + 1] == right:
            out.append(new)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def _pairs(seq: Sequence[str]) -> Counter:
    return Counter(zip(seq, seq[1:]))


def train_bpe(corpus: Sequence[str], vocab_size: int = DEFAULT_VOCAB_SIZE,
              space_symbol: str = SPACE_SYMBOL) -> Vocab:
    """Learn merges until ``vocab_size`` tokens exist or no pair occurs twice.

    Pair counts cover every adjacent position (overlaps included) and are
    updated incrementally: only texts containing the merged pair are
    rescanned. A pair whose merged string already exists as a token (only
    possible when the corpus contains a literal ``<n>``) is never merged.

    Raises:
        ConfigError: empty corpus or ``vocab_size`` below the base alphabet.
    """
    corpus = list(corpus)
    if not corpus:
        raise ConfigError("empty training corpus")
    base = base_alphabet(corpus, space_symbol)
    if vocab_size < len(base):
        raise ConfigError(f"vocab_size {vocab_size} is below the base alphabet size {len(base)}")

    # Identical texts are trained once with a multiplicity.
    uniq = Counter(corpus)
    seqs = [to_symbols(t, space_symbol) for t in uniq]
    weights = list(uniq.values())

    counts: Counter = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for idx, seq in enumerate(seqs):
        for pair, c in _pairs(seq).items():
            counts[pair] += c * weights[idx]
            where[pair].add(idx)

    heap = [(-c, p) for p, c in counts.items()]
    heapq.heapify(heap)
    tokens = list(base)
    known = set(tokens)
    merges: list[tuple[str, str]] = []
    banned: set[tuple[str, str]] = set()

    while len(tokens) < vocab_size and heap:
        neg, pair = heapq.heappop(heap)
        c = counts.get(pair, 0)
        if c != -neg or pair in banned:
            continue  # stale entry
        if c < 2:
            break
        new = pair[0] + pair[1]
        if new in known:
            banned.add(pair)
            continue
        merges.append(pair)
        tokens.append(new)
        known.add(new)

        touched: set[tuple[str, str]] = set()
        for idx in list(where.pop(pair, ())):
            seq = seqs[idx]
            w = weights[idx]
            old = _pairs(seq)
            merged = _merge_seq(seq, pair[0], pair[1], new)
            fresh = _pairs(merged)
            seqs[idx] = merged
            for p, k in old.items():
                counts[p] -= k * w
                touched.add(p)
                if p not in fresh:
                    where[p].discard(idx)
            for p, k in fresh.items():
                counts[p] += k * w
                touched.add(p)
                where[p].add(idx)
        for p in touched:
            if counts[p] <= 0:
                counts.pop(p, None)
                where.pop(p, None)
            else:
                heapq.heappush(heap, (-counts[p], p))
    return Vocab(merges=merges, tokens=tokens, space_symbol=space_symbol)


def encode(vocab: Vocab, text: str) -> list[int]:
    """Apply the merges in training order; returns token ids."""
    seq = []
    for i, ch in enumerate(text):
        sym = vocab.space_symbol if ch == " " else ch
        if sym not in vocab.token_to_id:
            raise UnknownChar(ch, i)
        seq.append(sym)
    ranks = vocab._ranks
    while len(seq) > 1:
        best = None
        best_rank = len(ranks)
        for pair in zip(seq, seq[1:]):
            r = ranks.get(pair)
            if r is not None and r < best_rank:
                best, best_rank = pair, r
        if best is None:
            break
        seq = _merge_seq(seq, best[0], best[1], best[0] + best[1])
    return [vocab.token_to_id[t] for t in seq]


def decode(vocab: Vocab, ids: Iterable[int]) -> str:
    parts = []
    n = len(vocab.tokens)
    for i in ids:
        try:
            k = operator.index(i)
        except TypeError:
            raise BadId(f"token id {i!r} is not an integer") from None
        if not 0 <= k < n:
            raise BadId(f"token id {k} out of range [0, {n})")
        parts.append(vocab._surface[k])
    return "".join(parts)
