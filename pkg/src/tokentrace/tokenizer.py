"""Deterministic word-level tokenizer with reserved structural tokens.

Every structural tag and both outcome literals are single atomic ids, so
an outcome's character span always maps to exactly one token position.
Plain text is split on whitespace into word tokens with greedy
longest-match fallback; a base character block covering printable ASCII
keeps encoding total without UNK for any rendered example.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable

from .serialize import CORRECT, INCORRECT, TAGS

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>") + TAGS + (CORRECT, INCORRECT)
RESERVED_COUNT = len(RESERVED)

# printable ASCII plus the whitespace the renderer emits
_BASE_CHARS = tuple(chr(c) for c in range(32, 127)) + ("\n", "\t")

# tags match anywhere; outcome literals only when not embedded in a longer
# letter run ("Correctly" stays an ordinary word)
_RESERVED_RE = re.compile(
    "|".join(re.escape(t) for t in TAGS)
    + r"|(?<![A-Za-z])(?:Incorrect|Correct)(?![A-Za-z])"
)


@dataclass(frozen=True)
class Vocab:
    """Immutable token table; a token's id is its position."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[:RESERVED_COUNT] != RESERVED:
            raise ValueError("vocab must start with the reserved block")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocab")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @cached_property
    def token_to_id(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tokens)}

    @cached_property
    def _match_pool(self) -> tuple[dict[str, int], int]:
        """Non-reserved tokens usable by greedy longest-match."""
        pool = {t: i for i, t in enumerate(self.tokens) if i >= RESERVED_COUNT}
        maxlen = max((len(t) for t in pool), default=1)
        return pool, maxlen

    @property
    def correct_id(self) -> int:
        return self.token_to_id[CORRECT]

    @property
    def incorrect_id(self) -> int:
        return self.token_to_id[INCORRECT]


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocab:
    """Deterministic vocab: reserved block, character block, then words by
    descending frequency (ties broken lexicographically) up to max_size."""
    chars: set[str] = set(_BASE_CHARS)
    counts: Counter[str] = Counter()
    nonempty = False
    for text in corpus:
        if text:
            nonempty = True
        chars.update(text)
        pos = 0
        for m in _RESERVED_RE.finditer(text):
            for word in text[pos : m.start()].split():
                counts[word] += 1
            pos = m.end()
        for word in text[pos:].split():
            counts[word] += 1
    if not nonempty:
        raise ValueError("corpus is empty")

    base = list(RESERVED) + sorted(chars)
    if max_size < len(base) + 2:
        raise ValueError(
            f"max_size {max_size} too small: need at least {len(base) + 2} "
            "for the reserved and character blocks"
        )
    seen = set(base)
    tokens = base
    for word, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        if len(tokens) >= max_size:
            break
        if word in seen:
            continue
        tokens.append(word)
        seen.add(word)
    return Vocab(tokens=tuple(tokens))


def _encode_word(
    vocab: Vocab, word: str, base: int, ids: list[int], offsets: list[tuple[int, int]]
) -> None:
    pool, maxlen = vocab._match_pool
    whole = pool.get(word)
    if whole is not None:
        ids.append(whole)
        offsets.append((base, base + len(word)))
        return
    pos = 0
    while pos < len(word):
        for length in range(min(maxlen, len(word) - pos), 0, -1):
            tid = pool.get(word[pos : pos + length])
            if tid is not None:
                ids.append(tid)
                offsets.append((base + pos, base + pos + length))
                pos += length
                break
        else:
            ids.append(UNK_ID)
            offsets.append((base + pos, base + pos + 1))
            pos += 1


def _encode_plain(
    vocab: Vocab,
    segment: str,
    base: int,
    ids: list[int],
    offsets: list[tuple[int, int]],
) -> None:
    pool, _ = vocab._match_pool
    i = 0
    n = len(segment)
    while i < n:
        ch = segment[i]
        if ch.isspace():
            ids.append(pool.get(ch, UNK_ID))
            offsets.append((base + i, base + i + 1))
            i += 1
            continue
        j = i
        while j < n and not segment[j].isspace():
            j += 1
        _encode_word(vocab, segment[i:j], base + i, ids, offsets)
        i = j


def encode_with_offsets(
    vocab: Vocab, text: str
) -> tuple[list[int], list[tuple[int, int]]]:
    """Token ids plus the (start, end) character span of every token."""
    ids: list[int] = []
    offsets: list[tuple[int, int]] = []
    pos = 0
    for m in _RESERVED_RE.finditer(text):
        _encode_plain(vocab, text[pos : m.start()], pos, ids, offsets)
        ids.append(vocab.token_to_id[m.group(0)])
        offsets.append((m.start(), m.end()))
        pos = m.end()
    _encode_plain(vocab, text[pos:], pos, ids, offsets)
    return ids, offsets


def encode(vocab: Vocab, text: str) -> list[int]:
    return encode_with_offsets(vocab, text)[0]


def decode(vocab: Vocab, ids: Iterable[int]) -> str:
    """Concatenate token surface strings; exact inverse of encode when no
    token fell back to UNK."""
    parts = []
    for i in ids:
        if not 0 <= i < vocab.size:
            raise ValueError(f"token id {i} out of range for vocab size {vocab.size}")
        if i in (PAD_ID, BOS_ID, EOS_ID):
            continue
        parts.append(vocab.tokens[i])
    return "".join(parts)


def token_index_for_span(
    offsets: list[tuple[int, int]], span: tuple[int, int]
) -> int:
    """Index of the single token that exactly covers span; error otherwise."""
    lo, hi = span
    for i, (a, b) in enumerate(offsets):
        if a == lo and b == hi:
            return i
        if a > lo:
            break
    raise ValueError(f"span {span} does not align with a single token")


def save_vocab(vocab: Vocab, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(list(vocab.tokens), f, ensure_ascii=False)
        f.write("\n")


def load_vocab(path: str | Path) -> Vocab:
    with open(path, encoding="utf-8") as f:
        tokens = json.load(f)
    return Vocab(tokens=tuple(tokens))
