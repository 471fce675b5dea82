"""Word-level vocabulary and reversible tokenization."""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
DEFAULT_MAX_LEN = 32


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


class Vocabulary:
    """Immutable token/id mapping with four reserved ids at the front."""

    def __init__(self, tokens: Sequence[str]):
        itos = list(RESERVED) + list(tokens)
        if len(set(itos)) != len(itos):
            raise ValueError("vocabulary tokens must be unique and must not clash with reserved names")
        self._itos = tuple(itos)
        self._stoi = {t: i for i, t in enumerate(itos)}

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._itos == other._itos

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._itos

    def id(self, token: str) -> int:
        return self._stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self._itos[idx]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self._itos).encode("utf-8")).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self._itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[:4]) != RESERVED:
            raise ValueError(f"{path}: first four lines must be the reserved tokens {RESERVED}")
        return cls(lines[4:])


def build_vocab(corpus: Iterable[str], min_count: int = 1) -> Vocabulary:
    """Collect lowercased whitespace tokens seen at least ``min_count`` times.

    Ids are assigned by descending frequency, ties broken lexicographically.
    """
    counts: Counter[str] = Counter()
    n_lines = 0
    for line in corpus:
        n_lines += 1
        counts.update(tokenize(line))
    if n_lines == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    framed: bool = False
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class TruncationLog:
    """Collects truncation events so they are never silent."""

    events: list[tuple[str, int]] = field(default_factory=list)


_truncations = TruncationLog()


def truncation_events() -> list[tuple[str, int]]:
    return list(_truncations.events)


def encode(text: str, vocab: Vocabulary, add_framing: bool = True, max_len: int = DEFAULT_MAX_LEN) -> TokenSequence:
    ids = [vocab.id(t) for t in tokenize(text)]
    budget = max_len - 2 if add_framing else max_len
    truncated = len(ids) > budget
    if truncated:
        log.warning("truncating %d tokens to %d: %.40r", len(ids), budget, text)
        _truncations.events.append((text, len(ids)))
        ids = ids[:budget]
    if add_framing:
        ids = [BOS] + ids + [EOS]
    return TokenSequence(tuple(ids), framed=add_framing, truncated=truncated)


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    """Map ids back to text, dropping framing and padding and stopping at EOS."""
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        out.append(vocab.token(i))
    return " ".join(out)
