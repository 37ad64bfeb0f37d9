"""Vocabulary construction, deterministic subword segmentation, and the
token normalization used by vocabulary matching.

The tokenizer is whitespace splitting plus a greedy longest-match character
fallback for out-of-vocabulary words. Continuation pieces carry a leading
"##" so detokenization can rebuild words without guessing; a learned-subword
tokenizer could replace this behind the same interface.
"""

from __future__ import annotations

import unicodedata
from collections import Counter
from typing import Iterable

SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[MASK]", "[BOS]", "[EOS]")
PAD_ID, UNK_ID, MASK_ID, BOS_ID, EOS_ID = range(5)

CONTINUATION = "##"


class Vocabulary:
    """Immutable token <-> id bijection with the five specials at ids 0-4."""

    __slots__ = ("tokens", "_ids")

    def __init__(self, tokens: Iterable[str]):
        self.tokens = tuple(tokens)
        if self.tokens[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            dupes = [t for t, c in Counter(self.tokens).items() if c > 1]
            raise ValueError(f"duplicate tokens: {dupes[:5]}")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id_of(self, token: str) -> int:
        """Id of `token`, or UNK_ID when absent."""
        return self._ids.get(token, UNK_ID)

    def get(self, token: str):
        return self._ids.get(token)

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    def __repr__(self):
        return f"Vocabulary(size={self.size})"


def build_vocab(corpus: Iterable[str], max_size: int, min_count: int = 1) -> Vocabulary:
    """Count whitespace-split tokens and keep the most frequent.

    Specials come first, then tokens by descending count with ties broken
    lexicographically, truncated so the total does not exceed `max_size`.
    Tokens seen fewer than `min_count` times are dropped. An empty corpus
    yields the specials alone.
    """
    if max_size <= len(SPECIAL_TOKENS):
        raise ValueError(f"max_size must exceed {len(SPECIAL_TOKENS)}")
    counts = Counter()
    for line in corpus:
        counts.update(line.split())
    kept = sorted(
        (t for t, c in counts.items() if c >= min_count),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary(SPECIAL_TOKENS + tuple(kept[: max_size - len(SPECIAL_TOKENS)]))


def _segment_word(word: str, vocab: Vocabulary) -> list[int]:
    """Greedy longest-match pieces for one whitespace-delimited word.

    The first piece matches bare tokens, later pieces only "##"-marked ones;
    a position with no match emits [UNK] and advances one character.
    """
    ids = []
    pos = 0
    n = len(word)
    while pos < n:
        prefix = "" if pos == 0 else CONTINUATION
        end = n
        hit = None
        while end > pos:
            cand = prefix + word[pos:end]
            found = vocab.get(cand)
            if found is not None:
                hit = found
                break
            end -= 1
        if hit is None:
            ids.append(UNK_ID)
            pos += 1
        else:
            ids.append(hit)
            pos = end
    return ids


def tokenize(text: str, vocab: Vocabulary, max_len: int = 128) -> list[int]:
    """Whitespace split, whole-word lookup, character fallback, truncation."""
    ids: list[int] = []
    for word in text.split():
        whole = vocab.get(word)
        if whole is not None:
            ids.append(whole)
        else:
            ids.extend(_segment_word(word, vocab))
        if len(ids) >= max_len:
            break
    return ids[:max_len]


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    """Rebuild text: "##" pieces glue to the previous piece, others start a
    new word. [PAD]/[BOS]/[EOS] are dropped; [UNK] and [MASK] print literally."""
    words: list[str] = []
    for i in ids:
        tok = vocab.token_of(i)
        if i in (PAD_ID, BOS_ID, EOS_ID):
            continue
        if tok.startswith(CONTINUATION) and words:
            words[-1] += tok[len(CONTINUATION):]
        else:
            words.append(tok)
    return " ".join(words)


def normalize(token: str) -> str:
    """Compatibility decomposition, case fold, strip combining marks.

    Case folding can reintroduce decomposable or marked characters, so the
    three stages repeat until the string stops changing; this makes the map
    idempotent by construction.
    """
    prev = None
    cur = token
    while cur != prev:
        prev = cur
        cur = unicodedata.normalize("NFKD", cur).casefold()
        cur = "".join(ch for ch in cur if not unicodedata.combining(ch))
    return cur


def save_vocab(vocab: Vocabulary, path) -> None:
    """One token per line, UTF-8; line number = id."""
    for t in vocab.tokens:
        if "\n" in t or "\r" in t:
            raise ValueError(f"token not representable in line format: {t!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for t in vocab.tokens:
            f.write(t + "\n")


def load_vocab(path) -> Vocabulary:
    with open(path, encoding="utf-8", newline="\n") as f:
        tokens = [line.rstrip("\n") for line in f]
    if tokens and tokens[-1] == "":
        tokens.pop()
    return Vocabulary(tokens)
