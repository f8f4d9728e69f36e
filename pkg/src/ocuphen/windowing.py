"""Offset-preserving tokenization and span-centered context windows.

Classifier inputs are windows of at most 128 tokens centered on a concept
span: starting from the tokens the span overlaps, the window grows one token
at a time, alternating left and right (left first), skipping a side once it
hits the note boundary, until the budget or both boundaries are reached.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

TOKEN_PATTERN = re.compile(r"\w+|[^\w\s]")

DEFAULT_MAX_LEN = 128


class WindowError(ValueError):
    pass


@dataclass(frozen=True)
class Token:
    surface: str
    start: int
    end: int
    vocab_id: int | None = None


@dataclass(frozen=True)
class Window:
    """A token window; ``span_lo..span_hi`` (inclusive) cover the concept."""

    tokens: tuple[Token, ...]
    span_lo: int
    span_hi: int
    max_len: int = DEFAULT_MAX_LEN

    def __post_init__(self) -> None:
        if not 0 <= self.span_lo <= self.span_hi < len(self.tokens):
            raise WindowError("span token range outside the window")
        if len(self.tokens) > self.max_len:
            raise WindowError("window exceeds its token budget")

    @property
    def span_tokens(self) -> tuple[Token, ...]:
        return self.tokens[self.span_lo : self.span_hi + 1]


def tokenize(text: str) -> list[Token]:
    """Words and single punctuation marks, with character offsets."""
    return [
        Token(m.group(0), m.start(), m.end()) for m in TOKEN_PATTERN.finditer(text)
    ]


def center_window(
    tokens: list[Token],
    span_start: int,
    span_end: int,
    max_len: int = DEFAULT_MAX_LEN,
) -> Window:
    """Window of ≤ ``max_len`` tokens centered on a character span.

    A token belongs to the span when it overlaps [span_start, span_end);
    partial overlap includes the whole token.
    """
    if max_len < 1:
        raise WindowError("max_len must be positive")
    covered = [
        i for i, tok in enumerate(tokens) if tok.start < span_end and tok.end > span_start
    ]
    if not covered:
        raise WindowError(
            f"span [{span_start}, {span_end}) overlaps no token"
        )
    lo, hi = covered[0], covered[-1]
    if hi - lo + 1 > max_len:
        raise WindowError(
            f"span covers {hi - lo + 1} tokens, more than the window budget {max_len}"
        )
    size = hi - lo + 1
    grow_left = True
    while size < max_len and (lo > 0 or hi < len(tokens) - 1):
        if grow_left:
            if lo > 0:
                lo -= 1
                size += 1
        elif hi < len(tokens) - 1:
            hi += 1
            size += 1
        grow_left = not grow_left
    return Window(
        tokens=tuple(tokens[lo : hi + 1]),
        span_lo=covered[0] - lo,
        span_hi=covered[-1] - lo,
        max_len=max_len,
    )
