"""Engine token rule.

Every budget in the engine (chunk sizes, context-section budgets, prompt
windows) is measured with one deterministic rule instead of a model
tokenizer:

* each CJK character counts as one token,
* each maximal run of non-CJK word characters counts as one token,
* every other non-whitespace character counts as one token,
* whitespace counts as nothing.

The rule is intentionally tokenizer-agnostic so budget invariants can be
asserted exactly in tests and stay stable across model providers.
"""

from __future__ import annotations

import re

# Han ideographs (incl. extension A and compatibility block), kana and
# hangul syllables. Fullwidth punctuation is NOT included here; it falls
# through to the one-token-per-character branch, which counts the same.
_CJK_RANGES = (
    "぀-ヿ"  # hiragana + katakana
    "㐀-䶿"
    "一-鿿"
    "豈-﫿"
    "가-힯"
)

# Order matters: a CJK char must not be swallowed by a word run.
_TOKEN_RE = re.compile(rf"[{_CJK_RANGES}]|[^\W{_CJK_RANGES}]+|\S")

SENTENCE_PUNCT = frozenset(".!?。！？")
CLAUSE_PUNCT = frozenset(",;，；、")


def count_tokens(text: str) -> int:
    """Count engine tokens in ``text``. Deterministic, pure."""
    return len(_TOKEN_RE.findall(text))


def token_spans(text: str) -> list[tuple[int, int]]:
    """Return (start, end) character offsets of every token, in order."""
    return [m.span() for m in _TOKEN_RE.finditer(text)]


def first_word_token(text: str) -> str:
    """First alphanumeric or CJK token of ``text``, or "" if none.

    Leading punctuation (quotes, brackets) is skipped so that a completion
    like ``"Yes."`` still parses as affirmative.
    """
    for match in _TOKEN_RE.finditer(text):
        token = match.group()
        if len(token) == 1 and not token.isalnum():
            continue
        return token
    return ""


_CJK_SINGLE_RE = re.compile(rf"[{_CJK_RANGES}]")


def is_cjk_char(ch: str) -> bool:
    return bool(_CJK_SINGLE_RE.match(ch))


def truncate_to_tokens(text: str, max_tokens: int) -> str:
    """Cut ``text`` after at most ``max_tokens`` engine tokens."""
    if max_tokens <= 0:
        return ""
    spans = token_spans(text)
    if len(spans) <= max_tokens:
        return text
    return text[: spans[max_tokens - 1][1]]
