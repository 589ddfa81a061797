"""Corpus standardization and overlapping chunk segmentation.

Documents are normalized (NFC, LF newlines, no NUL bytes) and split into
chunks of at most `chunk_size` engine tokens. Consecutive chunks re-include
the trailing `overlap` tokens of their predecessor, and split points prefer,
in order: paragraph breaks, sentence-final punctuation (CJK included),
clause punctuation, whitespace, hard cut.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import unicodedata
from dataclasses import dataclass
from pathlib import Path

from .errors import IoError, UnsupportedFormat
from .tokens import CLAUSE_PUNCT, SENTENCE_PUNCT, count_tokens, is_cjk_char, token_spans

logger = logging.getLogger(__name__)

SUPPORTED_SUFFIXES = {".txt", ".md", ".markdown", ".text"}

_PARAGRAPH_GAP_RE = re.compile(r"\n[ \t]*\n")


@dataclass(frozen=True)
class Document:
    doc_id: str
    source_path: str
    text: str
    language_hint: str  # "cjk" | "latin" | "mixed"


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    ordinal: int
    text: str
    token_count: int
    char_span: tuple[int, int]

    def to_json(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "doc_id": self.doc_id,
            "ordinal": self.ordinal,
            "text": self.text,
            "token_count": self.token_count,
            "char_span": list(self.char_span),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Chunk":
        return cls(
            chunk_id=data["chunk_id"],
            doc_id=data["doc_id"],
            ordinal=data["ordinal"],
            text=data["text"],
            token_count=data["token_count"],
            char_span=(data["char_span"][0], data["char_span"][1]),
        )


def normalize_text(raw: str) -> str:
    text = raw.replace("\r\n", "\n").replace("\r", "\n").replace("\x00", "")
    return unicodedata.normalize("NFC", text)


def _language_hint(text: str) -> str:
    visible = [ch for ch in text if not ch.isspace()]
    if not visible:
        return "latin"
    cjk = sum(1 for ch in visible if is_cjk_char(ch))
    if cjk == 0:
        return "latin"
    if cjk / len(visible) >= 0.3:
        return "cjk"
    return "mixed"


def document_from_text(text: str, source_path: str = "<memory>") -> Document:
    normalized = normalize_text(text)
    digest = hashlib.sha256(normalized.encode("utf-8")).hexdigest()[:16]
    return Document(
        doc_id=f"d{digest}",
        source_path=source_path,
        text=normalized,
        language_hint=_language_hint(normalized),
    )


def load_documents(paths: list[str | Path]) -> list[Document]:
    """Load and normalize corpus files, preserving input order.

    Empty files are skipped with a warning. Unsupported formats raise
    UnsupportedFormat, unreadable files raise IoError.
    """
    documents = []
    for path in paths:
        p = Path(path)
        if p.suffix.lower() not in SUPPORTED_SUFFIXES:
            raise UnsupportedFormat(f"{p}: only plain text and markdown are supported")
        try:
            raw = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot read {p}: {exc}") from exc
        doc = document_from_text(raw, source_path=str(p))
        if not doc.text.strip():
            logger.warning("skipping empty file %s", p)
            continue
        documents.append(doc)
    return documents


def expand_paths(target: str | Path) -> list[Path]:
    """A directory expands to its supported files, sorted; a file is itself."""
    p = Path(target)
    if p.is_dir():
        return sorted(q for q in p.rglob("*") if q.is_file() and q.suffix.lower() in SUPPORTED_SUFFIXES)
    return [p]


def _boundary_class(text: str, spans: list[tuple[int, int]], index: int) -> int:
    """Rank the split quality of a boundary BEFORE token `index`.

    4 = paragraph break, 3 = sentence-final punctuation, 2 = clause
    punctuation, 1 = whitespace, 0 = none (mid-word or tight punctuation).
    """
    gap = text[spans[index - 1][1] : spans[index][0]]
    prev_token = text[spans[index - 1][0] : spans[index - 1][1]]
    if _PARAGRAPH_GAP_RE.search(gap):
        return 4
    if prev_token in SENTENCE_PUNCT:
        return 3
    if prev_token in CLAUSE_PUNCT:
        return 2
    if gap:
        return 1
    return 0


def split(document: Document, chunk_size: int = 768, overlap: int = 32) -> list[Chunk]:
    """Segment a document into overlapping chunks.

    Boundary selection scans backward inside the token window and picks the
    latest boundary of the best available class. Overlap is realized by
    re-including the trailing `overlap` tokens of the previous chunk, so the
    shared token count between consecutive chunks is exact.
    """
    if not chunk_size > overlap >= 0:
        raise ValueError("require chunk_size > overlap >= 0")
    text = document.text
    spans = token_spans(text)
    n = len(spans)
    if n == 0:
        return []

    # b-list: token indices where the "new content" of each chunk ends.
    boundaries: list[int] = []
    cursor = 0
    first = True
    while cursor < n:
        budget = chunk_size if first else chunk_size - overlap
        first = False
        if n - cursor <= budget:
            boundaries.append(n)
            break
        window_end = cursor + budget
        best_index = window_end  # hard cut fallback
        best_class = 0
        for b in range(window_end, cursor, -1):
            cls = _boundary_class(text, spans, b)
            if cls > best_class:
                best_class = cls
                best_index = b
                if cls == 4:
                    break
        boundaries.append(best_index)
        cursor = best_index

    chunks: list[Chunk] = []
    prev_boundary = 0
    for ordinal, boundary in enumerate(boundaries):
        start_token = max(prev_boundary - overlap, 0) if ordinal > 0 else 0
        char_start = 0 if ordinal == 0 else spans[start_token][0]
        char_end = len(text) if boundary == n else spans[boundary][0]
        chunk_text = text[char_start:char_end]
        chunks.append(
            Chunk(
                chunk_id=f"{document.doc_id}:{ordinal:04d}",
                doc_id=document.doc_id,
                ordinal=ordinal,
                text=chunk_text,
                token_count=count_tokens(chunk_text),
                char_span=(char_start, char_end),
            )
        )
        prev_boundary = boundary
    return chunks


def reconstruct(chunks: list[Chunk]) -> str:
    """Drop each chunk's overlap prefix and concatenate; inverse of split."""
    parts = []
    prev_end = 0
    for chunk in chunks:
        start, end = chunk.char_span
        parts.append(chunk.text[prev_end - start :] if start < prev_end else chunk.text)
        prev_end = end
    return "".join(parts)


def write_chunks_jsonl(chunks: list[Chunk], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for chunk in chunks:
            fh.write(json.dumps(chunk.to_json(), ensure_ascii=False, sort_keys=True) + "\n")
