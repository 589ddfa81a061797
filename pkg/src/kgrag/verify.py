"""Retrieval verification and answer generation.

Argument checking asks the judge whether the retrieved context can answer
the question and only generates when it can; result checking generates a
draft first and judges the (question, context, draft) triple. Generation
truncates oversized context at section boundaries, never the question.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

from . import prompts, retrieval
from .errors import BudgetExceeded, KgragError, VerificationError
from .gateway import ChatRequest, LLMGateway
from .tokens import count_tokens

logger = logging.getLogger(__name__)

# The sufficiency judge answers with the literal token "support".
SUPPORT_AFFIRMATIVES = ("support",)

GENERATION_MAX_OUTPUT_TOKENS = 1024

_SECTION_HEADERS = (retrieval.ENTITY_HEADER, retrieval.RELATION_HEADER, retrieval.SOURCE_HEADER)


@dataclass
class VerificationOutcome:
    mode: str  # "argument" | "result"
    verdict: str  # "supported" | "unsupported"
    judged_text: str
    generation: str | None = None

    @property
    def supported(self) -> bool:
        return self.verdict == "supported"


def truncate_context(context: str, max_tokens: int) -> str:
    """Drop whole lines from the bulkiest sections first until it fits.

    Order: chunk-section tail, then edge-section tail, then node-section
    tail. Context without the known section headers is trimmed from its
    trailing lines.
    """
    if count_tokens(context) <= max_tokens:
        return context
    lines = context.split("\n")
    header_positions = {line: i for i, line in enumerate(lines) if line in _SECTION_HEADERS}
    if len(header_positions) == 3:
        ent = header_positions[retrieval.ENTITY_HEADER]
        rel = header_positions[retrieval.RELATION_HEADER]
        src = header_positions[retrieval.SOURCE_HEADER]
        sections = {
            "nodes": lines[ent + 1 : rel],
            "edges": lines[rel + 1 : src],
            "chunks": lines[src + 1 :],
        }

        def rendered() -> str:
            return "\n".join(
                [retrieval.ENTITY_HEADER, *sections["nodes"],
                 retrieval.RELATION_HEADER, *sections["edges"],
                 retrieval.SOURCE_HEADER, *sections["chunks"]]
            )

        for name in ("chunks", "edges", "nodes"):
            while sections[name] and count_tokens(rendered()) > max_tokens:
                sections[name].pop()
            if count_tokens(rendered()) <= max_tokens:
                return rendered()
        return rendered()
    while lines and count_tokens("\n".join(lines)) > max_tokens:
        lines.pop()
    return "\n".join(lines)


def generate_answer(
    query: str,
    context: str,
    gateway: LLMGateway,
    sink: Callable[[str], None] | None = None,
    max_output_tokens: int = GENERATION_MAX_OUTPUT_TOKENS,
) -> str:
    """Produce the final answer; streams fragments to `sink` when given.

    Context is shrunk to fit the window; BudgetExceeded escapes only when
    the question alone is too large.
    """
    window = gateway.config.max_context_tokens - max_output_tokens
    skeleton_tokens = sum(
        count_tokens(m["content"]) for m in prompts.generate_messages(query, "")
    )
    if skeleton_tokens > window:
        raise BudgetExceeded("the question alone exceeds the provider window")
    fitted = truncate_context(context, max(window - skeleton_tokens, 0))
    request = ChatRequest(
        messages=prompts.generate_messages(query, fitted),
        max_output_tokens=max_output_tokens,
        stream=sink is not None,
    )
    return gateway.chat(request, purpose="generate", sink=sink)


def argument_check(
    query: str,
    context: str,
    gateway: LLMGateway,
    sink: Callable[[str], None] | None = None,
) -> VerificationOutcome:
    """Judge first; generate only on a supporting verdict."""
    if not context:
        raise ValueError("context must be non-empty")
    try:
        verdict = gateway.judge(
            prompts.sufficiency_judge_prompt(query, context),
            extra_affirmatives=SUPPORT_AFFIRMATIVES,
            purpose="verify",
        )
        if verdict.verdict != "yes":
            return VerificationOutcome("argument", "unsupported", verdict.raw_text)
        answer = generate_answer(query, context, gateway, sink=sink)
    except BudgetExceeded:
        raise
    except KgragError as exc:
        raise VerificationError(f"argument check failed: {exc}") from exc
    return VerificationOutcome("argument", "supported", verdict.raw_text, generation=answer)


def result_check(
    query: str,
    context: str,
    gateway: LLMGateway,
) -> VerificationOutcome:
    """Generate a draft, then judge question, context and draft together.

    The draft is retained in the outcome whatever the verdict, so callers
    can still surface it with a warning.
    """
    if not context:
        raise ValueError("context must be non-empty")
    try:
        draft = generate_answer(query, context, gateway, sink=None)
        verdict = gateway.judge(
            prompts.result_judge_prompt(query, context, draft),
            extra_affirmatives=SUPPORT_AFFIRMATIVES,
            purpose="verify",
        )
    except BudgetExceeded:
        raise
    except KgragError as exc:
        raise VerificationError(f"result check failed: {exc}") from exc
    status = "supported" if verdict.verdict == "yes" else "unsupported"
    return VerificationOutcome("result", status, verdict.raw_text, generation=draft)
