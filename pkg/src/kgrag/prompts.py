"""Versioned prompt templates.

Every LLM call in the engine builds its message list here and nowhere else,
so scripted-provider fixtures can be constructed against the exact bytes
that will be sent. Templates are plain functions returning message lists.
"""

from __future__ import annotations

from typing import Sequence

PROMPT_VERSION = "1"

Message = dict[str, str]

DEFAULT_ENTITY_TYPES = [
    "organism/variety",
    "trait",
    "location",
    "person",
    "organization",
    "method",
    "metric",
    "time",
]

# Entity types the parser accepts even when the model strays from the list.
FALLBACK_ENTITY_TYPE = "other"

ENTITY_LINE_FORMAT = '("entity"|<name>|<type>|<description>)'
RELATION_LINE_FORMAT = '("relation"|<subject>|<relation>|<object>|<description>|<keywords>|<weight>)'

_TYPE_EXAMPLES = {
    "organism/variety": '("entity"|Zhefu 802|organism/variety|A widely planted semi-dwarf rice variety)',
    "trait": '("entity"|plant height|trait|The measured height of a mature plant)',
    "location": '("entity"|Zhejiang|location|A coastal province where the variety was bred)',
    "person": '("entity"|Marie Curie|person|A physicist and chemist who studied radioactivity)',
    "organization": '("entity"|CNRRI|organization|A national rice research institute)',
    "method": '("entity"|gamma-ray mutagenesis|method|A mutation breeding technique using radiation)',
    "metric": '("entity"|yield per hectare|metric|Grain production measured per unit area)',
    "time": '("entity"|1898|time|The year the discovery was announced)',
}

_RELATION_EXAMPLE = (
    '("relation"|Marie Curie|discovered|radium|Marie Curie discovered radium in 1898'
    "|scientist, discovery|4.5)"
)


def _format_rules(entity_types: Sequence[str]) -> str:
    examples = "\n".join(_TYPE_EXAMPLES.get(t, "") for t in entity_types if t in _TYPE_EXAMPLES)
    return (
        "Output one record per line and nothing else.\n"
        f"Entity record:   {ENTITY_LINE_FORMAT}\n"
        f"Relation record: {RELATION_LINE_FORMAT}\n"
        "Allowed entity types: " + ", ".join(entity_types) + ".\n"
        "Keywords are comma-separated. Weight is a relevance score between 0 and 10.\n"
        "Field values must not contain the | character.\n"
        "Examples, one per entity type:\n"
        f"{examples}\n"
        "Relation example:\n"
        f"{_RELATION_EXAMPLE}"
    )


def ner_init_messages(chunk_text: str, entity_types: Sequence[str]) -> list[Message]:
    return [
        {
            "role": "system",
            "content": (
                "You extract entities and relations from text to build a knowledge graph.\n"
                + _format_rules(entity_types)
            ),
        },
        {"role": "user", "content": f"Extract all entities and relations from this text:\n{chunk_text}"},
    ]


def ner_continue_messages(
    chunk_text: str, history_lines: Sequence[str], entity_types: Sequence[str]
) -> list[Message]:
    found = "\n".join(history_lines) if history_lines else "(none)"
    return [
        {
            "role": "system",
            "content": (
                "You extract entities and relations from text to build a knowledge graph.\n"
                + _format_rules(entity_types)
            ),
        },
        {
            "role": "user",
            "content": (
                "Many entities and relations were missed in the last extraction. "
                "Add the ones that are still missing, using the same record format. "
                "Do not repeat records already found.\n"
                f"Text:\n{chunk_text}\n"
                f"Already found:\n{found}"
            ),
        },
    ]


def ner_judge_messages(chunk_text: str, history_lines: Sequence[str]) -> list[Message]:
    found = "\n".join(history_lines) if history_lines else "(none)"
    return [
        {
            "role": "user",
            "content": (
                "Some entities or relations in the text below may still be missing "
                "from the extraction results. Answer strictly yes or no: do any "
                "entities or relations remain to be extracted?\n"
                f"Text:\n{chunk_text}\n"
                f"Extracted so far:\n{found}"
            ),
        }
    ]


def decompose_query_messages(query: str) -> list[Message]:
    # Exactly one worked example per keyword level keeps the prompt lean.
    return [
        {
            "role": "system",
            "content": (
                "Decompose the user question for knowledge-graph retrieval. "
                "Reply with a single JSON object:\n"
                '{"low_level_keywords": [...], "high_level_keywords": [...]}\n'
                "low_level_keywords name concrete entities; high_level_keywords name "
                "relations or themes.\n"
                'Example question: "Which institute bred Zhefu 802?"\n'
                'Example answer: {"low_level_keywords": ["Zhefu 802"], '
                '"high_level_keywords": ["breeding institute"]}'
            ),
        },
        {"role": "user", "content": query},
    ]


PLAN_BEGIN = "BEGIN_PLAN"
PLAN_END = "END_PLAN"

_OPERATOR_DOC = """Operators (the set is closed; use nothing else):
- Retrieve {"query": str}: fetch graph evidence for a subquery.
- Filter {"source": step_id, "condition": str}: keep source elements matching the condition.
- Aggregate {"source": step_id, "fn": "count"|"max"|"min"|"sum"}: aggregate numbers from a step.
- Math {"expr": str}: arithmetic over earlier steps referenced as s1, s2, ...
- Compare {"left": step_id, "right": step_id}: order two numeric results.
- Answer {"refs": [step_id, ...]}: compose the final answer from earlier steps.
Rules: steps are numbered from 1; a step may reference only earlier steps;
at most {max_steps} steps; the last step must be Answer."""

_PLAN_EXAMPLE = """Question: "How much taller is variety A than variety B?"
BEGIN_PLAN
[
  {"id": 1, "subquery": "height of variety A", "operator": "Retrieve", "args": {"query": "height of variety A"}, "refs": []},
  {"id": 2, "subquery": "height of variety B", "operator": "Retrieve", "args": {"query": "height of variety B"}, "refs": []},
  {"id": 3, "subquery": "height difference", "operator": "Math", "args": {"expr": "s1 - s2"}, "refs": [1, 2]},
  {"id": 4, "subquery": "final answer", "operator": "Answer", "args": {"refs": [3]}, "refs": [3]}
]
END_PLAN"""


def plan_messages(query: str, max_steps: int) -> list[Message]:
    return [
        {
            "role": "system",
            "content": (
                "Decompose the question into an ordered plan of retrieval operators. "
                f"Answer with a JSON array fenced by lines {PLAN_BEGIN} and {PLAN_END}.\n"
                + _OPERATOR_DOC.replace("{max_steps}", str(max_steps))
                + "\nExample:\n"
                + _PLAN_EXAMPLE
            ),
        },
        {"role": "user", "content": query},
    ]


def filter_judge_prompt(condition: str, element_line: str) -> str:
    return (
        "Answer strictly yes or no: does this graph element satisfy the condition?\n"
        f"Condition: {condition}\n"
        f"Element: {element_line}"
    )


def intent_messages(query: str, domain_description: str) -> list[Message]:
    return [
        {
            "role": "system",
            "content": (
                "You route questions for a knowledge base about: "
                f"{domain_description}.\n"
                "Reply with a single JSON object "
                '{"score": <0..1 domain relevance>, "slots": {<recognized slot>: <value>}}.'
            ),
        },
        {"role": "user", "content": query},
    ]


def sufficiency_judge_prompt(query: str, context: str) -> str:
    return (
        'Reply "support" if the context below contains enough information to answer '
        'the question, otherwise reply "no".\n'
        f"Question: {query}\n"
        f"Context:\n{context}"
    )


def result_judge_prompt(query: str, context: str, reply: str) -> str:
    return (
        'Reply "support" if the draft answer is coherent with the question and fully '
        'grounded in the context, otherwise reply "no".\n'
        f"Question: {query}\n"
        f"Context:\n{context}\n"
        f"Draft answer:\n{reply}"
    )


def generate_messages(query: str, context: str) -> list[Message]:
    return [
        {
            "role": "system",
            "content": (
                "Answer the question using only the provided context. "
                "Be concise and cite entity or source ids inline where useful."
            ),
        },
        {"role": "user", "content": f"Context:\n{context}\n\nQuestion: {query}"},
    ]
