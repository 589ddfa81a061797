"""Iterative entity/relation extraction and incremental graph merge.

A chunk goes through loop NER: an initial extraction, then repeated
continue/judge rounds under either the judge-first ("trial") or the
extract-first ("base") strategy, until the judge says nothing remains or
the round cap is hit. Parsed relation records are merged into the graph
store; entity-only lines enrich the records with types and descriptions.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Sequence

from . import prompts
from .errors import KgragError
from .gateway import ChatRequest, LLMGateway
from .ingestion import Chunk
from .store import GraphStore, normalize_name

logger = logging.getLogger(__name__)

_RECORD_RE = re.compile(r'^\s*\(\s*"(entity|relation)"\s*\|(.*)\)\s*$')


@dataclass(frozen=True)
class ExtractionRecord:
    subject: str
    relation: str
    object: str
    entity_types: tuple[str, str] = (prompts.FALLBACK_ENTITY_TYPE, prompts.FALLBACK_ENTITY_TYPE)
    keywords: tuple[str, ...] = ()
    description: str = ""
    weight: float = 1.0
    chunk_id: str = ""
    subject_description: str = ""  # from a matching entity line, when present
    object_description: str = ""

    def identity(self) -> tuple[str, str, str]:
        return (normalize_name(self.subject), normalize_name(self.relation), normalize_name(self.object))


@dataclass
class EntityAnnotation:
    name: str
    entity_type: str
    description: str


@dataclass
class ParseResult:
    records: list[ExtractionRecord]
    entities: dict[str, EntityAnnotation]  # normalized name -> annotation
    parse_failures: int


@dataclass
class NerHistory:
    records: list[ExtractionRecord]
    rounds_used: int
    strategy: str  # "trial" | "base"
    terminated_by: str  # "judge_no" | "max_rounds"
    parse_failures: int = 0
    incomplete: bool = False  # provider error aborted the loop


def _clamp_weight(value: float) -> float:
    return min(max(value, 0.0), 10.0)


def _coerce_type(raw: str, vocabulary: Sequence[str]) -> str:
    cleaned = raw.strip().casefold()
    for known in vocabulary:
        if cleaned == known.casefold():
            return known
    return prompts.FALLBACK_ENTITY_TYPE


def parse_records(
    completion: str, chunk_id: str, vocabulary: Sequence[str] = prompts.DEFAULT_ENTITY_TYPES
) -> ParseResult:
    """Parse a completion in the delimited record syntax.

    Candidate lines are those shaped like ("entity"|...) / ("relation"|...).
    A candidate with the wrong arity, empty required slots, or an unparseable
    weight is dropped and counted. Non-record prose is ignored; a completion
    with no candidate lines at all counts as one parse failure.
    """
    records: list[ExtractionRecord] = []
    entities: dict[str, EntityAnnotation] = {}
    failures = 0
    saw_candidate = False
    for line in completion.splitlines():
        match = _RECORD_RE.match(line)
        if not match:
            continue
        saw_candidate = True
        kind = match.group(1)
        slots = [s.strip() for s in match.group(2).split("|")]
        if kind == "entity":
            if len(slots) != 3 or not normalize_name(slots[0]):
                failures += 1
                continue
            name, raw_type, description = slots
            entities[normalize_name(name)] = EntityAnnotation(
                name=name, entity_type=_coerce_type(raw_type, vocabulary), description=description
            )
        else:
            if len(slots) != 6:
                failures += 1
                continue
            subject, relation, obj, description, keywords_raw, weight_raw = slots
            if not (normalize_name(subject) and normalize_name(relation) and normalize_name(obj)):
                failures += 1
                continue
            try:
                weight = _clamp_weight(float(weight_raw))
            except ValueError:
                failures += 1
                continue
            keywords = tuple(k.strip() for k in keywords_raw.split(",") if k.strip())
            records.append(
                ExtractionRecord(
                    subject=subject,
                    relation=relation,
                    object=obj,
                    keywords=keywords,
                    description=description,
                    weight=weight,
                    chunk_id=chunk_id,
                )
            )
    if not saw_candidate and completion.strip():
        failures += 1
    return ParseResult(records=records, entities=entities, parse_failures=failures)


def _enrich(records: list[ExtractionRecord], entities: dict[str, EntityAnnotation]) -> list[ExtractionRecord]:
    out = []
    for rec in records:
        subj = entities.get(normalize_name(rec.subject))
        obj = entities.get(normalize_name(rec.object))
        out.append(
            ExtractionRecord(
                subject=rec.subject,
                relation=rec.relation,
                object=rec.object,
                entity_types=(
                    subj.entity_type if subj else prompts.FALLBACK_ENTITY_TYPE,
                    obj.entity_type if obj else prompts.FALLBACK_ENTITY_TYPE,
                ),
                keywords=rec.keywords,
                description=rec.description,
                weight=rec.weight,
                chunk_id=rec.chunk_id,
                subject_description=subj.description if subj else "",
                object_description=obj.description if obj else "",
            )
        )
    return out


def _history_lines(records: list[ExtractionRecord], entities: dict[str, EntityAnnotation]) -> list[str]:
    lines = [
        f'("entity"|{a.name}|{a.entity_type}|{a.description})'
        for a in sorted(entities.values(), key=lambda a: normalize_name(a.name))
    ]
    lines += [
        f'("relation"|{r.subject}|{r.relation}|{r.object}|{r.description}|{", ".join(r.keywords)}|{r.weight})'
        for r in records
    ]
    return lines


def _chat_extract(gateway: LLMGateway, messages, purpose: str) -> str:
    return gateway.chat(ChatRequest(messages=messages, max_output_tokens=2048), purpose=purpose)


def ner_init(
    chunk: Chunk,
    gateway: LLMGateway,
    entity_types: Sequence[str] = prompts.DEFAULT_ENTITY_TYPES,
) -> ParseResult:
    """One initial extraction pass over a chunk."""
    if not chunk.text.strip():
        raise ValueError("chunk text must be non-empty")
    completion = _chat_extract(gateway, prompts.ner_init_messages(chunk.text, entity_types), "ner")
    result = parse_records(completion, chunk.chunk_id, entity_types)
    if result.parse_failures:
        logger.info("chunk %s: %d unparseable record line(s)", chunk.chunk_id, result.parse_failures)
    return result


def loop_ner(
    chunk: Chunk,
    gateway: LLMGateway,
    strategy: str = "base",
    max_rounds: int = 2,
    entity_types: Sequence[str] = prompts.DEFAULT_ENTITY_TYPES,
) -> NerHistory:
    """Iterative extraction over one chunk.

    trial: each round asks the judge first and only extracts on "yes".
    base: each round extracts first, then asks the judge whether to stop.
    rounds_used counts continue-extraction calls; duplicates (by normalized
    subject/relation/object) are suppressed as rounds accumulate.
    """
    if strategy not in ("trial", "base"):
        raise ValueError(f"unknown loop NER strategy {strategy!r}")
    if max_rounds < 0:
        raise ValueError("max_rounds must be >= 0")

    init = ner_init(chunk, gateway, entity_types)
    records = list(init.records)
    seen = {r.identity() for r in records}
    entities = dict(init.entities)
    failures = init.parse_failures
    rounds_used = 0
    terminated_by = "max_rounds"
    incomplete = False

    def do_continue() -> None:
        nonlocal failures
        completion = _chat_extract(
            gateway,
            prompts.ner_continue_messages(chunk.text, _history_lines(records, entities), entity_types),
            "ner",
        )
        result = parse_records(completion, chunk.chunk_id, entity_types)
        failures += result.parse_failures
        entities.update(result.entities)
        for rec in result.records:
            if rec.identity() not in seen:
                seen.add(rec.identity())
                records.append(rec)

    def judge_more() -> bool:
        verdict = gateway.judge(
            prompts.ner_judge_messages(chunk.text, _history_lines(records, entities))[0]["content"],
            purpose="ner_judge",
        )
        return verdict.verdict == "yes"

    try:
        for _ in range(max_rounds):
            if strategy == "trial":
                if not judge_more():
                    terminated_by = "judge_no"
                    break
                do_continue()
                rounds_used += 1
            else:
                do_continue()
                rounds_used += 1
                if not judge_more():
                    terminated_by = "judge_no"
                    break
    except KgragError as exc:
        logger.warning("loop NER aborted on chunk %s: %s", chunk.chunk_id, exc)
        incomplete = True

    return NerHistory(
        records=_enrich(records, entities),
        rounds_used=rounds_used,
        strategy=strategy,
        terminated_by=terminated_by,
        parse_failures=failures,
        incomplete=incomplete,
    )


@dataclass
class MergeReport:
    nodes_created: int = 0
    nodes_merged: int = 0
    edges_created: int = 0
    edges_merged: int = 0
    self_loops_dropped: int = 0

    def add(self, other: "MergeReport") -> None:
        self.nodes_created += other.nodes_created
        self.nodes_merged += other.nodes_merged
        self.edges_created += other.edges_created
        self.edges_merged += other.edges_merged
        self.self_loops_dropped += other.self_loops_dropped

    def to_json(self) -> dict:
        return {
            "nodes_created": self.nodes_created,
            "nodes_merged": self.nodes_merged,
            "edges_created": self.edges_created,
            "edges_merged": self.edges_merged,
            "self_loops_dropped": self.self_loops_dropped,
        }


def merge_into_graph(records: Sequence[ExtractionRecord], graph: GraphStore) -> MergeReport:
    """Incrementally merge extraction records into the store.

    Endpoint nodes take the entity-line description when one was extracted,
    falling back to the relation description. Node weights keep the max
    contribution, edge weights sum. The result is independent of record
    order.
    """
    report = MergeReport()
    for rec in records:
        refs = {rec.chunk_id} if rec.chunk_id else set()
        touched: set[str] = set()
        for name, etype, desc in (
            (rec.subject, rec.entity_types[0], rec.subject_description or rec.description),
            (rec.object, rec.entity_types[1], rec.object_description or rec.description),
        ):
            node_id = normalize_name(name)
            if node_id in touched:
                continue  # self-loop record touches its single node once
            touched.add(node_id)
            outcome = graph.upsert_node(
                display_name=name,
                entity_type=etype,
                description=desc,
                keywords=list(rec.keywords),
                weight=rec.weight,
                chunk_refs=refs,
            )
            if outcome == "created":
                report.nodes_created += 1
            else:
                report.nodes_merged += 1
        before_drops = graph.metrics["self_loops_dropped"]
        outcome = graph.upsert_edge(
            src_name=rec.subject,
            dst_name=rec.object,
            description=rec.description,
            keywords=list(rec.keywords),
            weight=rec.weight,
            chunk_refs=refs,
        )
        dropped = graph.metrics["self_loops_dropped"] - before_drops
        if dropped:
            report.self_loops_dropped += dropped
        elif outcome == "created":
            report.edges_created += 1
        else:
            report.edges_merged += 1
    return report
