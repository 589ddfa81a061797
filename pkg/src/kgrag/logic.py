"""Logic form retrieval: operator plans executed stepwise against the graph.

A query is decomposed by the LLM into an ordered plan drawn from a closed
operator set (Retrieve, Filter, Aggregate, Math, Compare, Answer). Steps may
reference earlier steps only; execution accumulates a sub-query/sub-answer
history whose rendering feeds verification and generation. Numeric work uses
exact rational arithmetic.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from fractions import Fraction
from . import prompts, retrieval
from .errors import DecompositionFailed, EmptyStore, StepExecutionFailed
from .gateway import ChatRequest, LLMGateway
from .store import GraphStore
from .tokens import count_tokens

logger = logging.getLogger(__name__)

OPERATORS = ("Retrieve", "Filter", "Aggregate", "Math", "Compare", "Answer")
AGGREGATE_FNS = ("count", "max", "min", "sum")
MAX_PLAN_STEPS = 8
FILTER_CANDIDATE_CAP = 16

# Scoped budgets for per-step evidence retrieval.
RETRIEVE_K = 5
RETRIEVE_CHUNK_BUDGET = 2048
RETRIEVE_NODE_EDGE_BUDGET = 1024

_NUMBER_RE = re.compile(r"(?<![\w.])-?\d+(?:\.\d+)?(?![\w.])")


@dataclass(frozen=True)
class PlanStep:
    step_id: int
    subquery: str
    operator: str
    args: dict
    refs: tuple[int, ...]


@dataclass
class LogicPlan:
    steps: list[PlanStep]
    max_steps: int = MAX_PLAN_STEPS


@dataclass
class HistoryEntry:
    subquery: str
    operator: str
    answer: str
    supporting_ids: list[str]


@dataclass
class History:
    entries: list[HistoryEntry] = field(default_factory=list)
    total_tokens: int = 0
    failed: bool = False
    failure: str = ""


def render_history(history: History) -> str:
    """Deterministic "Q1/A1" serialization used by verify and generate."""
    blocks = []
    for i, entry in enumerate(history.entries, start=1):
        blocks.append(f"Q{i}: {entry.subquery}\nA{i}: {entry.answer}")
    text = "\n".join(blocks)
    history.total_tokens = count_tokens(text)
    return text


def _validate_step(raw: dict, seen_ids: set[int]) -> PlanStep:
    try:
        step_id = int(raw["id"])
        subquery = str(raw["subquery"])
        operator = str(raw["operator"])
        args = dict(raw.get("args") or {})
        refs = tuple(int(r) for r in raw.get("refs") or [])
    except (KeyError, TypeError, ValueError) as exc:
        raise DecompositionFailed(f"malformed step object: {exc}") from exc
    if operator not in OPERATORS:
        raise DecompositionFailed(f"unknown operator {operator!r}")
    if step_id in seen_ids or step_id <= 0:
        raise DecompositionFailed(f"bad step id {step_id}")

    def require_ref(value, name: str) -> int:
        try:
            ref = int(value)
        except (TypeError, ValueError) as exc:
            raise DecompositionFailed(f"{operator} arg {name!r} must be a step id") from exc
        if ref not in seen_ids:
            raise DecompositionFailed(f"{operator} references step {ref} which is not an earlier step")
        return ref

    implied: list[int] = []
    if operator == "Retrieve":
        if not str(args.get("query", "")).strip():
            raise DecompositionFailed("Retrieve requires a query argument")
    elif operator == "Filter":
        implied.append(require_ref(args.get("source"), "source"))
        if not str(args.get("condition", "")).strip():
            raise DecompositionFailed("Filter requires a condition")
    elif operator == "Aggregate":
        implied.append(require_ref(args.get("source"), "source"))
        if args.get("fn") not in AGGREGATE_FNS:
            raise DecompositionFailed(f"Aggregate fn must be one of {AGGREGATE_FNS}")
    elif operator == "Math":
        expr = str(args.get("expr", ""))
        if not expr.strip():
            raise DecompositionFailed("Math requires an expr argument")
        for m in re.finditer(r"\bs(?:tep)?(\d+)\b", expr):
            implied.append(require_ref(int(m.group(1)), "expr"))
    elif operator == "Compare":
        implied.append(require_ref(args.get("left"), "left"))
        implied.append(require_ref(args.get("right"), "right"))
    elif operator == "Answer":
        for r in args.get("refs") or []:
            implied.append(require_ref(r, "refs"))

    for r in refs:
        if r not in seen_ids:
            raise DecompositionFailed(f"step {step_id} forward-references step {r}")
    all_refs = tuple(dict.fromkeys(list(refs) + implied))
    return PlanStep(step_id=step_id, subquery=subquery, operator=operator, args=args, refs=all_refs)


def parse_plan(completion: str, max_steps: int = MAX_PLAN_STEPS) -> LogicPlan:
    """Parse a fenced plan array; every violation raises DecompositionFailed."""
    lines = completion.splitlines()
    try:
        begin = next(i for i, l in enumerate(lines) if l.strip() == prompts.PLAN_BEGIN)
        end = next(i for i, l in enumerate(lines) if l.strip() == prompts.PLAN_END and i > begin)
    except StopIteration:
        raise DecompositionFailed("no plan fence found in completion")
    body = "\n".join(lines[begin + 1 : end])
    try:
        raw_steps = json.loads(body)
    except ValueError as exc:
        raise DecompositionFailed(f"plan body is not valid JSON: {exc}") from exc
    if not isinstance(raw_steps, list) or not raw_steps:
        raise DecompositionFailed("plan must be a non-empty JSON array")
    if len(raw_steps) > max_steps:
        raise DecompositionFailed(f"plan has {len(raw_steps)} steps, max is {max_steps}")

    steps: list[PlanStep] = []
    seen: set[int] = set()
    for raw in raw_steps:
        if not isinstance(raw, dict):
            raise DecompositionFailed("each plan step must be an object")
        step = _validate_step(raw, seen)
        seen.add(step.step_id)
        steps.append(step)
    if steps[-1].operator != "Answer":
        raise DecompositionFailed("final step must be Answer")
    return LogicPlan(steps=steps, max_steps=max_steps)


def decompose_to_plan(query: str, gateway: LLMGateway, max_steps: int = MAX_PLAN_STEPS) -> LogicPlan:
    if not query:
        raise ValueError("query must be non-empty")
    completion = gateway.chat(
        ChatRequest(messages=prompts.plan_messages(query, max_steps), max_output_tokens=1024),
        purpose="plan",
    )
    return parse_plan(completion, max_steps)


@dataclass
class _StepResult:
    answer: str
    elements: list[str] = field(default_factory=list)  # rendered element lines
    element_ids: list[str] = field(default_factory=list)
    # content-only views (descriptions, chunk text) used for numeric parsing,
    # so metadata like weights and scores never masquerades as evidence
    element_contents: list[str] = field(default_factory=list)
    content: str = ""
    value: Fraction | None = None  # exact numeric result, when the op has one


def format_number(value: Fraction) -> str:
    """Exact decimal rendering when terminating, fraction form otherwise."""
    if value.denominator == 1:
        return str(value.numerator)
    den = value.denominator
    for p in (2, 5):
        while den % p == 0:
            den //= p
    if den != 1:
        return f"{value.numerator}/{value.denominator}"
    scale = 0
    num = value
    while num.denominator != 1:
        num *= 10
        scale += 1
    digits = str(abs(num.numerator)).rjust(scale + 1, "0")
    sign = "-" if value < 0 else ""
    return f"{sign}{digits[:-scale]}.{digits[-scale:]}"


def _numbers_in(text: str) -> list[Fraction]:
    return [Fraction(m.group()) for m in _NUMBER_RE.finditer(text)]


def _step_number(result: _StepResult, step_id: int) -> Fraction:
    if result.value is not None:
        return result.value
    numbers = _numbers_in(result.content or result.answer)
    if not numbers:
        raise StepExecutionFailed(step_id, "referenced step produced no parseable number")
    return numbers[0]


_MATH_TOKEN_RE = re.compile(r"\s*(s(?:tep)?\d+|\d+(?:\.\d+)?|[()+\-*/])")


def _eval_math(expr: str, step_id: int, results: dict[int, _StepResult]) -> Fraction:
    normalized = (
        expr.replace("−", "-").replace("×", "*").replace("÷", "/")
    )
    pos = 0
    tokens: list[str] = []
    while pos < len(normalized):
        m = _MATH_TOKEN_RE.match(normalized, pos)
        if not m:
            if normalized[pos:].strip():
                raise StepExecutionFailed(step_id, f"bad math token near {normalized[pos:pos+10]!r}")
            break
        tokens.append(m.group(1))
        pos = m.end()

    def parse_expr(i: int) -> tuple[Fraction, int]:
        value, i = parse_term(i)
        while i < len(tokens) and tokens[i] in "+-":
            op = tokens[i]
            rhs, i = parse_term(i + 1)
            value = value + rhs if op == "+" else value - rhs
        return value, i

    def parse_term(i: int) -> tuple[Fraction, int]:
        value, i = parse_atom(i)
        while i < len(tokens) and tokens[i] in "*/":
            op = tokens[i]
            rhs, i = parse_atom(i + 1)
            if op == "/" and rhs == 0:
                raise StepExecutionFailed(step_id, "division by zero")
            value = value * rhs if op == "*" else value / rhs
        return value, i

    def parse_atom(i: int) -> tuple[Fraction, int]:
        if i >= len(tokens):
            raise StepExecutionFailed(step_id, "unexpected end of expression")
        tok = tokens[i]
        if tok == "(":
            value, i = parse_expr(i + 1)
            if i >= len(tokens) or tokens[i] != ")":
                raise StepExecutionFailed(step_id, "unbalanced parentheses")
            return value, i + 1
        if tok == "-":
            value, i = parse_atom(i + 1)
            return -value, i
        if tok[0] == "s":
            ref = int(re.sub(r"\D", "", tok))
            if ref not in results:
                raise StepExecutionFailed(step_id, f"expression references unknown step {ref}")
            return _step_number(results[ref], step_id), i + 1
        return Fraction(tok), i + 1

    if not tokens:
        raise StepExecutionFailed(step_id, "empty expression")
    value, end = parse_expr(0)
    if end != len(tokens):
        raise StepExecutionFailed(step_id, f"trailing tokens in expression: {tokens[end:]}")
    return value


def execute_plan(
    plan: LogicPlan,
    store: GraphStore,
    gateway: LLMGateway,
    retrieve_k: int = RETRIEVE_K,
    matching: str = "fuzzy",
) -> History:
    """Run the plan sequentially, building the Q/A history.

    A failing step halts execution; the partial history comes back flagged
    failed so the orchestrator can fall back to dual-level retrieval.
    """
    history = History()
    results: dict[int, _StepResult] = {}

    for step in plan.steps:
        try:
            result = _execute_step(step, results, store, gateway, retrieve_k, matching)
        except StepExecutionFailed as exc:
            history.failed = True
            history.failure = str(exc)
            logger.info("plan halted: %s", exc)
            break
        results[step.step_id] = result
        history.entries.append(
            HistoryEntry(
                subquery=step.subquery,
                operator=step.operator,
                answer=result.answer,
                supporting_ids=list(result.element_ids),
            )
        )
    render_history(history)
    return history


def _execute_step(
    step: PlanStep,
    results: dict[int, _StepResult],
    store: GraphStore,
    gateway: LLMGateway,
    retrieve_k: int,
    matching: str,
) -> _StepResult:
    def source(ref) -> _StepResult:
        ref = int(ref)
        if ref not in results:
            raise StepExecutionFailed(step.step_id, f"reference to unexecuted step {ref}")
        return results[ref]

    if step.operator == "Retrieve":
        query = str(step.args["query"])
        rep = retrieval.fallback_representation(query)
        rep.low_vectors = gateway.embed(rep.low_level_keywords)
        try:
            bundle = retrieval.retrieve(
                rep,
                store,
                k_low=retrieve_k,
                k_high=retrieve_k,
                matching=matching,
                refine=False,
                node_edge_token_budget=RETRIEVE_NODE_EDGE_BUDGET,
                chunk_token_budget=RETRIEVE_CHUNK_BUDGET,
            )
        except EmptyStore as exc:
            raise StepExecutionFailed(step.step_id, str(exc)) from exc
        lines = bundle.node_section + bundle.edge_section + bundle.chunk_section
        if not lines:
            raise StepExecutionFailed(step.step_id, "retrieval produced no evidence")
        contents, chunk_texts = [], []
        for p in bundle.provenance:
            if p.kind == "node":
                contents.append(store.nodes[p.element_id[2:]].description)
            elif p.kind == "edge":
                src_id, _, dst_id = p.element_id[2:].partition("|")
                contents.append(store.edges[(src_id, dst_id)].description)
            else:
                chunk_texts.append(store.chunks[p.element_id[2:]].text)
        return _StepResult(
            answer="\n".join(lines),
            elements=bundle.node_section + bundle.edge_section,
            element_ids=[p.element_id for p in bundle.provenance],
            element_contents=contents,
            content="\n".join(contents + chunk_texts),
        )

    if step.operator == "Filter":
        src = source(step.args["source"])
        condition = str(step.args["condition"])
        kept, kept_ids, kept_contents = [], [], []
        for i, line in enumerate(src.elements[:FILTER_CANDIDATE_CAP]):
            verdict = gateway.judge(prompts.filter_judge_prompt(condition, line), purpose="filter")
            if verdict.verdict == "yes":
                kept.append(line)
                if i < len(src.element_ids):
                    kept_ids.append(src.element_ids[i])
                if i < len(src.element_contents):
                    kept_contents.append(src.element_contents[i])
        answer = "\n".join(kept) if kept else "(no elements matched the condition)"
        return _StepResult(
            answer=answer,
            elements=kept,
            element_ids=kept_ids,
            element_contents=kept_contents,
            content="\n".join(kept_contents),
        )

    if step.operator == "Aggregate":
        src = source(step.args["source"])
        fn = step.args["fn"]
        if fn == "count":
            value = Fraction(
                len(src.elements) if src.elements else len(_numbers_in(src.content or src.answer))
            )
        else:
            pool: list[Fraction] = []
            for text in src.element_contents or [src.content or src.answer]:
                pool.extend(_numbers_in(text))
            if not pool:
                raise StepExecutionFailed(step.step_id, "no numeric values to aggregate")
            value = {"max": max, "min": min, "sum": sum}[fn](pool)
        return _StepResult(answer=format_number(value), value=value, element_ids=list(src.element_ids))

    if step.operator == "Math":
        value = _eval_math(str(step.args["expr"]), step.step_id, results)
        return _StepResult(answer=format_number(value), value=value)

    if step.operator == "Compare":
        left = source(step.args["left"])
        right = source(step.args["right"])
        lv = _step_number(left, step.step_id)
        rv = _step_number(right, step.step_id)
        rel = "=" if lv == rv else (">" if lv > rv else "<")
        answer = f"{format_number(lv)} {rel} {format_number(rv)}"
        return _StepResult(answer=answer, value=None)

    if step.operator == "Answer":
        refs = [int(r) for r in (step.args.get("refs") or step.refs or sorted(results))]
        parts, ids = [], []
        for ref in refs:
            src = source(ref)
            # compact digest: evidence steps already appear in full earlier in
            # the history, so only their leading line is repeated here
            parts.append(src.answer.split("\n", 1)[0])
            ids.extend(src.element_ids)
        return _StepResult(answer="; ".join(parts), element_ids=list(dict.fromkeys(ids)))

    raise StepExecutionFailed(step.step_id, f"unhandled operator {step.operator}")
