"""Evaluation harness and scoring.

Datasets are JSON lines {question, kind, gold, options?}. Scoring is a pure
function per kind: option-label accuracy for multiple choice, token-level F1
for short answers, ROUGE-L F1 for generation. All token math uses the engine
token rule, casefolded.
"""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .config import EngineConfig, config_snapshot
from .errors import KgragError, MissingOptions
from .tokens import _TOKEN_RE  # scoring shares the exact engine tokenization

KINDS = ("multiple_choice", "short_answer", "generation")


@dataclass
class EvalRecord:
    question: str
    kind: str
    gold: str
    options: list[str] | None = None
    predicted: str = ""
    score: float = 0.0
    final_path: str = ""
    error: str = ""


def _tokens(text: str) -> list[str]:
    return [t.casefold() for t in _TOKEN_RE.findall(text)]


def option_labels(options: list[str]) -> list[str]:
    """Label for option i: its leading letter when shaped like "B) ...",
    otherwise the positional letter A, B, C, ..."""
    labels = []
    for i, option in enumerate(options):
        match = re.match(r"^\s*([A-Za-z])\s*[).:]", option)
        if match:
            labels.append(match.group(1).upper())
        elif len(option.strip()) == 1 and option.strip().isalpha():
            labels.append(option.strip().upper())
        else:
            labels.append(string.ascii_uppercase[i])
    return labels


def extract_choice(prediction: str, labels: list[str]) -> str | None:
    """First standalone option letter appearing in the prediction."""
    wanted = {l.upper() for l in labels}
    for match in re.finditer(r"(?<![A-Za-z0-9])([A-Za-z])(?![A-Za-z0-9])", prediction):
        letter = match.group(1).upper()
        if letter in wanted:
            return letter
    return None


def token_f1(gold: str, predicted: str) -> float:
    gold_tokens = Counter(_tokens(gold))
    pred_tokens = Counter(_tokens(predicted))
    overlap = sum((gold_tokens & pred_tokens).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(pred_tokens.values())
    recall = overlap / sum(gold_tokens.values())
    return 2 * precision * recall / (precision + recall)


def rouge_l_f1(gold: str, predicted: str) -> float:
    """ROUGE-L F1 via longest common subsequence over engine tokens."""
    g = _tokens(gold)
    p = _tokens(predicted)
    if not g or not p:
        return 0.0
    dp = [[0] * (len(p) + 1) for _ in range(len(g) + 1)]
    for i in range(1, len(g) + 1):
        for j in range(1, len(p) + 1):
            if g[i - 1] == p[j - 1]:
                dp[i][j] = dp[i - 1][j - 1] + 1
            else:
                dp[i][j] = max(dp[i - 1][j], dp[i][j - 1])
    lcs = dp[len(g)][len(p)]
    if lcs == 0:
        return 0.0
    precision = lcs / len(p)
    recall = lcs / len(g)
    return 2 * precision * recall / (precision + recall)


def score(kind: str, gold: str, predicted: str, options: list[str] | None = None) -> float:
    """Score one prediction in [0, 1]."""
    if kind == "multiple_choice":
        if not options:
            raise MissingOptions("multiple_choice records require options")
        labels = option_labels(options)
        choice = extract_choice(predicted, labels)
        return 1.0 if choice is not None and choice == gold.strip().upper() else 0.0
    if kind == "short_answer":
        return token_f1(gold, predicted)
    if kind == "generation":
        return rouge_l_f1(gold, predicted)
    raise ValueError(f"unknown record kind {kind!r}")


def load_dataset(path: str | Path) -> list[EvalRecord]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        data = json.loads(line)
        kind = data["kind"]
        if kind not in KINDS:
            raise ValueError(f"unknown record kind {kind!r}")
        records.append(
            EvalRecord(
                question=data["question"],
                kind=kind,
                gold=str(data["gold"]),
                options=data.get("options"),
            )
        )
    return records


@dataclass
class EvalReport:
    config: dict
    records: list[EvalRecord] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "records": [
                {
                    "question": r.question,
                    "kind": r.kind,
                    "gold": r.gold,
                    "options": r.options,
                    "predicted": r.predicted,
                    "score": r.score,
                    "final_path": r.final_path,
                    "error": r.error,
                }
                for r in self.records
            ],
            "aggregates": self.aggregates,
        }


def run_eval(
    orchestrator,
    records: list[EvalRecord],
    mode: str | None = None,
    parallel: int = 1,
) -> EvalReport:
    """Answer every record through the pipeline and score it.

    Questions may run concurrently; the report stays ordered by input index.
    """
    cfg: EngineConfig = orchestrator.config

    def run_one(record: EvalRecord) -> EvalRecord:
        try:
            answer, trace = orchestrator.answer(record.question, mode=mode)
            record.predicted = answer
            record.final_path = trace.final_path
            record.score = score(record.kind, record.gold, record.predicted, record.options)
        except KgragError as exc:
            record.error = str(exc)
            record.score = 0.0
        return record

    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            records = list(pool.map(run_one, records))
    else:
        records = [run_one(r) for r in records]

    aggregates: dict = {"count": len(records)}
    for kind in KINDS:
        kind_scores = [r.score for r in records if r.kind == kind]
        if kind_scores:
            key = {"multiple_choice": "accuracy", "short_answer": "f1", "generation": "rouge_l"}[kind]
            aggregates[key] = sum(kind_scores) / len(kind_scores)
    if records:
        aggregates["mean_score"] = sum(r.score for r in records) / len(records)
    return EvalReport(config=config_snapshot(cfg), records=records, aggregates=aggregates)
