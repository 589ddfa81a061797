"""Multi-stage query pipeline and incremental ingestion.

Query flow: intent analysis gates out-of-domain questions; logic form
retrieval runs first and must pass verification; on decomposition failure,
execution failure or an unsupported verdict the pipeline degrades to
dual-level retrieval; if that verification fails too, the answer is still
generated but prefixed with an explicit low-confidence preamble. Every stage
emits a streaming event before answer tokens flow.
"""

from __future__ import annotations

import json
import logging
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

from . import extraction, logic, prompts, retrieval, verify
from .config import EngineConfig
from .errors import (
    DecompositionFailed,
    EmptyStore,
    KgragError,
    StoreNotLoaded,
)
from .gateway import ChatRequest, LLMGateway, build_transport
from .ingestion import expand_paths, load_documents, split
from .store import GraphStore, load as load_store

logger = logging.getLogger(__name__)

REFUSAL_ANSWER = (
    "This question falls outside the knowledge base domain, so it is refused "
    "rather than answered from unrelated sources."
)

LOW_CONFIDENCE_PREAMBLE = (
    "Note: verification could not confirm the retrieved sources, "
    "so this answer may be incomplete.\n\n"
)

Event = dict
Sink = Callable[[Event], None]


@dataclass
class StageRecord:
    name: str  # intent | logic_form | dual_level | verify | generate
    status: str  # ok | failed | skipped
    duration: float = 0.0
    detail: str = ""


@dataclass
class PipelineTrace:
    query_id: str
    stages: list[StageRecord] = field(default_factory=list)
    final_path: str = ""  # refused | logic_form | dual_level | dual_level_unverified
    token_usage: dict[str, dict] = field(default_factory=dict)

    def stage_status(self, name: str) -> str:
        for record in self.stages:
            if record.name == name:
                return record.status
        return "skipped"

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "stages": [
                {"name": s.name, "status": s.status, "duration": s.duration, "detail": s.detail}
                for s in self.stages
            ],
            "final_path": self.final_path,
            "token_usage": self.token_usage,
        }


@dataclass
class IntentDecision:
    in_domain: bool
    score: float
    slots: dict = field(default_factory=dict)


@dataclass
class IngestReport:
    documents: int = 0
    chunks: int = 0
    failed_chunks: list[str] = field(default_factory=list)
    merge: extraction.MergeReport = field(default_factory=extraction.MergeReport)
    embeddings_refreshed: int = 0

    def to_json(self) -> dict:
        return {
            "documents": self.documents,
            "chunks": self.chunks,
            "failed_chunks": self.failed_chunks,
            "merge": self.merge.to_json(),
            "embeddings_refreshed": self.embeddings_refreshed,
        }


class Orchestrator:
    """Owns the store, the gateway and the stage wiring."""

    def __init__(self, config: EngineConfig, gateway: LLMGateway | None = None,
                 store: GraphStore | None = None):
        self.config = config
        self.gateway = gateway or LLMGateway(
            config.provider,
            embed_config=config.embed_provider,
            max_concurrency=config.max_concurrency,
            temperatures=config.temperatures,
        )
        self.store = store

    # -- store lifecycle -------------------------------------------------------

    def load_store(self) -> GraphStore:
        if self.store is None:
            from pathlib import Path

            manifest = Path(self.config.store_path) / "manifest.json"
            if manifest.exists():
                self.store = load_store(self.config.store_path)
            else:
                self.store = GraphStore(granularity=self.config.granularity)
        return self.store

    def _require_store(self) -> GraphStore:
        store = self.load_store()
        if store is None:
            raise StoreNotLoaded("no store loaded")
        return store

    # -- intent ---------------------------------------------------------------

    def analyze_intent(self, query: str) -> IntentDecision:
        """Domain-relevance gate. Parse failures fail open (in-domain)."""
        if not query:
            raise ValueError("query must be non-empty")
        try:
            completion = self.gateway.chat(
                ChatRequest(
                    messages=prompts.intent_messages(query, self.config.domain_description),
                    max_output_tokens=256,
                ),
                purpose="intent",
            )
            start = completion.index("{")
            end = completion.rindex("}") + 1
            data = json.loads(completion[start:end])
            score = float(data["score"])
            slots = dict(data.get("slots") or {})
        except KgragError:
            raise
        except Exception:
            logger.warning("intent parse failed; failing open")
            return IntentDecision(in_domain=True, score=1.0, slots={})
        score = min(max(score, 0.0), 1.0)
        return IntentDecision(
            in_domain=score >= self.config.refusal_threshold, score=score, slots=slots
        )

    # -- query ------------------------------------------------------------------

    def answer(self, query: str, mode: str | None = None, sink: Sink | None = None) -> tuple[str, PipelineTrace]:
        """Answer a query, emitting stage/token/verdict/done events to `sink`."""
        mode = mode or self.config.mode
        if mode not in ("auto", "dual", "logic"):
            raise ValueError(f"unknown mode {mode!r}")
        store = self._require_store().snapshot()
        trace = PipelineTrace(query_id=uuid.uuid4().hex[:12])
        emit = sink or (lambda event: None)
        log_mark = self.gateway.call_log.mark()

        def run_stage(name: str, status: str, detail: str, started: float) -> None:
            record = StageRecord(name, status, time.perf_counter() - started, detail)
            trace.stages.append(record)
            emit({"event": "stage", "name": name, "status": status, "detail": detail})

        def skip_stage(name: str, detail: str = "") -> None:
            trace.stages.append(StageRecord(name, "skipped", 0.0, detail))
            emit({"event": "stage", "name": name, "status": "skipped", "detail": detail})

        answer_text: str
        try:
            answer_text = self._answer_inner(query, mode, store, trace, emit, run_stage, skip_stage)
        except KgragError as exc:
            emit({"event": "error", "message": str(exc)})
            self._collect_usage(trace, log_mark)
            raise
        self._collect_usage(trace, log_mark)
        emit({"event": "done", "final_path": trace.final_path, "answer": answer_text})
        return answer_text, trace

    def _answer_inner(self, query, mode, store, trace, emit, run_stage, skip_stage) -> str:
        gateway = self.gateway
        cfg = self.config

        # Stage: intent (auto mode only; forced ablation modes skip the gate).
        if mode == "auto":
            gateway.set_stage("intent")
            started = time.perf_counter()
            decision = self.analyze_intent(query)
            run_stage("intent", "ok", f"score={decision.score:.2f}", started)
            if not decision.in_domain:
                skip_stage("logic_form")
                skip_stage("dual_level")
                skip_stage("verify")
                skip_stage("generate")
                trace.final_path = "refused"
                return REFUSAL_ANSWER
        else:
            skip_stage("intent", "forced mode")

        logic_context: str | None = None
        if mode in ("auto", "logic"):
            gateway.set_stage("logic_form")
            started = time.perf_counter()
            try:
                plan = logic.decompose_to_plan(query, gateway, max_steps=cfg.max_plan_steps)
                history = logic.execute_plan(
                    plan, store, gateway, matching=cfg.matching_mode
                )
                if history.failed:
                    run_stage("logic_form", "failed", history.failure, started)
                elif not history.entries:
                    run_stage("logic_form", "failed", "empty history", started)
                else:
                    logic_context = logic.render_history(history)
                    run_stage("logic_form", "ok", f"steps={len(history.entries)}", started)
            except DecompositionFailed as exc:
                run_stage("logic_form", "failed", str(exc), started)
        else:
            skip_stage("logic_form", "dual mode forced")

        if logic_context is not None:
            outcome, streamed = self._verified_generation(query, logic_context, emit, trace)
            if outcome.supported:
                skip_stage("dual_level", "logic form verified")
                trace.final_path = "logic_form"
                return self._finish_generation(outcome, streamed, emit, trace, preamble=False)
            if mode == "logic":
                skip_stage("dual_level", "logic mode forced")
                trace.final_path = "logic_form"
                return self._generate_unverified(query, logic_context, emit, trace, outcome)
        elif mode == "logic":
            skip_stage("dual_level", "logic mode forced")
            skip_stage("verify", "nothing to verify")
            trace.final_path = "logic_form"
            return self._generate_unverified(query, "(no evidence retrieved)", emit, trace, None)

        # Stage: dual-level retrieval (fallback or forced).
        gateway.set_stage("dual_level")
        started = time.perf_counter()
        try:
            rep = retrieval.decompose_query(
                query, gateway,
                expansion_cap=cfg.expansion_cap,
                representation_budget=cfg.representation_token_budget,
            )
        except DecompositionFailed:
            rep = retrieval.fallback_representation(query)
            rep = retrieval.embed_representation(rep, gateway)
        try:
            bundle = retrieval.retrieve(
                rep, store,
                k_low=cfg.k_low, k_high=cfg.k_high,
                matching=cfg.matching_mode,
                refine=cfg.refine_enabled,
                refine_max_iters=cfg.refine_max_iters,
                refine_epsilon=cfg.refine_epsilon,
                node_edge_token_budget=cfg.node_edge_token_budget,
                chunk_token_budget=cfg.chunk_token_budget,
            )
        except EmptyStore:
            bundle = None
        if bundle is None or bundle.is_empty():
            run_stage("dual_level", "failed", "no context retrieved", started)
            trace.final_path = "dual_level_unverified"
            return self._generate_unverified(query, "(no evidence retrieved)", emit, trace, None)
        run_stage("dual_level", "ok",
                  f"nodes={len(bundle.node_section)} edges={len(bundle.edge_section)} chunks={len(bundle.chunk_section)}",
                  started)

        context = bundle.render()
        outcome, streamed = self._verified_generation(query, context, emit, trace)
        if outcome.supported:
            trace.final_path = "dual_level"
            return self._finish_generation(outcome, streamed, emit, trace, preamble=False)
        trace.final_path = "dual_level_unverified"
        return self._generate_unverified(query, context, emit, trace, outcome)

    def _verified_generation(self, query, context, emit, trace):
        """Run the configured check; returns (outcome, whether tokens streamed)."""
        gateway = self.gateway
        gateway.set_stage("verify")
        started = time.perf_counter()
        streamed = False
        if self.config.checking_mode == "argument":
            sink = lambda fragment: emit({"event": "token", "text": fragment})
            outcome = verify.argument_check(query, context, gateway, sink=sink)
            streamed = outcome.generation is not None
        else:
            outcome = verify.result_check(query, context, gateway)
        status = "ok" if outcome.supported else "failed"
        trace.stages.append(
            StageRecord("verify", status, time.perf_counter() - started,
                        f"{outcome.mode}:{outcome.verdict}")
        )
        emit({"event": "stage", "name": "verify", "status": status,
              "detail": f"{outcome.mode}:{outcome.verdict}"})
        emit({"event": "verdict", "mode": outcome.mode, "verdict": outcome.verdict})
        return outcome, streamed

    def _finish_generation(self, outcome, streamed, emit, trace, preamble: bool) -> str:
        text = outcome.generation or ""
        if preamble:
            text = LOW_CONFIDENCE_PREAMBLE + text
        if not streamed and text:
            emit({"event": "token", "text": text})
        trace.stages.append(StageRecord("generate", "ok", 0.0, "reused draft" if not streamed else ""))
        emit({"event": "stage", "name": "generate", "status": "ok", "detail": ""})
        return text

    def _generate_unverified(self, query, context, emit, trace, outcome) -> str:
        """Double-failure path: answer anyway, flagged low confidence."""
        gateway = self.gateway
        gateway.set_stage("generate")
        started = time.perf_counter()
        emit({"event": "token", "text": LOW_CONFIDENCE_PREAMBLE})
        if outcome is not None and outcome.generation is not None:
            draft = outcome.generation
            emit({"event": "token", "text": draft})
        else:
            sink = lambda fragment: emit({"event": "token", "text": fragment})
            draft = verify.generate_answer(query, context, gateway, sink=sink)
        trace.stages.append(
            StageRecord("generate", "ok", time.perf_counter() - started, "low confidence")
        )
        emit({"event": "stage", "name": "generate", "status": "ok", "detail": "low confidence"})
        return LOW_CONFIDENCE_PREAMBLE + draft

    def _collect_usage(self, trace: PipelineTrace, mark: int) -> None:
        usage: dict[str, dict] = {}
        for record in self.gateway.call_log.since(mark):
            stage = record.stage or "other"
            bucket = usage.setdefault(
                stage, {"chat_calls": 0, "embed_calls": 0, "prompt_tokens": 0, "completion_tokens": 0}
            )
            bucket[f"{record.kind}_calls"] += 1
            bucket["prompt_tokens"] += record.prompt_tokens
            bucket["completion_tokens"] += record.completion_tokens
        trace.token_usage = usage

    # -- ingestion ---------------------------------------------------------------

    def ingest(self, paths: list[str], sink: Sink | None = None) -> IngestReport:
        """Load, split, extract and merge a corpus batch into the store.

        Chunk extraction runs in parallel; merging is single-writer. Chunks
        whose extraction fails are reported and skipped, everything else
        commits. Safe to call repeatedly: merging is incremental.
        """
        emit = sink or (lambda event: None)
        store = self.load_store()
        cfg = self.config
        report = IngestReport()

        file_paths: list = []
        for target in paths:
            file_paths.extend(expand_paths(target))
        documents = load_documents(file_paths)
        report.documents = len(documents)

        chunks = []
        for doc in documents:
            chunks.extend(split(doc, chunk_size=cfg.chunk_size, overlap=cfg.chunk_overlap))
        report.chunks = len(chunks)
        emit({"event": "ingest", "documents": report.documents, "chunks": report.chunks})

        self.gateway.set_stage("ingest")
        histories: dict[str, extraction.NerHistory] = {}

        def extract(chunk):
            return chunk.chunk_id, extraction.loop_ner(
                chunk, self.gateway,
                strategy=cfg.ner_strategy,
                max_rounds=cfg.ner_max_rounds,
                entity_types=cfg.entity_types,
            )

        with ThreadPoolExecutor(max_workers=max(cfg.ingest_workers, 1)) as pool:
            futures = [pool.submit(extract, chunk) for chunk in chunks]
            for chunk, future in zip(chunks, futures):
                try:
                    chunk_id, history = future.result()
                except KgragError as exc:
                    logger.warning("chunk %s failed: %s", chunk.chunk_id, exc)
                    report.failed_chunks.append(chunk.chunk_id)
                    continue
                if history.incomplete:
                    logger.warning("chunk %s extraction incomplete; not committed", chunk_id)
                    report.failed_chunks.append(chunk_id)
                else:
                    histories[chunk_id] = history

        for chunk in chunks:
            if chunk.chunk_id in histories:
                store.add_chunk(chunk)
        for chunk in chunks:
            history = histories.get(chunk.chunk_id)
            if history is None:
                continue
            report.merge.add(extraction.merge_into_graph(history.records, store))
        report.embeddings_refreshed = store.refresh_embeddings(self.gateway)
        store.dump(cfg.store_path)
        emit({"event": "ingested", "report": report.to_json()})
        return report


def build_orchestrator(config: EngineConfig) -> Orchestrator:
    gateway = LLMGateway(
        config.provider,
        transport=build_transport(config.provider),
        embed_config=config.embed_provider,
        embed_transport=build_transport(config.embed_provider) if config.embed_provider else None,
        max_concurrency=config.max_concurrency,
        temperatures=config.temperatures,
    )
    return Orchestrator(config, gateway=gateway)
