import json

import pytest

from kgrag import prompts
from kgrag.pipeline import (
    LOW_CONFIDENCE_PREAMBLE,
    REFUSAL_ANSWER,
    Orchestrator,
)

from conftest import FixtureSet, engine_config, seeded_store

VALID_PLAN = (
    f"{prompts.PLAN_BEGIN}\n"
    + json.dumps([
        {"id": 1, "subquery": "about Zhefu 802", "operator": "Retrieve",
         "args": {"query": "Zhefu 802"}, "refs": []},
        {"id": 2, "subquery": "final", "operator": "Answer",
         "args": {"refs": [1]}, "refs": [1]},
    ])
    + f"\n{prompts.PLAN_END}"
)

QUERY = "What is the parent of Zhefu 802?"


def is_intent(msgs):
    return "route questions for a knowledge base" in msgs[0]["content"]


def is_plan(msgs):
    return "ordered plan of retrieval operators" in msgs[0]["content"]


def is_dual_decompose(msgs):
    return "Decompose the user question for knowledge-graph retrieval" in msgs[0]["content"]


def is_logic_verify(msgs):
    return 'Reply "support"' in msgs[-1]["content"] and "Q1:" in msgs[-1]["content"]


def is_dual_verify(msgs):
    return 'Reply "support"' in msgs[-1]["content"] and "-----Entities-----" in msgs[-1]["content"]


def is_generate(msgs):
    return "Answer the question using only the provided context" in msgs[0]["content"]


def pipeline_fixtures(
    *,
    intent_score: float = 0.9,
    decomposition_ok: bool = True,
    logic_supported: bool = True,
    dual_supported: bool = True,
) -> FixtureSet:
    fx = FixtureSet()
    fx.add_rule(is_intent, json.dumps({"score": intent_score, "slots": {"variety": "Zhefu 802"}}))
    fx.add_rule(is_plan, VALID_PLAN if decomposition_ok else "I would rather chat about it.")
    fx.add_rule(is_logic_verify, "support" if logic_supported else "no")
    fx.add_rule(
        is_dual_decompose,
        json.dumps({"low_level_keywords": ["Zhefu 802"], "high_level_keywords": ["parent"]}),
    )
    fx.add_rule(is_dual_verify, "support" if dual_supported else "no")
    fx.add_rule(is_generate, "Simei 2 is the parent of Zhefu 802.")
    return fx


def make_orchestrator(fx: FixtureSet, tmp_path, **config_overrides) -> Orchestrator:
    from kgrag.gateway import LLMGateway, ScriptedProvider

    from conftest import provider_config

    cfg = engine_config(tmp_path, **config_overrides)
    orchestrator = Orchestrator(cfg, gateway=fx.gateway())
    # build the store through a separate gateway so the call log stays clean
    store_gateway = LLMGateway(provider_config(), transport=ScriptedProvider())
    orchestrator.store = seeded_store(store_gateway)
    return orchestrator


class TestIntent:
    def test_in_domain(self, tmp_path):
        orchestrator = make_orchestrator(pipeline_fixtures(intent_score=0.9), tmp_path)
        decision = orchestrator.analyze_intent("Zhefu 802 parentage?")
        assert decision.in_domain and decision.score == 0.9
        assert decision.slots == {"variety": "Zhefu 802"}

    def test_out_of_domain(self, tmp_path):
        orchestrator = make_orchestrator(pipeline_fixtures(intent_score=0.1), tmp_path)
        assert not orchestrator.analyze_intent("best pizza in Rome?").in_domain

    def test_malformed_fails_open(self, tmp_path):
        fx = FixtureSet()
        fx.add_rule(is_intent, "no json here")
        orchestrator = make_orchestrator(fx, tmp_path)
        assert orchestrator.analyze_intent("anything").in_domain


class TestRefusal:
    def test_refused_query_does_nothing_else(self, tmp_path):
        orchestrator = make_orchestrator(pipeline_fixtures(intent_score=0.1), tmp_path)
        answer, trace = orchestrator.answer(QUERY, mode="auto")
        assert answer == REFUSAL_ANSWER
        assert trace.final_path == "refused"
        log = orchestrator.gateway.call_log
        assert log.count(purpose="generate") == 0
        assert log.count(kind="embed") == 0
        assert log.count(kind="chat") == 1  # the intent call only


CASES = [(dec, lv, dv) for dec in (True, False) for lv in (True, False) for dv in (True, False)]


class TestFallbackTable:
    @pytest.mark.parametrize("decomposition_ok,logic_supported,dual_supported", CASES)
    def test_all_eight_cases(self, decomposition_ok, logic_supported, dual_supported, tmp_path):
        fx = pipeline_fixtures(
            decomposition_ok=decomposition_ok,
            logic_supported=logic_supported,
            dual_supported=dual_supported,
        )
        orchestrator = make_orchestrator(fx, tmp_path)
        events = []
        answer, trace = orchestrator.answer(QUERY, mode="auto", sink=events.append)

        assert answer  # fallback totality: always some answer
        assert trace.final_path in ("logic_form", "dual_level", "dual_level_unverified")

        if decomposition_ok and logic_supported:
            assert trace.final_path == "logic_form"
            assert trace.stage_status("logic_form") == "ok"
            assert trace.stage_status("dual_level") == "skipped"
            assert not answer.startswith(LOW_CONFIDENCE_PREAMBLE)
        elif dual_supported:
            assert trace.final_path == "dual_level"
            if not decomposition_ok:
                assert trace.stage_status("logic_form") == "failed"
            assert trace.stage_status("dual_level") == "ok"
            assert not answer.startswith(LOW_CONFIDENCE_PREAMBLE)
        else:
            assert trace.final_path == "dual_level_unverified"
            assert answer.startswith(LOW_CONFIDENCE_PREAMBLE)

        # trace consistency: logic failure implies dual level actually ran
        if trace.stage_status("logic_form") == "failed":
            assert trace.stage_status("dual_level") != "skipped"
        done = [e for e in events if e["event"] == "done"]
        assert len(done) == 1
        assert done[0]["answer"] == answer
        assert done[0]["final_path"] == trace.final_path

    def test_double_failure_preamble_and_trace(self, tmp_path):
        fx = pipeline_fixtures(decomposition_ok=False, dual_supported=False)
        orchestrator = make_orchestrator(fx, tmp_path)
        answer, trace = orchestrator.answer(QUERY, mode="auto")
        assert trace.final_path == "dual_level_unverified"
        assert answer.startswith(LOW_CONFIDENCE_PREAMBLE)
        assert trace.stage_status("logic_form") == "failed"


class TestVerifierCallLaws:
    @pytest.mark.parametrize("decomposition_ok,logic_supported,dual_supported", CASES)
    def test_argument_mode_call_laws(self, decomposition_ok, logic_supported, dual_supported, tmp_path):
        fx = pipeline_fixtures(
            decomposition_ok=decomposition_ok,
            logic_supported=logic_supported,
            dual_supported=dual_supported,
        )
        orchestrator = make_orchestrator(fx, tmp_path, checking_mode="argument")
        orchestrator.answer(QUERY, mode="auto")
        entries = orchestrator.gateway.call_log.entries()
        # argument mode: inside the verify stage, a generation happens only
        # after a supporting verdict (never on unsupported ones)
        verify_generations = [
            e for e in entries if e.stage == "verify" and e.purpose == "generate"
        ]
        supported_verdicts = (1 if (decomposition_ok and logic_supported) else 0) + (
            1 if (not (decomposition_ok and logic_supported) and dual_supported) else 0
        )
        assert len(verify_generations) == supported_verdicts

    @pytest.mark.parametrize("dual_supported", [True, False])
    def test_result_mode_generates_before_judging(self, dual_supported, tmp_path):
        fx = FixtureSet()
        fx.add_rule(is_intent, json.dumps({"score": 0.9, "slots": {}}))
        fx.add_rule(is_plan, "no plan, sorry")
        fx.add_rule(
            is_dual_decompose,
            json.dumps({"low_level_keywords": ["Zhefu 802"], "high_level_keywords": []}),
        )
        fx.add_rule(is_generate, "draft answer here")
        fx.add_rule(
            lambda msgs: "Draft answer" in msgs[-1]["content"],
            "support" if dual_supported else "no",
        )
        orchestrator = make_orchestrator(fx, tmp_path, checking_mode="result")
        answer, trace = orchestrator.answer(QUERY, mode="auto")
        chats = [e.purpose for e in orchestrator.gateway.call_log.entries()
                 if e.kind == "chat" and e.stage == "verify"]
        assert chats == ["generate", "verify"]  # generation strictly precedes judge
        if dual_supported:
            assert answer == "draft answer here"
        else:
            assert answer == LOW_CONFIDENCE_PREAMBLE + "draft answer here"
            # the unverified draft is reused, not regenerated
            assert orchestrator.gateway.call_log.count(purpose="generate") == 1


class TestStreaming:
    def test_first_event_is_stage_before_retrieval(self, tmp_path):
        fx = pipeline_fixtures()
        orchestrator = make_orchestrator(fx, tmp_path)
        events = []
        orchestrator.answer(QUERY, mode="auto", sink=events.append)
        assert events[0]["event"] == "stage"
        assert events[0]["name"] == "intent"

    def test_token_events_concatenate_to_answer(self, tmp_path):
        fx = pipeline_fixtures()
        orchestrator = make_orchestrator(fx, tmp_path)
        events = []
        answer, _ = orchestrator.answer(QUERY, mode="auto", sink=events.append)
        tokens = "".join(e["text"] for e in events if e["event"] == "token")
        assert tokens == answer

    def test_verdict_events_emitted(self, tmp_path):
        fx = pipeline_fixtures(logic_supported=False, dual_supported=True)
        orchestrator = make_orchestrator(fx, tmp_path)
        events = []
        orchestrator.answer(QUERY, mode="auto", sink=events.append)
        verdicts = [e for e in events if e["event"] == "verdict"]
        assert [v["verdict"] for v in verdicts] == ["unsupported", "supported"]


class TestForcedModes:
    def test_dual_mode_skips_logic(self, tmp_path):
        fx = pipeline_fixtures()
        orchestrator = make_orchestrator(fx, tmp_path)
        _, trace = orchestrator.answer(QUERY, mode="dual")
        assert trace.stage_status("logic_form") == "skipped"
        assert trace.stage_status("intent") == "skipped"
        assert trace.final_path == "dual_level"

    def test_logic_mode_never_falls_back(self, tmp_path):
        fx = pipeline_fixtures(logic_supported=False)
        orchestrator = make_orchestrator(fx, tmp_path)
        answer, trace = orchestrator.answer(QUERY, mode="logic")
        assert trace.stage_status("dual_level") == "skipped"
        assert trace.final_path == "logic_form"
        assert answer.startswith(LOW_CONFIDENCE_PREAMBLE)


class TestTraceFaithfulness:
    def test_token_usage_matches_call_log(self, tmp_path):
        fx = pipeline_fixtures()
        orchestrator = make_orchestrator(fx, tmp_path)
        _, trace = orchestrator.answer(QUERY, mode="auto")
        log_entries = orchestrator.gateway.call_log.entries()
        logged_chat = sum(1 for e in log_entries if e.kind == "chat")
        logged_embed = sum(1 for e in log_entries if e.kind == "embed")
        traced_chat = sum(b.get("chat_calls", 0) for b in trace.token_usage.values())
        traced_embed = sum(b.get("embed_calls", 0) for b in trace.token_usage.values())
        assert traced_chat == logged_chat
        assert traced_embed == logged_embed
        assert sum(b["prompt_tokens"] for b in trace.token_usage.values()) == sum(
            e.prompt_tokens for e in log_entries
        )


# --- ingestion ------------------------------------------------------------------

CORPUS_A = "Alpha farm grows early rice. The farm lies in the river valley."
CORPUS_B = "Beta station breeds hybrid wheat. The station tests drought tolerance."

NER_COMPLETIONS = {
    "Alpha farm": (
        '("entity"|Alpha farm|organization|A farm growing early rice)\n'
        '("entity"|early rice|organism/variety|An early season rice crop)\n'
        '("relation"|Alpha farm|grows|early rice|Alpha farm grows early rice|farming|4.0)\n'
        '("relation"|Alpha farm|lies in|river valley|The farm lies in the river valley|location|2.0)'
    ),
    "Beta station": (
        '("entity"|Beta station|organization|A breeding station for wheat)\n'
        '("relation"|Beta station|breeds|hybrid wheat|Beta station breeds hybrid wheat|breeding|5.0)\n'
        '("relation"|Beta station|tests|drought tolerance|The station tests drought tolerance|trait|3.0)'
    ),
}


def ingest_fixtures() -> FixtureSet:
    fx = FixtureSet()

    def ner_rule(msgs):
        return "Extract all entities and relations" in msgs[-1]["content"]

    def completion(msgs):
        text = msgs[-1]["content"]
        for marker, records in NER_COMPLETIONS.items():
            if marker in text:
                return records
        return ""

    fx.add_rule(ner_rule, completion)
    return fx


def write_corpus(tmp_path):
    a = tmp_path / "a.txt"
    b = tmp_path / "b.txt"
    a.write_text(CORPUS_A)
    b.write_text(CORPUS_B)
    return a, b


def store_bytes(store_dir) -> bytes:
    parts = []
    for name in ("nodes.jsonl", "edges.jsonl", "chunks.jsonl", "vectors.bin",
                 "vectors.keys.jsonl", "manifest.json"):
        parts.append((store_dir / name).read_bytes())
    return b"\n".join(parts)


class TestIngest:
    def _orchestrator(self, tmp_path, store_name):
        cfg = engine_config(tmp_path, ner_max_rounds=0)
        cfg.store_path = str(tmp_path / store_name)
        return Orchestrator(cfg, gateway=ingest_fixtures().gateway())

    def test_order_independent_dumps(self, tmp_path):
        a, b = write_corpus(tmp_path)

        o1 = self._orchestrator(tmp_path, "s_ab")
        o1.ingest([str(a)])
        o1.ingest([str(b)])

        o2 = self._orchestrator(tmp_path, "s_ba")
        o2.ingest([str(b)])
        o2.ingest([str(a)])

        o3 = self._orchestrator(tmp_path, "s_once")
        o3.ingest([str(a), str(b)])

        from pathlib import Path

        ab = store_bytes(Path(o1.config.store_path))
        ba = store_bytes(Path(o2.config.store_path))
        once = store_bytes(Path(o3.config.store_path))
        assert ab == ba == once

    def test_empty_directory(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        orchestrator = self._orchestrator(tmp_path, "s_empty")
        report = orchestrator.ingest([str(empty)])
        assert report.documents == 0
        assert report.merge.nodes_created == 0

    def test_partial_failure_commits_the_rest(self, tmp_path):
        a, b = write_corpus(tmp_path)
        c = tmp_path / "c.txt"
        c.write_text("Gamma plot has no fixture and will miss.")
        orchestrator = self._orchestrator(tmp_path, "s_partial")
        # the rule returns "" for unknown text, which parses to zero records;
        # make it miss instead by raising through a digest-only provider
        fx = FixtureSet()
        fx.add_rule(
            lambda msgs: "Extract all entities and relations" in msgs[-1]["content"]
            and "Gamma" not in msgs[-1]["content"],
            lambda msgs: next(
                records for marker, records in NER_COMPLETIONS.items()
                if marker in msgs[-1]["content"]
            ),
        )
        orchestrator.gateway = Orchestrator(orchestrator.config, gateway=fx.gateway()).gateway
        report = orchestrator.ingest([str(a), str(b), str(c)])
        assert len(report.failed_chunks) == 1
        assert report.merge.nodes_created > 0
        stats = orchestrator.store.stats()
        assert stats["chunks"] == 2  # failed chunk not committed

    def test_incremental_stats_grow(self, tmp_path):
        a, b = write_corpus(tmp_path)
        orchestrator = self._orchestrator(tmp_path, "s_grow")
        orchestrator.ingest([str(a)])
        first = orchestrator.store.stats()
        orchestrator.ingest([str(b)])
        second = orchestrator.store.stats()
        assert second["nodes"] >= first["nodes"]
        assert second["edges"] >= first["edges"]
