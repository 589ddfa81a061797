import pytest

from kgrag import prompts
from kgrag.extraction import (
    ExtractionRecord,
    loop_ner,
    merge_into_graph,
    ner_init,
    parse_records,
)
from kgrag.store import GraphStore

from conftest import FixtureSet, make_chunk

MARIE_TEXT = "Marie Curie discovered radium in 1898."
MARIE_COMPLETION = (
    '("entity"|Marie Curie|person|Marie Curie was a physicist and chemist)\n'
    '("entity"|radium|other|A radioactive element)\n'
    '("relation"|Marie Curie|discovered|radium|Marie Curie discovered radium in 1898'
    "|scientist, discovery|4.5)"
)


def judge_prompt(chunk_text, lines):
    return prompts.ner_judge_messages(chunk_text, lines)


class TestParser:
    def test_paper_example(self):
        result = parse_records(MARIE_COMPLETION, "c1")
        assert len(result.records) == 1
        rec = result.records[0]
        assert (rec.subject, rec.relation, rec.object) == ("Marie Curie", "discovered", "radium")
        assert rec.keywords == ("scientist", "discovery")
        assert rec.description == "Marie Curie discovered radium in 1898"
        assert rec.weight == 4.5
        assert len(result.entities) == 2

    def test_malformed_line_dropped_and_counted(self):
        completion = (
            '("relation"|A|likes|B|desc|kw|2.0)\n'
            '("relation"|A|B|missing slots)\n'
        )
        result = parse_records(completion, "c1")
        assert len(result.records) == 1
        assert result.parse_failures == 1

    def test_prose_lines_ignored(self):
        completion = "Here are the records you asked for:\n" + MARIE_COMPLETION + "\nThat is all."
        result = parse_records(completion, "c1")
        assert len(result.records) == 1
        assert result.parse_failures == 0

    def test_fully_unparseable_counts_once(self):
        result = parse_records("I cannot find anything here.", "c1")
        assert result.records == []
        assert result.parse_failures == 1

    def test_weight_clamped(self):
        completion = '("relation"|A|r|B|d|k|25)\n("relation"|B|r|C|d|k|-3)'
        result = parse_records(completion, "c1")
        assert [r.weight for r in result.records] == [10.0, 0.0]

    def test_bad_weight_is_failure(self):
        result = parse_records('("relation"|A|r|B|d|k|heavy)', "c1")
        assert result.records == []
        assert result.parse_failures == 1

    def test_unknown_type_coerced(self):
        result = parse_records('("entity"|X|galaxy|far away)', "c1")
        assert result.entities["x"].entity_type == prompts.FALLBACK_ENTITY_TYPE

    def test_empty_subject_rejected(self):
        result = parse_records('("relation"| |r|B|d|k|1)', "c1")
        assert result.records == []
        assert result.parse_failures == 1


class TestNerInit:
    def test_paper_example_through_gateway(self, fixtures):
        chunk = make_chunk(MARIE_TEXT)
        fixtures.add(prompts.ner_init_messages(chunk.text, prompts.DEFAULT_ENTITY_TYPES), MARIE_COMPLETION)
        gw = fixtures.gateway()
        result = ner_init(chunk, gw)
        assert len(result.records) == 1
        assert result.records[0].subject == "Marie Curie"

    def test_empty_extraction(self, fixtures):
        chunk = make_chunk(".....")
        fixtures.add(prompts.ner_init_messages(chunk.text, prompts.DEFAULT_ENTITY_TYPES), "")
        gw = fixtures.gateway()
        result = ner_init(chunk, gw)
        assert result.records == []


def run_loop(strategy: str, judge_answers: list[str], max_rounds: int, fixtures: FixtureSet):
    """Drive loop_ner with rule-based fixtures; returns (history, call log)."""
    chunk = make_chunk(MARIE_TEXT)
    fixtures.add(prompts.ner_init_messages(chunk.text, prompts.DEFAULT_ENTITY_TYPES), MARIE_COMPLETION)
    answers = iter(judge_answers)
    fixtures.add_rule(
        lambda msgs: "remain to be extracted" in msgs[-1]["content"],
        lambda msgs: next(answers),
    )
    round_counter = iter(range(1, 100))
    fixtures.add_rule(
        lambda msgs: "Add the ones that are still missing" in msgs[-1]["content"],
        lambda msgs: f'("relation"|Marie Curie|round{next(round_counter)}|polonium|Also discovered polonium|discovery|3.0)',
    )
    gw = fixtures.gateway()
    history = loop_ner(chunk, gw, strategy=strategy, max_rounds=max_rounds)
    calls = [(r.purpose) for r in gw.call_log.entries() if r.kind == "chat"]
    return history, calls


class TestLoopNer:
    def test_trial_judge_no_immediately(self, fixtures):
        history, calls = run_loop("trial", ["no"], max_rounds=3, fixtures=fixtures)
        assert history.rounds_used == 0
        assert history.terminated_by == "judge_no"
        assert len(history.records) == 1  # init output only
        assert calls == ["ner", "ner_judge"]

    def test_base_extracts_before_judging(self, fixtures):
        history, calls = run_loop("base", ["no"], max_rounds=3, fixtures=fixtures)
        assert history.rounds_used == 1
        assert history.terminated_by == "judge_no"
        assert calls == ["ner", "ner", "ner_judge"]

    @pytest.mark.parametrize("strategy", ["trial", "base"])
    def test_max_rounds_cap(self, strategy, fixtures):
        history, calls = run_loop(strategy, ["yes"] * 10, max_rounds=3, fixtures=fixtures)
        assert history.rounds_used == 3
        assert history.terminated_by == "max_rounds"
        if strategy == "trial":
            assert calls == ["ner", "ner_judge", "ner", "ner_judge", "ner", "ner_judge", "ner"]
        else:
            assert calls == ["ner", "ner", "ner_judge", "ner", "ner_judge", "ner", "ner_judge"]

    @pytest.mark.parametrize("strategy", ["trial", "base"])
    def test_zero_rounds(self, strategy, fixtures):
        history, calls = run_loop(strategy, [], max_rounds=0, fixtures=fixtures)
        assert history.rounds_used == 0
        assert history.terminated_by == "max_rounds"
        assert calls == ["ner"]

    def test_duplicates_suppressed(self, fixtures):
        chunk = make_chunk(MARIE_TEXT)
        fixtures.add(prompts.ner_init_messages(chunk.text, prompts.DEFAULT_ENTITY_TYPES), MARIE_COMPLETION)
        fixtures.add_rule(
            lambda msgs: "remain to be extracted" in msgs[-1]["content"], "yes"
        )
        fixtures.add_rule(
            lambda msgs: "Add the ones that are still missing" in msgs[-1]["content"],
            MARIE_COMPLETION,  # repeats the same record every round
        )
        gw = fixtures.gateway()
        history = loop_ner(chunk, gw, strategy="base", max_rounds=2)
        assert len(history.records) == 1

    def test_provider_error_flags_incomplete(self, fixtures):
        chunk = make_chunk(MARIE_TEXT)
        fixtures.add(prompts.ner_init_messages(chunk.text, prompts.DEFAULT_ENTITY_TYPES), MARIE_COMPLETION)
        # no judge/continue fixtures: the first loop call misses
        gw = fixtures.gateway()
        history = loop_ner(chunk, gw, strategy="base", max_rounds=2)
        assert history.incomplete
        assert len(history.records) == 1  # init records preserved

    def test_types_enriched_from_entity_lines(self, fixtures):
        chunk = make_chunk(MARIE_TEXT)
        fixtures.add(prompts.ner_init_messages(chunk.text, prompts.DEFAULT_ENTITY_TYPES), MARIE_COMPLETION)
        gw = fixtures.gateway()
        history = loop_ner(chunk, gw, strategy="base", max_rounds=0)
        rec = history.records[0]
        assert rec.entity_types == ("person", "other")
        assert rec.subject_description == "Marie Curie was a physicist and chemist"


class TestMerge:
    def test_name_normalization_and_edge_merge(self):
        store = GraphStore()
        records = [
            ExtractionRecord("A", "r1", "B", description="A relates first. Shared.", weight=2.0, chunk_id="c1"),
            ExtractionRecord("a ", "r2", "B", description="A relates second. Shared.", weight=3.0, chunk_id="c2"),
        ]
        report = merge_into_graph(records, store)
        assert len(store.nodes) == 2
        assert len(store.edges) == 1
        edge = store.edges[("a", "b")]
        assert edge.weight == 5.0
        assert "A relates first." in edge.description_sentences
        assert "A relates second." in edge.description_sentences
        assert edge.chunk_refs == {"c1", "c2"}
        assert report.nodes_created == 2
        assert report.edges_created == 1
        assert report.edges_merged == 1

    def test_empty_merge_is_identity(self, graph):
        before = graph.stats()
        report = merge_into_graph([], graph)
        assert graph.stats() == before
        assert report.to_json() == {
            "nodes_created": 0, "nodes_merged": 0,
            "edges_created": 0, "edges_merged": 0, "self_loops_dropped": 0,
        }

    def test_idempotent_counts(self):
        store = GraphStore()
        records = [ExtractionRecord("A", "r", "B", description="Fact.", weight=1.0, chunk_id="c1")]
        merge_into_graph(records, store)
        counts = store.stats()
        merge_into_graph(records, store)
        assert store.stats() == counts

    def test_order_independence(self, tmp_path):
        records = [
            ExtractionRecord("A", "r1", "B", ("person", "trait"), ("k1",), "Alpha fact.", 2.0, "c1"),
            ExtractionRecord("B", "r2", "C", ("trait", "time"), ("k2",), "Beta fact.", 3.0, "c2"),
            ExtractionRecord("a", "r3", "b", ("person", "trait"), ("k3",), "Gamma fact.", 1.0, "c3"),
            ExtractionRecord("C", "r4", "A", ("time", "person"), ("k4",), "Delta fact.", 4.0, "c1"),
        ]
        import itertools

        dumps = set()
        for i, perm in enumerate(itertools.permutations(records)):
            store = GraphStore()
            merge_into_graph(list(perm), store)
            target = tmp_path / f"perm{i}"
            store.dump(target)
            dumps.add((target / "nodes.jsonl").read_bytes() + (target / "edges.jsonl").read_bytes())
        assert len(dumps) == 1

    def test_self_loop_record(self):
        store = GraphStore()
        records = [ExtractionRecord("X", "is", "x", description="Self fact.", weight=1.0, chunk_id="c1")]
        report = merge_into_graph(records, store)
        assert len(store.nodes) == 1
        assert len(store.edges) == 0
        assert report.self_loops_dropped == 1

    def test_erroneous_entity_isolation(self, graph):
        degrees_before = _degrees(graph)
        records = [ExtractionRecord("hallucinated x", "rel", "hallucinated y",
                                    description="Noise.", weight=1.0, chunk_id="d0:c1")]
        merge_into_graph(records, graph)
        for node_id, degree in degrees_before.items():
            assert _degrees(graph)[node_id] == degree
        component = {"hallucinated x", "hallucinated y"}
        touching = [e for e in graph.edges.values()
                    if e.src in component or e.dst in component]
        assert all(e.src in component and e.dst in component for e in touching)
        assert len(component) <= 2

    def test_monotone_growth(self):
        store = GraphStore()
        batches = [
            [ExtractionRecord("A", "r", "B", description="F1.", weight=1.0, chunk_id="c1")],
            [ExtractionRecord("B", "r", "C", description="F2.", weight=1.0, chunk_id="c2")],
            [ExtractionRecord("A", "r", "B", description="F1.", weight=1.0, chunk_id="c1")],
        ]
        last = (0, 0)
        for batch in batches:
            merge_into_graph(batch, store)
            now = (len(store.nodes), len(store.edges))
            assert now >= last
            last = now


def _degrees(store: GraphStore) -> dict[str, int]:
    degrees = {node_id: 0 for node_id in store.nodes}
    for edge in store.edges.values():
        degrees[edge.src] += 1
        degrees[edge.dst] += 1
    return degrees
