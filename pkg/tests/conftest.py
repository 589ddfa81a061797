"""Shared test fixtures: scripted providers and a small seeded graph."""

from __future__ import annotations

import json

import pytest

from kgrag.config import EngineConfig
from kgrag.gateway import (
    LLMGateway,
    ProviderConfig,
    ScriptedProvider,
    request_digest,
)
from kgrag.ingestion import Chunk
from kgrag.store import GraphStore


def provider_config(**overrides) -> ProviderConfig:
    defaults = dict(endpoint_url="scripted:", model_name="scripted", max_context_tokens=32768)
    defaults.update(overrides)
    return ProviderConfig(**defaults)


class FixtureSet:
    """Accumulates digest fixtures; builds providers and fixture files."""

    def __init__(self):
        self.entries: dict[str, dict] = {}
        self.embeddings: dict[str, list[float]] = {}
        self.rules: list = []

    def add(self, messages, completion: str, fragments: list[str] | None = None):
        entry = {"completion": completion}
        if fragments is not None:
            entry["fragments"] = fragments
        self.entries[request_digest(messages)] = entry
        return self

    def add_rule(self, predicate, completion):
        self.rules.append((predicate, completion))
        return self

    def add_embedding(self, text: str, vector):
        from kgrag.gateway import embed_digest

        self.embeddings[embed_digest(text)] = [float(x) for x in vector]
        return self

    def provider(self, dimension: int = 64) -> ScriptedProvider:
        return ScriptedProvider(
            fixtures=self.entries,
            rules=self.rules,
            embeddings=self.embeddings,
            dimension=dimension,
        )

    def gateway(self, config: ProviderConfig | None = None, dimension: int = 64) -> LLMGateway:
        cfg = config or provider_config()
        return LLMGateway(cfg, transport=self.provider(dimension=dimension))

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for digest, entry in self.entries.items():
                fh.write(json.dumps({"digest": digest, **entry}, ensure_ascii=False) + "\n")
            for digest, vector in self.embeddings.items():
                fh.write(json.dumps({"digest": digest, "embedding": vector}) + "\n")
        return path


@pytest.fixture
def fixtures() -> FixtureSet:
    return FixtureSet()


@pytest.fixture
def bare_gateway() -> LLMGateway:
    """Gateway with no chat fixtures; embeds fall back to seeded-hash."""
    return LLMGateway(provider_config(), transport=ScriptedProvider())


def make_chunk(text: str, chunk_id: str = "d0:0000", ordinal: int = 0) -> Chunk:
    from kgrag.tokens import count_tokens

    suffix = chunk_id.split(":")[-1]
    return Chunk(
        chunk_id=chunk_id,
        doc_id=chunk_id.split(":")[0],
        ordinal=int(suffix) if suffix.isdigit() else ordinal,
        text=text,
        token_count=count_tokens(text),
        char_span=(0, len(text)),
    )


def seeded_store(gateway: LLMGateway, granularity: str = "per_entity") -> GraphStore:
    """Small deterministic graph: rice varieties with heights and parents."""
    store = GraphStore(granularity=granularity)
    chunks = {
        "c1": "Zhefu 802 was bred from Simei 2 by gamma-ray mutagenesis.",
        "c2": "Zhefu 802 plant height is 85 cm. Simei 2 plant height is 105 cm.",
        "c3": "Zhefu 802 was widely planted in Zhejiang during the 1980s.",
    }
    for cid, text in chunks.items():
        store.add_chunk(make_chunk(text, chunk_id=f"d0:{cid}"))
    nodes = [
        ("Zhefu 802", "organism/variety", "A semi-dwarf indica rice variety. Plant height is 85 cm.", ["rice"], 6.0, {"d0:c1", "d0:c2", "d0:c3"}),
        ("Simei 2", "organism/variety", "Parent cultivar of Zhefu 802. Plant height is 105 cm.", ["rice"], 5.0, {"d0:c1", "d0:c2"}),
        ("Zhejiang", "location", "A coastal province of China.", ["province"], 3.0, {"d0:c3"}),
        ("gamma-ray mutagenesis", "method", "A mutation breeding method using radiation.", ["breeding"], 4.0, {"d0:c1"}),
    ]
    for name, etype, desc, kw, weight, refs in nodes:
        store.upsert_node(name, etype, desc, kw, weight, refs)
    edges = [
        ("Zhefu 802", "Simei 2", "Zhefu 802 was derived from Simei 2.", ["parent", "derived from"], 8.0, {"d0:c1"}),
        ("Zhefu 802", "Zhejiang", "Zhefu 802 was planted in Zhejiang.", ["planted in"], 5.0, {"d0:c3"}),
        ("Zhefu 802", "gamma-ray mutagenesis", "Zhefu 802 was created by gamma-ray mutagenesis.", ["bred by"], 4.0, {"d0:c1"}),
    ]
    for src, dst, desc, kw, weight, refs in edges:
        store.upsert_edge(src, dst, desc, kw, weight, refs)
    store.refresh_embeddings(gateway)
    return store


@pytest.fixture
def graph(bare_gateway) -> GraphStore:
    return seeded_store(bare_gateway)


def engine_config(tmp_path, **overrides) -> EngineConfig:
    cfg = EngineConfig(provider=provider_config())
    cfg.store_path = str(tmp_path / "store")
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg
