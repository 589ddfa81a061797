"""Dual-level fuzzy retrieval over the knowledge graph.

The query is decomposed into low-level (entity) and high-level (relational)
keywords. Low-level keywords match nodes, high-level keywords match edges;
matches are expanded one hop, merged and deduplicated, optionally refined by
the add/remove coverage loop, and assembled into a token-budgeted context
bundle of node, edge and chunk sections.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import prompts
from .errors import DecompositionFailed, EmptyIndex, EmptyStore
from .gateway import ChatRequest, LLMGateway
from .store import GraphStore, normalize_name
from .tokens import count_tokens

logger = logging.getLogger(__name__)

NODE_EDGE_TOKEN_BUDGET = 8192
CHUNK_TOKEN_BUDGET = 12288
REPRESENTATION_TOKEN_BUDGET = 28672

ENTITY_HEADER = "-----Entities-----"
RELATION_HEADER = "-----Relationships-----"
SOURCE_HEADER = "-----Sources-----"


@dataclass
class QueryRepresentation:
    original_query: str
    low_level_keywords: list[str]
    high_level_keywords: list[str]
    low_vectors: list[np.ndarray] = field(default_factory=list)
    high_vectors: list[np.ndarray] = field(default_factory=list)
    representation_token_budget: int = REPRESENTATION_TOKEN_BUDGET

    def all_vectors(self) -> list[np.ndarray]:
        return list(self.low_vectors) + list(self.high_vectors)

    def serialized_tokens(self) -> int:
        payload = json.dumps(
            {"low": self.low_level_keywords, "high": self.high_level_keywords, "q": self.original_query},
            ensure_ascii=False,
        )
        return count_tokens(payload)


@dataclass(frozen=True)
class Provenance:
    kind: str  # "node" | "edge" | "chunk"
    element_id: str
    score: float
    matched_keyword: str


@dataclass
class ContextBundle:
    node_section: list[str]
    edge_section: list[str]
    chunk_section: list[str]
    provenance: list[Provenance]
    node_edge_token_budget: int = NODE_EDGE_TOKEN_BUDGET
    chunk_token_budget: int = CHUNK_TOKEN_BUDGET

    def is_empty(self) -> bool:
        return not (self.node_section or self.edge_section or self.chunk_section)

    def section_tokens(self) -> tuple[int, int]:
        node_edge = sum(count_tokens(line) for line in self.node_section + self.edge_section)
        chunk = sum(count_tokens(line) for line in self.chunk_section)
        return node_edge, chunk

    def render(self) -> str:
        parts = [ENTITY_HEADER, *self.node_section, RELATION_HEADER, *self.edge_section,
                 SOURCE_HEADER, *self.chunk_section]
        return "\n".join(parts)


@dataclass
class RetrievalSet:
    elements: set[str]
    dist_value: float
    transcript: list[tuple[str, str, float]] = field(default_factory=list)  # (added, removed, dist)


def expand_keyword(keyword: str, cap: int = 8) -> list[str]:
    """Deterministic morphological/alias variants of a low-level keyword."""
    seed = keyword.strip()
    candidates = [
        seed.casefold(),
        seed.replace("-", " "),
        seed.replace("_", " "),
        seed.replace(" ", ""),
        seed.casefold().replace(" ", ""),
        seed[:-1] if seed.lower().endswith("s") and len(seed) > 3 else seed,
        seed + "s" if not seed.lower().endswith("s") and not any(c.isdigit() for c in seed) else seed,
        seed.title(),
    ]
    variants: list[str] = []
    for cand in candidates:
        cand = cand.strip()
        if cand and cand != seed and cand not in variants:
            variants.append(cand)
    return variants[:cap]


def fallback_representation(query: str) -> QueryRepresentation:
    """Used when LLM decomposition fails: the raw query is the one keyword."""
    return QueryRepresentation(
        original_query=query, low_level_keywords=[query], high_level_keywords=[]
    )


def decompose_query(
    query: str,
    gateway: LLMGateway,
    expansion_cap: int = 8,
    representation_budget: int = REPRESENTATION_TOKEN_BUDGET,
) -> QueryRepresentation:
    """LLM keyword decomposition plus deterministic low-level expansion.

    Raises DecompositionFailed on unparseable output; callers degrade to
    `fallback_representation`.
    """
    if not query:
        raise ValueError("query must be non-empty")
    completion = gateway.chat(
        ChatRequest(messages=prompts.decompose_query_messages(query), max_output_tokens=512),
        purpose="decompose",
    )
    try:
        start = completion.index("{")
        end = completion.rindex("}") + 1
        data = json.loads(completion[start:end])
        low = [str(k).strip() for k in data["low_level_keywords"] if str(k).strip()]
        high = [str(k).strip() for k in data["high_level_keywords"] if str(k).strip()]
    except (ValueError, KeyError, TypeError) as exc:
        raise DecompositionFailed(f"keyword decomposition unparseable: {exc}") from exc
    if not low and not high:
        raise DecompositionFailed("decomposition produced no keywords")

    expanded_low: list[str] = []
    for kw in low:
        expanded_low.append(kw)
        for variant in expand_keyword(kw, cap=expansion_cap):
            if variant not in expanded_low:
                expanded_low.append(variant)

    rep = QueryRepresentation(
        original_query=query,
        low_level_keywords=expanded_low,
        high_level_keywords=high,
        representation_token_budget=representation_budget,
    )
    # Trim expansion tails until the serialized representation fits.
    while rep.serialized_tokens() > representation_budget and (
        rep.low_level_keywords or rep.high_level_keywords
    ):
        if len(rep.low_level_keywords) > 1:
            rep.low_level_keywords.pop()
        elif rep.high_level_keywords:
            rep.high_level_keywords.pop()
        else:
            break
    rep.low_vectors = gateway.embed(rep.low_level_keywords) if rep.low_level_keywords else []
    rep.high_vectors = gateway.embed(rep.high_level_keywords) if rep.high_level_keywords else []
    return rep


def embed_representation(rep: QueryRepresentation, gateway: LLMGateway) -> QueryRepresentation:
    if rep.low_level_keywords and not rep.low_vectors:
        rep.low_vectors = gateway.embed(rep.low_level_keywords)
    if rep.high_level_keywords and not rep.high_vectors:
        rep.high_vectors = gateway.embed(rep.high_level_keywords)
    return rep


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a.astype(np.float64), b.astype(np.float64)))


def dist(
    elements: set[str],
    rep: QueryRepresentation,
    element_vectors: dict[str, np.ndarray],
) -> float:
    """Coverage distance between a retrieval set and the query keywords.

    1 minus the mean, over keyword vectors, of the best cosine similarity any
    set element achieves for that keyword (negative similarities floor at 0).
    The empty set has distance 1.
    """
    keyword_vectors = rep.all_vectors()
    if not keyword_vectors:
        return 1.0
    if not elements:
        return 1.0
    coverages = []
    for kv in keyword_vectors:
        best = 0.0
        for key in elements:
            vec = element_vectors.get(key)
            if vec is None:
                continue
            sim = _cos(vec, kv)
            if sim > best:
                best = sim
        coverages.append(min(best, 1.0))
    return 1.0 - sum(coverages) / len(coverages)


def refine_set(
    initial: RetrievalSet,
    candidates: set[str],
    rep: QueryRepresentation,
    element_vectors: dict[str, np.ndarray],
    max_iters: int = 16,
    epsilon: float = 1e-9,
) -> RetrievalSet:
    """Add/remove refinement of a retrieval set.

    Each iteration picks the best element to add (argmin of dist over
    additions) and then the best element to drop from the enlarged set; the
    atomic swap is kept only when it improves dist by at least epsilon.
    Argmin ties break on ascending key. The transcript records accepted
    swaps.
    """
    if not candidates >= initial.elements:
        raise ValueError("candidates must be a superset of the initial elements")
    keyword_vectors = rep.all_vectors()
    # One cosine per (candidate, keyword), computed exactly as dist() would;
    # the loops below then reduce over cached floats, so results are
    # bit-identical to recomputing dist from scratch every time.
    table: dict[str, list[float]] = {}
    for key in candidates:
        vec = element_vectors.get(key)
        table[key] = [
            _cos(vec, kv) if vec is not None else 0.0 for kv in keyword_vectors
        ]

    def cached_dist(keys) -> float:
        if not keyword_vectors or not keys:
            return 1.0
        coverages = []
        for i in range(len(keyword_vectors)):
            best = 0.0
            for key in keys:
                sim = table[key][i]
                if sim > best:
                    best = sim
            coverages.append(min(best, 1.0))
        return 1.0 - sum(coverages) / len(coverages)

    current = set(initial.elements)
    current_dist = cached_dist(current)
    transcript: list[tuple[str, str, float]] = []

    for _ in range(max_iters):
        addable = sorted(candidates - current)
        if not addable:
            break
        best_add, best_add_dist = None, None
        for key in addable:
            d = cached_dist(current | {key})
            if best_add_dist is None or d < best_add_dist:
                best_add, best_add_dist = key, d
        enlarged = current | {best_add}
        best_drop, best_drop_dist = None, None
        for key in sorted(enlarged):
            d = cached_dist(enlarged - {key})
            if best_drop_dist is None or d < best_drop_dist:
                best_drop, best_drop_dist = key, d
        new_set = enlarged - {best_drop}
        new_dist = cached_dist(new_set)
        if new_dist <= current_dist - epsilon:
            current = new_set
            current_dist = new_dist
            transcript.append((best_add, best_drop, new_dist))
        else:
            break

    return RetrievalSet(elements=current, dist_value=current_dist, transcript=transcript)


@dataclass
class _Match:
    score: float
    keyword: str
    weight: float


def _render_node(store: GraphStore, node_id: str) -> str:
    node = store.nodes[node_id]
    kw = ", ".join(node.keywords)
    return f"[n:{node.node_id}] {node.display_name} ({node.entity_type}) :: {node.description} :: {kw} :: {node.weight:g}"


def _render_edge(store: GraphStore, eid: tuple[str, str]) -> str:
    edge = store.edges[eid]
    kw = ", ".join(edge.keywords)
    return f"[e:{edge.src}|{edge.dst}] {edge.src} -> {edge.dst} :: {edge.description} :: {kw} :: {edge.weight:g}"


def _render_chunk(store: GraphStore, chunk_id: str) -> str:
    chunk = store.chunks[chunk_id]
    return f"[c:{chunk.chunk_id}] {chunk.text}"


def retrieve(
    rep: QueryRepresentation,
    store: GraphStore,
    k_low: int = 20,
    k_high: int = 20,
    matching: str = "fuzzy",
    refine: bool = True,
    refine_max_iters: int = 16,
    refine_epsilon: float = 1e-9,
    node_edge_token_budget: int = NODE_EDGE_TOKEN_BUDGET,
    chunk_token_budget: int = CHUNK_TOKEN_BUDGET,
) -> ContextBundle:
    """Assemble a budgeted, deduplicated context bundle for the query.

    fuzzy matching searches the vector index at the store's granularity;
    exact matching accepts only normalized-name equality for nodes and
    keyword equality for edges. Matched nodes pull in their incident edges,
    matched edges pull in their endpoints; everything is deduplicated, then
    (optionally) refined, then chunks are ranked by the summed scores of the
    elements that reference them.
    """
    if matching not in ("fuzzy", "exact"):
        raise ValueError(f"unknown matching mode {matching!r}")
    if not store.nodes:
        raise EmptyStore("the graph store has no nodes")

    node_matches: dict[str, _Match] = {}
    edge_matches: dict[tuple[str, str], _Match] = {}

    def meet_node(node_id: str, score: float, keyword: str):
        if node_id not in store.nodes:
            return
        prev = node_matches.get(node_id)
        if prev is None or score > prev.score:
            node_matches[node_id] = _Match(score, keyword, store.nodes[node_id].weight)

    def meet_edge(eid: tuple[str, str], score: float, keyword: str):
        if eid not in store.edges:
            return
        prev = edge_matches.get(eid)
        if prev is None or score > prev.score:
            edge_matches[eid] = _Match(score, keyword, store.edges[eid].weight)

    # exact matching needs no vectors, so keywords pair with None when
    # embeddings are absent instead of being dropped by zip
    def paired(keywords, vectors):
        if vectors:
            return list(zip(keywords, vectors))
        return [(kw, None) for kw in keywords]

    # (1) low-level keywords -> nodes
    for kw, vec in paired(rep.low_level_keywords, rep.low_vectors):
        if matching == "exact":
            node_id = normalize_name(kw)
            if node_id in store.nodes:
                meet_node(node_id, 1.0, kw)
            continue
        if vec is None:
            continue
        try:
            if store.granularity == "concatenated":
                for key, score in store.knn(vec, k_low, "chunk"):
                    chunk_id = key[2:]
                    for node in store.nodes.values():
                        if chunk_id in node.chunk_refs:
                            meet_node(node.node_id, score, kw)
            else:
                for key, score in store.knn(vec, k_low, "node"):
                    meet_node(key[2:], score, kw)
        except EmptyIndex:
            continue

    # (2) high-level keywords -> edges
    direct_edges: set[tuple[str, str]] = set()
    for kw, vec in paired(rep.high_level_keywords, rep.high_vectors):
        if matching == "exact":
            folded = kw.casefold().strip()
            for eid, edge in store.edges.items():
                if any(k.casefold() == folded for k in edge.keywords):
                    meet_edge(eid, 1.0, kw)
                    direct_edges.add(eid)
            continue
        if vec is None:
            continue
        try:
            for key, score in store.knn(vec, k_high, "edge"):
                src, _, dst = key[2:].partition("|")
                meet_edge((src, dst), score, kw)
                direct_edges.add((src, dst))
        except EmptyIndex:
            continue

    # (3) one-hop expansion from the DIRECT matches only, inheriting scores:
    # keyword-matched nodes pull incident edges, keyword-matched edges pull
    # endpoints. Expansions never expand further.
    direct_nodes = set(node_matches)
    incident, _adjacent = store.neighborhood(direct_nodes)
    for edge in incident:
        src_match = node_matches.get(edge.src) if edge.src in direct_nodes else None
        dst_match = node_matches.get(edge.dst) if edge.dst in direct_nodes else None
        parent = max((m for m in (src_match, dst_match) if m), key=lambda m: m.score, default=None)
        if parent is not None:
            meet_edge(edge.edge_id, parent.score, parent.keyword)
    for node in store.endpoints(direct_edges):
        parents = [edge_matches[eid] for eid in direct_edges if node.node_id in eid]
        if parents:
            parent = max(parents, key=lambda m: m.score)
            meet_node(node.node_id, parent.score, parent.keyword)

    if matching == "exact" and not node_matches and not edge_matches:
        return ContextBundle([], [], [], [], node_edge_token_budget, chunk_token_budget)

    # (4) optional coverage refinement over the union plus one more hop
    element_scores: dict[str, _Match] = {f"n:{nid}": m for nid, m in node_matches.items()}
    element_scores.update({f"e:{src}|{dst}": m for (src, dst), m in edge_matches.items()})
    surviving = set(element_scores)
    if refine and surviving and rep.all_vectors():
        hop_edges, hop_nodes = store.neighborhood({nid for nid in node_matches})
        candidates = set(surviving)
        candidates.update(e.embedding_key for e in hop_edges)
        candidates.update(n.embedding_key for n in hop_nodes)
        candidates = {c for c in candidates if c in store.vectors or c in surviving}
        refined = refine_set(
            RetrievalSet(elements=surviving, dist_value=dist(surviving, rep, store.vectors)),
            candidates,
            rep,
            store.vectors,
            max_iters=refine_max_iters,
            epsilon=refine_epsilon,
        )
        for key in refined.elements - surviving:
            best = 0.0
            for kv in rep.all_vectors():
                vec = store.vectors.get(key)
                if vec is not None:
                    best = max(best, _cos(vec, kv))
            weight = 0.0
            if key.startswith("n:") and key[2:] in store.nodes:
                weight = store.nodes[key[2:]].weight
            elif key.startswith("e:"):
                src, _, dst = key[2:].partition("|")
                if (src, dst) in store.edges:
                    weight = store.edges[(src, dst)].weight
            element_scores[key] = _Match(best, "(refined)", weight)
        surviving = refined.elements

    final_nodes = {key[2:]: element_scores[key] for key in surviving if key.startswith("n:")}
    final_edges = {}
    for key in surviving:
        if key.startswith("e:"):
            src, _, dst = key[2:].partition("|")
            final_edges[(src, dst)] = element_scores[key]

    # (5) chunk gathering: rank by summed supporting scores, then max weight
    chunk_support: dict[str, list[_Match]] = {}
    for nid, match in final_nodes.items():
        for ref in store.nodes[nid].chunk_refs:
            if ref in store.chunks:
                chunk_support.setdefault(ref, []).append(match)
    for eid, match in final_edges.items():
        for ref in store.edges[eid].chunk_refs:
            if ref in store.chunks:
                chunk_support.setdefault(ref, []).append(match)
    ranked_chunks = sorted(
        chunk_support.items(),
        key=lambda item: (
            -sum(m.score for m in item[1]),
            -max(m.weight for m in item[1]),
            item[0],
        ),
    )

    # (6) greedy budget fill in rank order; stop at the first overflow
    provenance: list[Provenance] = []
    node_section: list[str] = []
    edge_section: list[str] = []
    chunk_section: list[str] = []

    used = 0
    ranked_nodes = sorted(final_nodes.items(), key=lambda kv: (-kv[1].score, kv[0]))
    for nid, match in ranked_nodes:
        line = _render_node(store, nid)
        cost = count_tokens(line)
        if used + cost > node_edge_token_budget:
            break
        node_section.append(line)
        used += cost
        provenance.append(Provenance("node", f"n:{nid}", match.score, match.keyword))
    ranked_edges = sorted(final_edges.items(), key=lambda kv: (-kv[1].score, kv[0]))
    for eid, match in ranked_edges:
        line = _render_edge(store, eid)
        cost = count_tokens(line)
        if used + cost > node_edge_token_budget:
            break
        edge_section.append(line)
        used += cost
        provenance.append(Provenance("edge", f"e:{eid[0]}|{eid[1]}", match.score, match.keyword))

    chunk_used = 0
    for chunk_id, matches in ranked_chunks:
        line = _render_chunk(store, chunk_id)
        cost = count_tokens(line)
        if chunk_used + cost > chunk_token_budget:
            break
        chunk_section.append(line)
        chunk_used += cost
        provenance.append(
            Provenance("chunk", f"c:{chunk_id}", sum(m.score for m in matches), matches[0].keyword)
        )

    return ContextBundle(
        node_section=node_section,
        edge_section=edge_section,
        chunk_section=chunk_section,
        provenance=provenance,
        node_edge_token_budget=node_edge_token_budget,
        chunk_token_budget=chunk_token_budget,
    )
