"""Persistent graph + vector storage.

Nodes, edges, chunks and their embeddings live together in one store with
exact cosine k-NN search. Aggregated fields are kept in order-independent
forms (sorted sentence sets, milli-unit integer weights) so that stores
built from any permutation of the same merge operations dump to identical
bytes.

Layout on disk: manifest.json, nodes.jsonl, edges.jsonl, chunks.jsonl,
vectors.bin (row-major little-endian float32), vectors.keys.jsonl.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptManifest,
    EmptyIndex,
    MissingEndpoint,
    StoreWriteError,
    VersionMismatch,
)
from .ingestion import Chunk

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1

NODE_WEIGHT_CAP_MILLI = 10_000  # node weights live in [0, 10]
EDGE_WEIGHT_CAP_MILLI = 100_000  # summed edge weight is capped at 100

_WS_RE = re.compile(r"\s+")
_SENTENCE_SPLIT_RE = re.compile(r"(?<=[.!?。！？])\s+")


def normalize_name(name: str) -> str:
    """Casefold, trim, collapse internal whitespace, drop pipe characters."""
    return _WS_RE.sub(" ", name.replace("|", " ")).strip().casefold()


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENTENCE_SPLIT_RE.split(text) if s.strip()]


def milli(value: float) -> int:
    return int(round(value * 1000))


def node_key(node_id: str) -> str:
    return f"n:{node_id}"


def edge_key(src: str, dst: str) -> str:
    return f"e:{src}|{dst}"


def chunk_entities_key(chunk_id: str) -> str:
    return f"c:{chunk_id}"


@dataclass
class EntityNode:
    node_id: str
    display_name: str
    entity_type: str
    description_sentences: list[str] = field(default_factory=list)  # sorted, unique
    keywords: list[str] = field(default_factory=list)  # sorted, unique
    weight_milli: int = 1000
    chunk_refs: set[str] = field(default_factory=set)

    @property
    def description(self) -> str:
        return " ".join(self.description_sentences)

    @property
    def weight(self) -> float:
        return self.weight_milli / 1000

    @property
    def embedding_key(self) -> str:
        return node_key(self.node_id)

    def embed_text(self) -> str:
        return f"{self.display_name}: {self.description}" if self.description_sentences else self.display_name


@dataclass
class RelationEdge:
    src: str
    dst: str
    description_sentences: list[str] = field(default_factory=list)
    keywords: list[str] = field(default_factory=list)
    weight_milli: int = 1000
    chunk_refs: set[str] = field(default_factory=set)

    @property
    def edge_id(self) -> tuple[str, str]:
        return (self.src, self.dst)

    @property
    def description(self) -> str:
        return " ".join(self.description_sentences)

    @property
    def weight(self) -> float:
        return self.weight_milli / 1000

    @property
    def embedding_key(self) -> str:
        return edge_key(self.src, self.dst)

    def embed_text(self) -> str:
        kw = " ".join(self.keywords)
        return f"{self.src} -> {self.dst}: {self.description} {kw}".strip()


class GraphStore:
    """In-memory graph with vector indexes and canonical dump/load.

    Writers take the internal lock; query paths should work on `snapshot()`
    so readers never observe partial merges.
    """

    def __init__(self, dimension: int = 64, granularity: str = "per_entity"):
        if granularity not in ("per_entity", "concatenated"):
            raise ValueError(f"unknown granularity {granularity!r}")
        self.dimension = dimension
        self.granularity = granularity
        self.nodes: dict[str, EntityNode] = {}
        self.edges: dict[tuple[str, str], RelationEdge] = {}
        self.chunks: dict[str, Chunk] = {}
        self.vectors: dict[str, np.ndarray] = {}  # embedding_key -> float32 unit vector
        self.pending_embeddings: set[str] = set()
        self.metrics: dict[str, int] = {"self_loops_dropped": 0, "unknown_ids_skipped": 0}
        self._lock = threading.RLock()
        self._writable = True

    # -- write path ----------------------------------------------------------

    def _require_writable(self):
        if not self._writable:
            raise StoreWriteError("store snapshot is read-only")

    def add_chunk(self, chunk: Chunk) -> None:
        with self._lock:
            self._require_writable()
            self.chunks[chunk.chunk_id] = chunk
            if self.granularity == "concatenated":
                self.pending_embeddings.add(chunk_entities_key(chunk.chunk_id))

    def upsert_node(
        self,
        display_name: str,
        entity_type: str,
        description: str = "",
        keywords: list[str] | None = None,
        weight: float = 1.0,
        chunk_refs: set[str] | None = None,
    ) -> str:
        """Merge-or-create a node; returns "created" or "merged".

        Merge semantics: descriptions accumulate as a sorted unique sentence
        set, keywords union, weight is the max of contributors, the display
        name and type resolve to the lexicographically smallest contributor
        so results are independent of merge order.
        """
        with self._lock:
            self._require_writable()
            node_id = normalize_name(display_name)
            if not node_id:
                raise StoreWriteError("node name is empty after normalization")
            new_sentences = split_sentences(description)
            weight_m = min(max(milli(weight), 0), NODE_WEIGHT_CAP_MILLI)
            existing = self.nodes.get(node_id)
            if existing is None:
                node = EntityNode(
                    node_id=node_id,
                    display_name=display_name.strip(),
                    entity_type=entity_type,
                    description_sentences=sorted(set(new_sentences)),
                    keywords=sorted(set(keywords or [])),
                    weight_milli=weight_m,
                    chunk_refs=set(chunk_refs or set()),
                )
                self.nodes[node_id] = node
                self._mark_dirty(node.embedding_key, node.chunk_refs)
                return "created"
            before = (tuple(existing.description_sentences), existing.display_name)
            existing.display_name = min(existing.display_name, display_name.strip())
            existing.entity_type = min(existing.entity_type, entity_type)
            existing.description_sentences = sorted(set(existing.description_sentences) | set(new_sentences))
            existing.keywords = sorted(set(existing.keywords) | set(keywords or []))
            existing.weight_milli = max(existing.weight_milli, weight_m)
            existing.chunk_refs |= set(chunk_refs or set())
            if (tuple(existing.description_sentences), existing.display_name) != before:
                self._mark_dirty(existing.embedding_key, existing.chunk_refs)
            return "merged"

    def upsert_edge(
        self,
        src_name: str,
        dst_name: str,
        description: str = "",
        keywords: list[str] | None = None,
        weight: float = 1.0,
        chunk_refs: set[str] | None = None,
    ) -> str:
        """Merge-or-create a directed edge; weight contributions are summed
        (capped); both endpoints must already exist."""
        with self._lock:
            self._require_writable()
            src = normalize_name(src_name)
            dst = normalize_name(dst_name)
            if src not in self.nodes or dst not in self.nodes:
                missing = src if src not in self.nodes else dst
                raise MissingEndpoint(f"edge endpoint {missing!r} is not a stored node")
            if src == dst:
                self.metrics["self_loops_dropped"] += 1
                return "merged"
            key = (src, dst)
            new_sentences = split_sentences(description)
            weight_m = max(milli(weight), 0)
            existing = self.edges.get(key)
            if existing is None:
                edge = RelationEdge(
                    src=src,
                    dst=dst,
                    description_sentences=sorted(set(new_sentences)),
                    keywords=sorted(set(keywords or [])),
                    weight_milli=min(weight_m, EDGE_WEIGHT_CAP_MILLI),
                    chunk_refs=set(chunk_refs or set()),
                )
                self.edges[key] = edge
                self._mark_dirty(edge.embedding_key, edge.chunk_refs)
                return "created"
            before = (tuple(existing.description_sentences), tuple(existing.keywords))
            existing.description_sentences = sorted(set(existing.description_sentences) | set(new_sentences))
            existing.keywords = sorted(set(existing.keywords) | set(keywords or []))
            existing.weight_milli = min(existing.weight_milli + weight_m, EDGE_WEIGHT_CAP_MILLI)
            existing.chunk_refs |= set(chunk_refs or set())
            if (tuple(existing.description_sentences), tuple(existing.keywords)) != before:
                self._mark_dirty(existing.embedding_key, existing.chunk_refs)
            return "merged"

    def _mark_dirty(self, key: str, chunk_refs: set[str]) -> None:
        self.pending_embeddings.add(key)
        self.vectors.pop(key, None)
        if self.granularity == "concatenated":
            for chunk_id in chunk_refs:
                ck = chunk_entities_key(chunk_id)
                self.pending_embeddings.add(ck)
                self.vectors.pop(ck, None)

    def refresh_embeddings(self, gateway) -> int:
        """Recompute vectors for every dirty element. Returns refresh count."""
        with self._lock:
            self._require_writable()
            keys = sorted(self.pending_embeddings)
            texts = []
            live_keys = []
            for key in keys:
                text = self._embed_text_for(key)
                if text is None:
                    self.pending_embeddings.discard(key)
                    continue
                live_keys.append(key)
                texts.append(text)
            if not texts:
                return 0
            vectors = gateway.embed(texts)
            if self.vectors and vectors and next(iter(self.vectors.values())).shape[0] != vectors[0].shape[0]:
                raise StoreWriteError("embedding dimension changed mid-store")
            self.dimension = vectors[0].shape[0]
            for key, vec in zip(live_keys, vectors):
                self.vectors[key] = vec.astype(np.float32)
                self.pending_embeddings.discard(key)
            return len(live_keys)

    def _embed_text_for(self, key: str) -> str | None:
        if key.startswith("n:"):
            node = self.nodes.get(key[2:])
            return node.embed_text() if node else None
        if key.startswith("e:"):
            src, _, dst = key[2:].partition("|")
            edge = self.edges.get((src, dst))
            return edge.embed_text() if edge else None
        if key.startswith("c:"):
            chunk_id = key[2:]
            if chunk_id not in self.chunks:
                return None
            members = sorted(
                (node for node in self.nodes.values() if chunk_id in node.chunk_refs),
                key=lambda n: n.node_id,
            )
            if not members:
                return None
            return "; ".join(node.embed_text() for node in members)
        return None

    # -- read path -----------------------------------------------------------

    def knn(self, query_vector: np.ndarray, k: int, kind: str) -> list[tuple[str, float]]:
        """Exact top-k cosine search. Ties break by ascending key."""
        if k <= 0:
            raise ValueError("k must be positive")
        prefix = {"node": "n:", "edge": "e:", "chunk": "c:"}[kind]
        with self._lock:
            items = [(key, vec) for key, vec in self.vectors.items() if key.startswith(prefix)]
        if not items:
            raise EmptyIndex(f"no {kind} vectors indexed")
        q = np.asarray(query_vector, dtype=np.float64)
        q = q / np.linalg.norm(q)
        scored = [(key, float(np.dot(vec.astype(np.float64), q))) for key, vec in items]
        scored.sort(key=lambda kv: (-kv[1], kv[0]))
        return scored[:k]

    def neighborhood(self, node_ids: set[str]) -> tuple[list[RelationEdge], list[EntityNode]]:
        """Incident edges (either direction) and adjacent nodes, sorted by id."""
        with self._lock:
            known = set()
            for node_id in node_ids:
                if node_id in self.nodes:
                    known.add(node_id)
                else:
                    self.metrics["unknown_ids_skipped"] += 1
            edges = [e for e in self.edges.values() if e.src in known or e.dst in known]
            edges.sort(key=lambda e: e.edge_id)
            adjacent_ids = sorted(
                ({e.src for e in edges} | {e.dst for e in edges}) - known
            )
            adjacent = [self.nodes[i] for i in adjacent_ids if i in self.nodes and i not in known]
            return edges, adjacent

    def endpoints(self, edge_ids: set[tuple[str, str]]) -> list[EntityNode]:
        with self._lock:
            ids: set[str] = set()
            for eid in edge_ids:
                edge = self.edges.get(tuple(eid))
                if edge is None:
                    self.metrics["unknown_ids_skipped"] += 1
                    continue
                ids.add(edge.src)
                ids.add(edge.dst)
            return [self.nodes[i] for i in sorted(ids)]

    def stats(self) -> dict:
        with self._lock:
            return {"nodes": len(self.nodes), "edges": len(self.edges), "chunks": len(self.chunks)}

    def verify(self) -> list[str]:
        """Referential-integrity check; returns a list of problems."""
        problems = []
        with self._lock:
            for edge in self.edges.values():
                for endpoint in edge.edge_id:
                    if endpoint not in self.nodes:
                        problems.append(f"edge {edge.embedding_key} endpoint {endpoint!r} missing")
                if edge.src == edge.dst:
                    problems.append(f"self-loop stored: {edge.embedding_key}")
            for node in self.nodes.values():
                for ref in node.chunk_refs:
                    if ref not in self.chunks:
                        problems.append(f"node {node.node_id!r} references unknown chunk {ref!r}")
            for edge in self.edges.values():
                for ref in edge.chunk_refs:
                    if ref not in self.chunks:
                        problems.append(f"edge {edge.embedding_key} references unknown chunk {ref!r}")
            for key in self.vectors:
                if self._embed_text_for(key) is None:
                    problems.append(f"vector {key!r} has no backing element")
        return sorted(problems)

    def snapshot(self) -> "GraphStore":
        """Read-only deep copy handed to query pipelines."""
        with self._lock:
            clone = GraphStore(dimension=self.dimension, granularity=self.granularity)
            clone.nodes = copy.deepcopy(self.nodes)
            clone.edges = copy.deepcopy(self.edges)
            clone.chunks = dict(self.chunks)
            clone.vectors = {k: v.copy() for k, v in self.vectors.items()}
            clone.pending_embeddings = set(self.pending_embeddings)
            clone.metrics = dict(self.metrics)
            clone._writable = False
            return clone

    # -- persistence ----------------------------------------------------------

    def _node_record(self, node: EntityNode) -> dict:
        return {
            "node_id": node.node_id,
            "display_name": node.display_name,
            "entity_type": node.entity_type,
            "description_sentences": node.description_sentences,
            "keywords": node.keywords,
            "weight_milli": node.weight_milli,
            "chunk_refs": sorted(node.chunk_refs),
            "embedding_key": node.embedding_key,
        }

    def _edge_record(self, edge: RelationEdge) -> dict:
        return {
            "src": edge.src,
            "dst": edge.dst,
            "description_sentences": edge.description_sentences,
            "keywords": edge.keywords,
            "weight_milli": edge.weight_milli,
            "chunk_refs": sorted(edge.chunk_refs),
            "embedding_key": edge.embedding_key,
        }

    def dump(self, directory: str | Path) -> dict:
        """Write the canonical on-disk form; returns the manifest."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        with self._lock:
            files = {
                "nodes.jsonl": "".join(
                    json.dumps(self._node_record(self.nodes[k]), ensure_ascii=False, sort_keys=True) + "\n"
                    for k in sorted(self.nodes)
                ),
                "edges.jsonl": "".join(
                    json.dumps(self._edge_record(self.edges[k]), ensure_ascii=False, sort_keys=True) + "\n"
                    for k in sorted(self.edges)
                ),
                "chunks.jsonl": "".join(
                    json.dumps(self.chunks[k].to_json(), ensure_ascii=False, sort_keys=True) + "\n"
                    for k in sorted(self.chunks)
                ),
                "vectors.keys.jsonl": "".join(
                    json.dumps({"row": i, "embedding_key": k}, ensure_ascii=False, sort_keys=True) + "\n"
                    for i, k in enumerate(sorted(self.vectors))
                ),
            }
            payloads: dict[str, bytes] = {name: text.encode("utf-8") for name, text in files.items()}
            vector_keys = sorted(self.vectors)
            if vector_keys:
                matrix = np.stack([self.vectors[k] for k in vector_keys]).astype("<f4")
                payloads["vectors.bin"] = matrix.tobytes(order="C")
            else:
                payloads["vectors.bin"] = b""
            digests = {
                name: hashlib.sha256(blob).hexdigest() for name, blob in sorted(payloads.items())
            }
            manifest = {
                "version": MANIFEST_VERSION,
                "dimension": self.dimension,
                "granularity": self.granularity,
                "files": digests,
                "pending_embeddings": sorted(self.pending_embeddings),
                "stats": self.stats(),
            }
            for name, blob in payloads.items():
                (out / name).write_bytes(blob)
            (out / "manifest.json").write_text(
                json.dumps(manifest, ensure_ascii=False, sort_keys=True, indent=1) + "\n",
                encoding="utf-8",
            )
            return manifest


def load(directory: str | Path) -> GraphStore:
    """Load a dumped store, verifying the manifest digests."""
    root = Path(directory)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise CorruptManifest(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("version") != MANIFEST_VERSION:
        raise VersionMismatch(f"manifest version {manifest.get('version')!r} unsupported")
    for name, expected in manifest["files"].items():
        blob = (root / name).read_bytes() if (root / name).exists() else None
        if blob is None:
            raise CorruptManifest(f"{name} listed in manifest but missing")
        actual = hashlib.sha256(blob).hexdigest()
        if actual != expected:
            raise CorruptManifest(f"{name} digest mismatch")

    store = GraphStore(dimension=manifest["dimension"], granularity=manifest["granularity"])
    for line in (root / "nodes.jsonl").read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        store.nodes[rec["node_id"]] = EntityNode(
            node_id=rec["node_id"],
            display_name=rec["display_name"],
            entity_type=rec["entity_type"],
            description_sentences=rec["description_sentences"],
            keywords=rec["keywords"],
            weight_milli=rec["weight_milli"],
            chunk_refs=set(rec["chunk_refs"]),
        )
    for line in (root / "edges.jsonl").read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        store.edges[(rec["src"], rec["dst"])] = RelationEdge(
            src=rec["src"],
            dst=rec["dst"],
            description_sentences=rec["description_sentences"],
            keywords=rec["keywords"],
            weight_milli=rec["weight_milli"],
            chunk_refs=set(rec["chunk_refs"]),
        )
    for line in (root / "chunks.jsonl").read_text(encoding="utf-8").splitlines():
        chunk = Chunk.from_json(json.loads(line))
        store.chunks[chunk.chunk_id] = chunk
    keys = [
        json.loads(line)["embedding_key"]
        for line in (root / "vectors.keys.jsonl").read_text(encoding="utf-8").splitlines()
    ]
    blob = (root / "vectors.bin").read_bytes()
    if keys:
        matrix = np.frombuffer(blob, dtype="<f4").reshape(len(keys), -1)
        if matrix.shape[1] != manifest["dimension"]:
            raise CorruptManifest("vectors.bin shape does not match manifest dimension")
        for i, key in enumerate(keys):
            store.vectors[key] = matrix[i].copy()
    store.pending_embeddings = set(manifest.get("pending_embeddings", []))
    return store
