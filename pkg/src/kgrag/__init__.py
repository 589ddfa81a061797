"""kgrag: knowledge-graph retrieval-augmented generation engine.

Builds an incrementally merged knowledge graph from raw text via iterative
LLM extraction and answers queries through a multi-stage pipeline: logic
form plan execution with verification, degrading to dual-level fuzzy
retrieval, with streamed generation.
"""

from .config import EngineConfig, default_config, load_config
from .errors import KgragError
from .gateway import (
    ChatRequest,
    JudgeVerdict,
    LLMGateway,
    ProviderConfig,
    ScriptedProvider,
    seeded_hash_vector,
)
from .ingestion import Chunk, Document, load_documents, split
from .pipeline import Orchestrator, PipelineTrace, build_orchestrator
from .store import EntityNode, GraphStore, RelationEdge, load
from .tokens import count_tokens

__version__ = "0.1.0"

__all__ = [
    "ChatRequest",
    "Chunk",
    "Document",
    "EngineConfig",
    "EntityNode",
    "GraphStore",
    "JudgeVerdict",
    "KgragError",
    "LLMGateway",
    "Orchestrator",
    "PipelineTrace",
    "ProviderConfig",
    "RelationEdge",
    "ScriptedProvider",
    "build_orchestrator",
    "count_tokens",
    "default_config",
    "load",
    "load_config",
    "load_documents",
    "seeded_hash_vector",
    "split",
]
