"""Engine configuration: one structured JSON file plus env-var overrides.

Every strategy choice from the ablation surface is a config field, so the
eval harness can toggle them from flags without code changes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .gateway import ProviderConfig
from .retrieval import (
    CHUNK_TOKEN_BUDGET,
    NODE_EDGE_TOKEN_BUDGET,
    REPRESENTATION_TOKEN_BUDGET,
)


@dataclass
class EngineConfig:
    provider: ProviderConfig
    embed_provider: ProviderConfig | None = None
    store_path: str = "./store"
    domain_description: str = "rice breeding and agricultural research"

    chunk_size: int = 768
    chunk_overlap: int = 32

    ner_strategy: str = "base"  # "trial" | "base"
    ner_max_rounds: int = 2
    entity_types: list[str] = field(default_factory=lambda: [
        "organism/variety", "trait", "location", "person",
        "organization", "method", "metric", "time",
    ])

    matching_mode: str = "fuzzy"  # "fuzzy" | "exact"
    granularity: str = "per_entity"  # "per_entity" | "concatenated"
    k_low: int = 20
    k_high: int = 20
    expansion_cap: int = 8
    refine_enabled: bool = True
    refine_max_iters: int = 16
    refine_epsilon: float = 1e-9

    node_edge_token_budget: int = NODE_EDGE_TOKEN_BUDGET
    chunk_token_budget: int = CHUNK_TOKEN_BUDGET
    representation_token_budget: int = REPRESENTATION_TOKEN_BUDGET

    checking_mode: str = "argument"  # "argument" | "result"
    mode: str = "auto"  # "auto" | "dual" | "logic"
    refusal_threshold: float = 0.5
    max_plan_steps: int = 8

    max_concurrency: int = 4
    ingest_workers: int = 4

    # Stage temperature overrides; unlisted stages run at 0.0.
    temperatures: dict = field(default_factory=dict)


# Environment variable -> (config path, type). Documented in the README.
ENV_OVERRIDES = {
    "KGRAG_ENDPOINT_URL": ("provider.endpoint_url", str),
    "KGRAG_MODEL": ("provider.model_name", str),
    "KGRAG_MAX_CONTEXT_TOKENS": ("provider.max_context_tokens", int),
    "KGRAG_STORE_PATH": ("store_path", str),
    "KGRAG_DOMAIN": ("domain_description", str),
    "KGRAG_CHUNK_SIZE": ("chunk_size", int),
    "KGRAG_CHUNK_OVERLAP": ("chunk_overlap", int),
    "KGRAG_NER_STRATEGY": ("ner_strategy", str),
    "KGRAG_NER_MAX_ROUNDS": ("ner_max_rounds", int),
    "KGRAG_MATCHING_MODE": ("matching_mode", str),
    "KGRAG_GRANULARITY": ("granularity", str),
    "KGRAG_CHECKING_MODE": ("checking_mode", str),
    "KGRAG_MODE": ("mode", str),
    "KGRAG_REFUSAL_THRESHOLD": ("refusal_threshold", float),
    "KGRAG_NODE_EDGE_BUDGET": ("node_edge_token_budget", int),
    "KGRAG_CHUNK_BUDGET": ("chunk_token_budget", int),
    "KGRAG_REPRESENTATION_BUDGET": ("representation_token_budget", int),
}


def _provider_from_dict(data: dict) -> ProviderConfig:
    return ProviderConfig(
        endpoint_url=data["endpoint_url"],
        model_name=data.get("model_name", "default"),
        max_context_tokens=data.get("max_context_tokens", 32768),
        request_timeout=data.get("request_timeout", 60.0),
        max_retries=data.get("max_retries", 2),
        extra_params=data.get("extra_params", {}),
    )


def default_config() -> EngineConfig:
    """Hermetic default: scripted provider with no fixtures."""
    return EngineConfig(
        provider=ProviderConfig(endpoint_url="scripted:", model_name="scripted")
    )


def load_config(path: str | Path, environ: dict | None = None) -> EngineConfig:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    provider = _provider_from_dict(data["provider"])
    embed_provider = (
        _provider_from_dict(data["embed_provider"]) if data.get("embed_provider") else None
    )
    cfg = EngineConfig(provider=provider, embed_provider=embed_provider)
    known = {f.name for f in fields(EngineConfig)}
    for key, value in data.items():
        if key in ("provider", "embed_provider"):
            continue
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        setattr(cfg, key, value)
    return apply_env_overrides(cfg, environ if environ is not None else os.environ)


def apply_env_overrides(cfg: EngineConfig, environ: dict) -> EngineConfig:
    provider_updates: dict[str, object] = {}
    for env_name, (path, cast) in ENV_OVERRIDES.items():
        if env_name not in environ:
            continue
        value = cast(environ[env_name])
        if path.startswith("provider."):
            provider_updates[path.split(".", 1)[1]] = value
        else:
            setattr(cfg, path, value)
    if provider_updates:
        base = cfg.provider
        cfg.provider = ProviderConfig(
            endpoint_url=provider_updates.get("endpoint_url", base.endpoint_url),
            model_name=provider_updates.get("model_name", base.model_name),
            max_context_tokens=provider_updates.get("max_context_tokens", base.max_context_tokens),
            request_timeout=base.request_timeout,
            max_retries=base.max_retries,
            extra_params=base.extra_params,
        )
    return cfg


def config_snapshot(cfg: EngineConfig) -> dict:
    """JSON-serializable view of the config, embedded in eval reports."""
    def provider_dict(p: ProviderConfig | None):
        if p is None:
            return None
        return {
            "endpoint_url": p.endpoint_url,
            "model_name": p.model_name,
            "max_context_tokens": p.max_context_tokens,
            "max_retries": p.max_retries,
        }

    out = {}
    for f in fields(EngineConfig):
        value = getattr(cfg, f.name)
        if f.name in ("provider", "embed_provider"):
            out[f.name] = provider_dict(value)
        else:
            out[f.name] = value
    return out
