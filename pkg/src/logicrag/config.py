"""JSON run configuration.

Example::

    {
      "top_k": 3,
      "strategy": "without_replacement",
      "provider": {"kind": "openai", "base_url": "https://api.openai.com/v1",
                   "model": "gpt-4o-mini", "api_key_env": "OPENAI_API_KEY",
                   "requests_per_minute": 500, "timeout_s": 60},
      "judge": {"kind": "scripted", "fixture": "judge.json"},
      "retriever": {"index": "index/", "dense": {"url": "http://localhost:8080/v1/embeddings",
                                                 "model": "all-MiniLM-L6-v2"}}
    }

Top-level keys other than ``provider``, ``judge`` and ``retriever`` are
:class:`~logicrag.reasoning.EngineConfig` fields. ``provider.kind`` is
``"openai"`` (any compatible server) or ``"scripted"`` with a ``fixture``
path. Relative paths resolve against the working directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .llm import HttpProvider, Provider, ScriptedProvider
from .reasoning import Engine, EngineConfig
from .retriever import CorpusIndex, HttpEmbeddingBackend, embed_retrieve, load_index

SECTIONS = ("provider", "judge", "retriever")


class ConfigError(ValueError):
    pass


@dataclass
class AppConfig:
    engine: EngineConfig = field(default_factory=EngineConfig)
    provider: dict = field(default_factory=dict)
    judge: dict | None = None
    retriever: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> AppConfig:
        if not isinstance(data, Mapping):
            raise ConfigError("config must be a JSON object")
        engine_fields = {k: v for k, v in data.items() if k not in SECTIONS}
        try:
            engine = EngineConfig.from_dict(engine_fields)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(engine, dict(data.get("provider") or {}), data.get("judge"), dict(data.get("retriever") or {}))


# file paths inside a config file are relative to the file itself
_PATH_FIELDS = (("provider", "fixture"), ("judge", "fixture"), ("retriever", "index"))


def load_config(path: str | Path) -> AppConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None
    cfg = AppConfig.from_dict(data)
    for section, key in _PATH_FIELDS:
        block = getattr(cfg, section)
        if block and isinstance(block.get(key), str):
            block[key] = str(path.parent / block[key])
    return cfg


def make_provider(block: Mapping[str, Any]) -> Provider:
    kind = block.get("kind", "openai")
    if kind == "scripted":
        if "fixture" not in block:
            raise ConfigError("scripted provider needs a 'fixture' path")
        return ScriptedProvider.from_file(block["fixture"])
    if kind == "openai":
        if "model" not in block:
            raise ConfigError("provider block needs a 'model'")
        return HttpProvider(
            block.get("base_url", "https://api.openai.com/v1"),
            block["model"],
            api_key_env=block.get("api_key_env", "OPENAI_API_KEY"),
            timeout=float(block.get("timeout_s", 60)),
            requests_per_minute=block.get("requests_per_minute"),
        )
    raise ConfigError(f"unknown provider kind {kind!r}")


def make_engine(cfg: AppConfig, index: CorpusIndex, provider: Provider | None = None) -> Engine:
    provider = provider or make_provider(cfg.provider)
    retriever = None
    dense = cfg.retriever.get("dense")
    if dense:
        if not index.dense:
            raise ConfigError("dense retrieval requested but the index has no embeddings")
        backend = HttpEmbeddingBackend(dense["url"], dense.get("model") or index.dense_model or "")

        def retriever(query, k):
            return embed_retrieve(index, query, k, backend)

    return Engine(cfg.engine, index, provider, retriever=retriever)


def open_index(cfg: AppConfig, override: str | Path | None = None) -> CorpusIndex:
    path = override or cfg.retriever.get("index")
    if not path:
        raise ConfigError("no index path given")
    return load_index(path)
