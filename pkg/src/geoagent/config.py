"""Run configuration: one YAML (or JSON) file, secrets from the environment only.

Relative paths in the file resolve against the file's directory. Keys named
``api_key`` are refused; name an environment variable with ``api_key_env``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .agent import LoopConfig
from .evaluation import ChatExtractor, ChatVerifier
from .policy import ChatClient, HttpChatClient, SamplingParams, ScriptedPolicy
from .tools.geocoding import Geocoder, load_geocoder
from .tools.search import SearchProvider, load_search_provider


class ConfigError(ValueError):
    pass


_PATH_KEYS = {"path", "script", "cache_dir"}
_SECRET_KEYS = {"api_key", "token", "password", "secret"}


def _check_secrets(node: Any, where: str = "") -> None:
    if isinstance(node, dict):
        for k, v in node.items():
            if k in _SECRET_KEYS and v:
                raise ConfigError(f"{where}{k}: secrets must come from the environment (use api_key_env)")
            _check_secrets(v, f"{where}{k}.")
    elif isinstance(node, list):
        for i, v in enumerate(node):
            _check_secrets(v, f"{where}{i}.")


def _env_key(section: dict) -> str | None:
    var = section.get("api_key_env")
    return os.environ.get(var) if var else None


@dataclass
class RunConfig:
    raw: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path.cwd)
    seed: int = 0
    deterministic: bool = False
    workers: int = 4
    beta: float = 2.0
    group_size: int = 1
    manifest: Path | None = None
    out: Path | None = None

    @classmethod
    def load(cls, path: str | os.PathLike | None, overrides: dict | None = None) -> "RunConfig":
        raw: dict = {}
        base = Path.cwd()
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            try:
                raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from exc
            if not isinstance(raw, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
            base = path.resolve().parent
        _check_secrets(raw)
        raw = copy.deepcopy(raw)
        for key, value in (overrides or {}).items():
            if value is not None:
                raw[key] = value
        cfg = cls(raw=raw, base_dir=base)
        cfg.seed = int(raw.get("seed", 0))
        cfg.deterministic = bool(raw.get("deterministic", False))
        cfg.workers = int(raw.get("workers", 4))
        cfg.beta = float(raw.get("beta", 2.0))
        cfg.group_size = int(raw.get("group_size", 1))
        if cfg.workers < 1:
            raise ConfigError("workers must be >= 1")
        if cfg.beta <= 1:
            raise ConfigError("beta must be > 1")
        if raw.get("manifest"):
            cfg.manifest = cfg.resolve(raw["manifest"])
        if raw.get("out"):
            cfg.out = cfg.resolve(raw["out"])
        cfg._check_paths()
        return cfg

    def resolve(self, value: str | os.PathLike) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def _check_paths(self) -> None:
        missing = []
        if self.manifest is not None and not self.manifest.is_file():
            missing.append(str(self.manifest))
        for name, section in self.raw.items():
            if not isinstance(section, dict):
                continue
            for key in _PATH_KEYS - {"cache_dir"}:
                if section.get(key) and not self.resolve(section[key]).exists():
                    missing.append(f"{name}.{key}={self.resolve(section[key])}")
        if missing:
            raise ConfigError("referenced paths do not exist: " + ", ".join(missing))

    def config_hash(self) -> str:
        # where outputs go is not part of what produced them
        settings = {k: v for k, v in self.raw.items() if k != "out"}
        canonical = json.dumps(settings, sort_keys=True, default=str, ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def header(self, kind: str) -> dict:
        return {"kind": kind, "config_hash": self.config_hash(), "seed": self.seed,
                "deterministic": self.deterministic}

    def section(self, name: str) -> dict | None:
        value = self.raw.get(name)
        if value is None:
            return None
        if not isinstance(value, dict):
            raise ConfigError(f"{name} must be a mapping")
        return value

    def loop_config(self) -> LoopConfig:
        loop = dict(self.section("loop") or {})
        if "tool_set" in loop:
            loop["tool_set"] = tuple(loop["tool_set"])
        loop["deterministic"] = self.deterministic
        try:
            return LoopConfig(**loop)
        except TypeError as exc:
            raise ConfigError(f"loop: {exc}") from exc

    def chat_client(self, name: str, required: bool = True) -> ChatClient | None:
        section = self.section(name)
        if section is None:
            if required:
                raise ConfigError(f"missing [{name}] section")
            return None
        kind = section.get("kind")
        if kind == "scripted":
            if "script" in section:
                return ScriptedPolicy.from_file(self.resolve(section["script"]))
            if "replies" in section:
                return ScriptedPolicy(section["replies"])
            raise ConfigError(f"{name}: scripted client needs 'script' or 'replies'")
        if kind == "http":
            for key in ("base_url", "model"):
                if not section.get(key):
                    raise ConfigError(f"{name}: http client needs {key!r}")
            sampling = SamplingParams(
                temperature=float(section.get("temperature", 1.0)),
                max_new_tokens=int(section.get("max_new_tokens", 2048)),
                top_p=section.get("top_p"),
                seed=self.seed if self.deterministic else section.get("seed"),
            )
            return HttpChatClient(section["base_url"], section["model"], _env_key(section), sampling,
                                  timeout=float(section.get("timeout", 300.0)))
        raise ConfigError(f"{name}: unknown client kind {kind!r}")

    def search_provider(self) -> SearchProvider:
        section = self.section("search")
        if section is None:
            raise ConfigError("missing [search] section")
        try:
            return load_search_provider(
                section.get("kind", "fixture"),
                path=str(self.resolve(section["path"])) if section.get("path") else None,
                endpoint=section.get("endpoint"),
                api_key=_env_key(section),
                cache_dir=str(self.resolve(section["cache_dir"])) if section.get("cache_dir") else None,
                rate_limit=section.get("rate_limit"),
            )
        except ValueError as exc:
            raise ConfigError(f"search: {exc}") from exc

    def geocoder(self) -> Geocoder | None:
        section = self.section("geocode")
        if section is None:
            return None
        try:
            return load_geocoder(
                section.get("kind", "fixture"),
                path=str(self.resolve(section["path"])) if section.get("path") else None,
                endpoint=section.get("endpoint"),
                api_key=_env_key(section),
                cache_dir=str(self.resolve(section["cache_dir"])) if section.get("cache_dir") else None,
                rate_limit=section.get("rate_limit"),
            )
        except ValueError as exc:
            raise ConfigError(f"geocode: {exc}") from exc

    def verifier(self) -> ChatVerifier | None:
        client = self.chat_client("verifier", required=False)
        return ChatVerifier(client) if client else None

    def extractor(self) -> ChatExtractor | None:
        client = self.chat_client("extractor", required=False)
        return ChatExtractor(client) if client else None
