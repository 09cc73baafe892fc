from __future__ import annotations

import pathlib
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Optional

import yaml

from .dataset import KNOWLEDGE_MODES, SOURCES
from .errors import ConfigError
from .llm import MODES, DecodingConfig
from .utils import CONFIG

DEFAULT_CONFIG = CONFIG / "tasql.yml"


@dataclass
class RunConfig:
    dataset_path: str = ""
    databases_root: str = ""
    source: str = "bird"
    knowledge_mode: str = "with_knowledge"
    model_id: str = "gpt-4"
    gateway_mode: str = "replay"
    cache_path: str = "cache/responses.jsonl"
    output_dir: str = "runs/latest"
    concurrency: int = 4
    timeout_seconds: float = 30.0
    backend_url: str = ""
    api_key_env: str = "TASQL_API_KEY"
    use_succinct: bool = True
    include_tables_in_linking: bool = False
    decoding: DecodingConfig = field(default_factory=DecodingConfig)
    clause_abuse_clauses: List[str] = field(default_factory=lambda: ["GROUP BY"])

    @property
    def with_knowledge(self) -> bool:
        return self.knowledge_mode == "with_knowledge"

    def validate(self, needs_gateway: bool = True) -> "RunConfig":
        """Check field ranges and mode requirements; creates output_dir.

        Commands that never prompt the model (eval, audit) pass needs_gateway=False.
        """
        if self.source not in SOURCES:
            raise ConfigError(f"source must be one of {SOURCES}, got '{self.source}'")
        if self.knowledge_mode not in KNOWLEDGE_MODES:
            raise ConfigError(f"knowledge_mode must be one of {KNOWLEDGE_MODES}, got '{self.knowledge_mode}'")
        if self.gateway_mode not in MODES:
            raise ConfigError(f"gateway_mode must be one of {MODES}, got '{self.gateway_mode}'")
        if int(self.concurrency) < 1:
            raise ConfigError("concurrency must be a positive integer")
        if float(self.timeout_seconds) <= 0:
            raise ConfigError("timeout_seconds must be positive")
        if needs_gateway and self.gateway_mode == "replay" and not pathlib.Path(self.cache_path).is_file():
            raise ConfigError(f"replay mode needs an existing cache file: {self.cache_path}")
        if needs_gateway and self.gateway_mode != "replay" and not self.backend_url:
            raise ConfigError(f"{self.gateway_mode} mode needs backend_url")
        pathlib.Path(self.output_dir).mkdir(parents=True, exist_ok=True)
        return self


def _coerce(cfg: Dict[str, Any]) -> Dict[str, Any]:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = dict(cfg)
    if "decoding" in out and not isinstance(out["decoding"], DecodingConfig):
        dec = out["decoding"] or {}
        out["decoding"] = DecodingConfig(
            temperature=float(dec.get("temperature", 0.0)),
            top_p=float(dec.get("top_p", 1.0)),
            max_tokens=int(dec.get("max_tokens", 800)),
        )
    for key, kind in (("concurrency", int), ("timeout_seconds", float)):
        if key in out:
            out[key] = kind(out[key])
    for key in ("use_succinct", "include_tables_in_linking"):
        if key in out:
            out[key] = bool(out[key])
    if "clause_abuse_clauses" in out:
        out["clause_abuse_clauses"] = [str(c).upper() for c in out["clause_abuse_clauses"] or []]
    return out


def load_run_config(
    profile: Optional[str] = None,
    config_path: Optional[str | pathlib.Path] = None,
    **overrides: Any,
) -> RunConfig:
    """Load a RunConfig from config/tasql.yml (or the given path); None overrides are ignored."""
    cfg_path = pathlib.Path(config_path) if config_path else DEFAULT_CONFIG
    base: Dict[str, Any] = {}
    if cfg_path.exists():
        try:
            data: Dict[str, Any] = yaml.safe_load(cfg_path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {cfg_path}: {e}") from e
        profiles = data.get("profiles", {}) or {}
        name = profile or data.get("profile")
        if name:
            if name not in profiles:
                raise ConfigError(f"Run profile '{name}' not found in {cfg_path}")
            base = dict(profiles[name] or {})
    elif profile or config_path:
        raise ConfigError(f"config file not found: {cfg_path}")
    base.update({k: v for k, v in overrides.items() if v is not None})
    return replace(RunConfig(), **_coerce(base))
