"""Pipeline configuration: one JSON document with a section per stage.

Layers, lowest to highest precedence: built-in defaults, a config file,
``GSGRAPH_<SECTION>_<KEY>`` environment variables (plus the
``GSGRAPH_LLM_*`` shorthands), then command-line overrides. Unknown sections
or keys are rejected, and every threshold invariant is checked when the typed
stage objects are built.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .clustering import ClusterParams
from .errors import ConfigError, ParseError
from .ingest import ExtractionConfig
from .instance_field import OptConfig
from .scenegraph import CorrectionParams

ENV_PREFIX = "GSGRAPH_"
LLM_ENV = {"GSGRAPH_LLM_URL": "url", "GSGRAPH_LLM_MODEL": "model", "GSGRAPH_LLM_TIMEOUT": "timeout",
           "GSGRAPH_LLM_API_KEY": "api_key"}


def _dataclass_defaults(cls) -> dict:
    inst = cls()
    out = {}
    for f in fields(cls):
        v = getattr(inst, f.name)
        if isinstance(v, frozenset):
            v = sorted(v)
        elif isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, Mapping):
            v = dict(v)
        out[f.name] = v
    return out


def defaults() -> dict:
    return {
        "extraction": _dataclass_defaults(ExtractionConfig),
        "train": _dataclass_defaults(OptConfig),
        "cluster": _dataclass_defaults(ClusterParams),
        "association": {"radius": 2, "iou_min": 0.2},
        "graph": _dataclass_defaults(CorrectionParams),
        "grounding": {
            "mode": "deterministic",
            "url": "",
            "model": "gpt-4o",
            "timeout": 30.0,
            "retries": 1,
            "max_in_flight": 4,
            "api_key": None,
        },
        "stable": {"epsilon": None, "factor": 2.0},
    }


def _parse_scalar(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _merge(base: dict, layer: Mapping, source: str) -> None:
    for section, values in layer.items():
        if section not in base:
            raise ConfigError(f"{source}: unknown config section {section!r}")
        if not isinstance(values, Mapping):
            raise ConfigError(f"{source}: section {section!r} must be an object")
        for key, v in values.items():
            if key not in base[section]:
                raise ConfigError(f"{source}: unknown key {section}.{key}")
            base[section][key] = v


def env_layer(environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    sections = set(defaults())
    out: dict[str, dict] = {}
    for name in sorted(environ):
        if name in LLM_ENV:
            out.setdefault("grounding", {})[LLM_ENV[name]] = _parse_scalar(environ[name]) if name != "GSGRAPH_LLM_API_KEY" else environ[name]
            continue
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section in sections and key:
            out.setdefault(section, {})[key] = _parse_scalar(environ[name])
    return out


def parse_overrides(items) -> dict:
    """``["graph.mu=0.95", ...]`` -> nested dict."""
    out: dict[str, dict] = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        out.setdefault(section, {})[name] = _parse_scalar(value)
    return out


@dataclass(frozen=True)
class PipelineConfig:
    extraction: ExtractionConfig
    train: OptConfig
    cluster: ClusterParams
    graph: CorrectionParams
    radius: int
    iou_min: float
    grounding: Mapping[str, Any]
    stable_epsilon: float | None
    stable_factor: float
    raw: Mapping[str, Any]

    @classmethod
    def from_layers(cls, file_layer: Mapping | None = None, env: Mapping | None = None,
                    overrides: Mapping | None = None) -> "PipelineConfig":
        doc = defaults()
        if file_layer:
            _merge(doc, file_layer, "config file")
        if env:
            _merge(doc, env, "environment")
        if overrides:
            _merge(doc, overrides, "command line")
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path=None, overrides: Mapping | None = None,
             environ: Mapping[str, str] | None = None) -> "PipelineConfig":
        file_layer = None
        if path is not None:
            try:
                file_layer = json.loads(Path(path).read_text())
            except OSError as exc:
                raise ParseError(f"{path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
            if not isinstance(file_layer, dict):
                raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_layers(file_layer, env_layer(environ), overrides)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "PipelineConfig":
        full = defaults()
        _merge(full, doc, "config")
        try:
            g = dict(full["graph"])
            for name in ("front_axis", "up_axis"):
                g[name] = tuple(float(x) for x in g[name])
            for name in ("contact_predicates", "adjacency_predicates"):
                g[name] = frozenset(g[name])
            if g["pre_rotation"] is not None:
                g["pre_rotation"] = tuple(tuple(float(x) for x in row) for row in g["pre_rotation"])
            graph = CorrectionParams(**g)
            extraction = ExtractionConfig(**full["extraction"])
            train = OptConfig(**full["train"])
            cluster = ClusterParams(**full["cluster"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config value: {exc}") from exc
        assoc = full["association"]
        if not isinstance(assoc["radius"], int) or assoc["radius"] < 0:
            raise ConfigError("association.radius must be an integer >= 0")
        if not 0.0 < float(assoc["iou_min"]) <= 1.0:
            raise ConfigError("association.iou_min must be in (0, 1]")
        gr = full["grounding"]
        if gr["mode"] not in ("deterministic", "llm"):
            raise ConfigError("grounding.mode must be 'deterministic' or 'llm'")
        st = full["stable"]
        if st["epsilon"] is not None and not float(st["epsilon"]) > 0:
            raise ConfigError("stable.epsilon must be > 0")
        if not float(st["factor"]) > 0:
            raise ConfigError("stable.factor must be > 0")
        raw = copy.deepcopy(full)
        raw["grounding"]["api_key"] = None if raw["grounding"]["api_key"] is None else "***"
        return cls(extraction, train, cluster, graph, int(assoc["radius"]), float(assoc["iou_min"]),
                   dict(gr), st["epsilon"], float(st["factor"]), raw)
