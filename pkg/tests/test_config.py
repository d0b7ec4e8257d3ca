from __future__ import annotations

import json

import pytest

from gsgraph.config import PipelineConfig, defaults, env_layer, parse_overrides
from gsgraph.errors import ConfigError, ParseError


def test_defaults_build():
    cfg = PipelineConfig.load(environ={})
    assert cfg.graph.mu == 0.9 and cfg.extraction.theta == 0.8 and cfg.grounding["mode"] == "deterministic"
    assert cfg.raw == defaults() | {"grounding": cfg.raw["grounding"]}


def test_precedence_flags_over_env_over_file(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"graph": {"mu": 0.5, "adjacency_fraction": 0.2}, "train": {"iterations": 7}}))
    env = {"GSGRAPH_GRAPH_MU": "0.6", "GSGRAPH_TRAIN_ITERATIONS": "9"}
    cfg = PipelineConfig.load(f, parse_overrides(["graph.mu=0.7"]), env)
    assert cfg.graph.mu == 0.7  # flag
    assert cfg.train.iterations == 9  # env beats file
    assert cfg.graph.adjacency_fraction == 0.2  # file beats default


def test_llm_environment_shorthands():
    env = {"GSGRAPH_LLM_URL": "http://x/y", "GSGRAPH_LLM_TIMEOUT": "4", "GSGRAPH_LLM_API_KEY": "123"}
    layer = env_layer(env)
    assert layer == {"grounding": {"url": "http://x/y", "timeout": 4, "api_key": "123"}}
    cfg = PipelineConfig.load(environ=env)
    assert cfg.grounding["api_key"] == "123" and cfg.raw["grounding"]["api_key"] == "***"


def test_mu_out_of_range_fails_validation(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"graph": {"mu": 1.5}}))
    with pytest.raises(ConfigError, match="mu"):
        PipelineConfig.load(f, environ={})


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"graph": {"muu": 0.5}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"render": {}})


def test_bad_override_syntax():
    with pytest.raises(ConfigError):
        parse_overrides(["graph.mu"])
    with pytest.raises(ConfigError):
        parse_overrides(["mu=0.5"])


def test_unreadable_and_invalid_files(tmp_path):
    with pytest.raises(ParseError):
        PipelineConfig.load(tmp_path / "none.json", environ={})
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError):
        PipelineConfig.load(bad, environ={})


def test_typed_sections_and_invariants():
    cfg = PipelineConfig.from_dict(
        {"graph": {"front_axis": [0, 1, 0], "contact_predicates": ["on", "inside"]}, "cluster": {"sampler": "fpfh"}}
    )
    assert cfg.graph.front_axis == (0.0, 1.0, 0.0) and "inside" in cfg.graph.contact_predicates
    assert cfg.cluster.sampler == "fpfh"
    for doc in ({"association": {"radius": -1}}, {"association": {"iou_min": 0}}, {"grounding": {"mode": "x"}},
                {"stable": {"factor": 0}}, {"train": {"iterations": "many"}}):
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict(doc)
