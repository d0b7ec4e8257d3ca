from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from mock_llm import ScriptedLLM

from gsgraph.errors import (
    ConfigError,
    EndpointTimeout,
    InvalidClusterId,
    MalformedResponse,
    NoCandidate,
)
from gsgraph.grounding import (
    GroundingRequest,
    HTTPChatClient,
    LLMEndpoint,
    QueryConstraints,
    filter_categories,
    ground,
    ground_deterministic,
    load_template,
    parse_query,
    resolve_deterministic,
    resolve_llm,
    serialize_objects,
)
from gsgraph.model import GraphEdge, GraphNode, SceneGraph
from gsgraph.synth import SynthSpec, generate, graph_from_ground_truth


def _graph(nodes, edges=()):
    return SceneGraph(
        [GraphNode(i, [1.0], c) for i, c in nodes],
        [GraphEdge(s, p, o, 1, True) for s, p, o in edges],
    )


ROOM = _graph([(0, "cup"), (1, "cup"), (2, "table"), (3, "chair")], [(1, "on", 2), (3, "next to", 2)])
ROOM_CENTERS = {0: np.array([0.0, 0, 0]), 1: np.array([1.0, 0, 0]), 2: np.array([1.0, 0, -0.5]), 3: np.array([2.0, 0, 0])}


# ---------------------------------------------------------------------------
# category filter


def test_filter_keeps_mentioned_categories():
    sub, cats, warnings = filter_categories("the cup on the table", ROOM)
    assert cats == ["cup", "table"] and warnings == []
    assert sorted(n.category for n in sub.nodes) == ["cup", "cup", "table"]
    assert [(e.subject, e.predicate, e.object) for e in sub.edges] == [(1, "on", 2)]


def test_filter_without_known_category_falls_back_with_warning():
    sub, cats, warnings = filter_categories("the sofa by the window", ROOM)
    assert cats == [] and len(warnings) == 1
    assert sub.node_ids == ROOM.node_ids


def test_extractor_mismatch_falls_back():
    sub, cats, warnings = filter_categories("the mug", ROOM, lambda q, v: ["mug"])
    assert cats == [] and warnings and len(sub.nodes) == 4


def test_filter_on_empty_graph_raises():
    with pytest.raises(NoCandidate):
        filter_categories("the cup", SceneGraph([]))


# ---------------------------------------------------------------------------
# deterministic resolution


def test_constraint_ranks_the_satisfying_cup_first():
    res = resolve_deterministic(QueryConstraints("cup", (("on", "table"),)), ROOM, ROOM_CENTERS)
    assert res.ranked_ids == [1, 0]
    assert res.scores[0] > res.scores[1]


def test_no_constraints_lists_targets_in_id_order():
    res = resolve_deterministic(QueryConstraints("cup"), ROOM, ROOM_CENTERS)
    assert res.ranked_ids == [0, 1] and res.scores == [0.0, 0.0]


def test_closest_chair_to_blackboard():
    g = _graph([(0, "blackboard"), (5, "chair"), (6, "chair"), (7, "chair")])
    cent = {0: np.zeros(3), 5: np.array([3.0, 0, 0]), 6: np.array([0, 1.0, 0]), 7: np.array([0, 0, 2.0])}
    res = ground_deterministic("the chair closest to the blackboard", g, cent)
    assert res.top == 6
    assert res.ranked_ids == [6, 7, 5]
    far = ground_deterministic("the chair farthest from the blackboard", g, cent)
    assert far.top == 5


def test_parse_query_structure():
    q = parse_query("the cup on the table and next to the chair", ROOM, ["next to"])
    assert q == QueryConstraints("cup", (("on", "table"), ("next to", "chair")))
    assert parse_query("cups on tables", ROOM).target == "cup"
    with pytest.raises(NoCandidate):
        parse_query("a sofa", ROOM)


def test_ground_deterministic_through_text():
    res = ground_deterministic("the cup on the table", ROOM, ROOM_CENTERS)
    assert res.top == 1 and res.trace["categories"] == ["cup", "table"]


def test_dropped_edges_do_not_satisfy_constraints():
    from dataclasses import replace

    from gsgraph.model import Verdict

    edges = [replace(e, correction_verdict=Verdict.DROPPED_CONTACT) for e in ROOM.edges]
    g = SceneGraph(ROOM.nodes, edges)
    res = resolve_deterministic(QueryConstraints("cup", (("on", "table"),)), g, ROOM_CENTERS)
    assert res.scores == [0.0, 0.0]


# ---------------------------------------------------------------------------
# LLM resolution with scripted chat


ENDPOINT = LLMEndpoint("http://127.0.0.1:9/unused", retries=1)


def _req(q="the cup on the table"):
    return GroundingRequest(q, "llm", ENDPOINT)


def test_llm_valid_answer_passes_through():
    chat = ScriptedLLM(['["cup", "table"]', '{"id": 1}'])
    res = resolve_llm(_req(), ROOM, ROOM_CENTERS, chat)
    assert res.top == 1 and res.trace["retries"] == 0 and res.scores == []


def test_llm_garbage_then_valid_id_after_one_retry():
    chat = ScriptedLLM(['["cup"]', "I am not sure", '{"id": 0}'])
    res = resolve_llm(_req(), ROOM, ROOM_CENTERS, chat)
    assert res.top == 0 and res.trace["retries"] == 1
    assert "Valid Gaussian_id values are: 0, 1, 2, 3" in chat.calls[-1][-1]["content"]


def test_llm_always_invalid_raises():
    chat = ScriptedLLM(['["cup"]', '{"id": 42}', '{"id": 43}'])
    with pytest.raises(InvalidClusterId):
        resolve_llm(_req(), ROOM, ROOM_CENTERS, chat)


def test_llm_never_answering_with_an_id_is_malformed():
    chat = ScriptedLLM(['["cup"]', "hmm", "still no"])
    with pytest.raises(MalformedResponse):
        resolve_llm(_req(), ROOM, ROOM_CENTERS, chat)


def test_prompts_carry_objects_and_relations():
    chat = ScriptedLLM(['["cup", "table"]', '{"id": 1}'])
    resolve_llm(_req(), ROOM, ROOM_CENTERS, chat)
    select = chat.calls[1][0]["content"]
    assert "Gaussian_id: 1; category: cup" in select and "1 | on | 2" in select
    assert "chair" not in select  # filtered out by stage one
    assert "#" not in load_template("select").template


def test_scripted_model_reproduces_the_resolver_on_a_synth_graph():
    sc = generate(SynthSpec(n_queries=20), 1)
    gt = sc.ground_truth()
    graph = graph_from_ground_truth(gt)
    cent = sc.centroids
    for q in sc.queries:
        det = ground_deterministic(q["text"], graph, cent)
        llm = resolve_llm(GroundingRequest(q["text"], "llm", ENDPOINT), graph, cent, ScriptedLLM())
        assert llm.top == det.top == q["answer"], q["text"]


def test_serialization_format():
    objs, rels = serialize_objects(ROOM, ROOM_CENTERS)
    assert objs.splitlines()[2] == "Gaussian_id: 2; category: table; attributes: none; center: (1.000, 0.000, -0.500)"
    assert rels.splitlines() == ["1 | on | 2", "3 | next to | 2"]


def test_llm_mode_requires_an_endpoint():
    with pytest.raises(ConfigError):
        GroundingRequest("q", "llm")
    with pytest.raises(ConfigError):
        LLMEndpoint("")


# ---------------------------------------------------------------------------
# HTTP client against a local server


class _Handler(BaseHTTPRequestHandler):
    mode = "ok"
    seen: list = []

    def do_POST(self):  # noqa: N802 - http.server API
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((dict(self.headers), body))
        if self.mode == "slow":
            time.sleep(0.5)
        if self.mode == "bad":
            payload = b"not json"
        else:
            content = '{"id": 1}' if "Objects:" in body["messages"][0]["content"] else '["cup", "table"]'
            payload = json.dumps({"choices": [{"message": {"content": content}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    _Handler.seen = []
    yield srv, f"http://127.0.0.1:{srv.server_address[1]}/v1/chat/completions"
    srv.shutdown()
    srv.server_close()


def test_http_client_round_trip(server):
    _, url = server
    _Handler.mode = "ok"
    ep = LLMEndpoint(url, model="m1", api_key="secret", timeout=5)
    res = ground(GroundingRequest("the cup on the table", "llm", ep), ROOM, ROOM_CENTERS)
    assert res.top == 1
    headers, body = _Handler.seen[0]
    assert body["model"] == "m1" and body["temperature"] == 0.0
    assert headers["Authorization"] == "Bearer secret"


def test_http_client_timeout(server):
    _, url = server
    _Handler.mode = "slow"
    with pytest.raises(EndpointTimeout):
        HTTPChatClient(LLMEndpoint(url, timeout=0.1))([{"role": "user", "content": "x"}])


def test_http_client_malformed_body(server):
    _, url = server
    _Handler.mode = "bad"
    with pytest.raises(MalformedResponse):
        HTTPChatClient(LLMEndpoint(url, timeout=5))([{"role": "user", "content": "x"}])


def test_unreachable_endpoint_is_a_timeout_error():
    with pytest.raises(EndpointTimeout):
        HTTPChatClient(LLMEndpoint("http://127.0.0.1:9/", timeout=1))([{"role": "user", "content": "x"}])
