"""Two-stage query grounding over a scene graph.

Stage one narrows the graph to the categories a query mentions; stage two
picks the target cluster, either with an external chat-completion LLM or
with a deterministic constraint resolver.
"""
from __future__ import annotations

import json
import logging
import os
import re
import socket
import string
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    EndpointTimeout,
    InvalidClusterId,
    MalformedResponse,
    NoCandidate,
)
from .model import SceneGraph
from .scenegraph import CorrectionParams, nearest_of_category, normalize_predicate

logger = logging.getLogger(__name__)

SUPERLATIVES = {"closest": "nearest", "nearest": "nearest", "farthest": "farthest", "furthest": "farthest"}

ChatFn = Callable[[Sequence[Mapping[str, str]]], str]


@dataclass(frozen=True)
class LLMEndpoint:
    url: str
    model: str = "gpt-4o"
    timeout: float = 30.0
    retries: int = 1
    temperature: float = 0.0
    api_key: str | None = None
    max_in_flight: int = 4

    def __post_init__(self):
        if not self.url:
            raise ConfigError("llm.url is required in llm mode")
        if self.timeout <= 0:
            raise ConfigError("llm.timeout must be > 0")
        if self.retries < 0:
            raise ConfigError("llm.retries must be >= 0")
        if self.max_in_flight < 1:
            raise ConfigError("llm.max_in_flight must be >= 1")

    @classmethod
    def from_env(cls, **overrides) -> "LLMEndpoint":
        env = {
            "url": os.environ.get("GSGRAPH_LLM_URL", ""),
            "model": os.environ.get("GSGRAPH_LLM_MODEL", "gpt-4o"),
            "timeout": float(os.environ.get("GSGRAPH_LLM_TIMEOUT", "30")),
            "api_key": os.environ.get("GSGRAPH_LLM_API_KEY") or None,
        }
        env.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**env)


@dataclass(frozen=True)
class GroundingRequest:
    query: str
    mode: str = "deterministic"
    endpoint: LLMEndpoint | None = None

    def __post_init__(self):
        if self.mode not in ("llm", "deterministic"):
            raise ConfigError(f"unknown grounding mode {self.mode!r}")
        if self.mode == "llm" and self.endpoint is None:
            raise ConfigError("llm mode needs an endpoint configuration")


@dataclass(frozen=True)
class QueryConstraints:
    target: str
    relations: tuple[tuple[str, str], ...] = ()
    superlative: tuple[str, str] | None = None  # ("nearest"|"farthest", anchor category)

    def describe(self) -> str:
        parts = [f"the {self.target}"]
        parts += [f"{p} the {c}" for p, c in self.relations]
        if self.superlative:
            word = "closest" if self.superlative[0] == "nearest" else "farthest"
            parts.append(f"{word} to the {self.superlative[1]}")
        return " ".join(parts[:1]) + (" " + " and ".join(parts[1:]) if len(parts) > 1 else "")


@dataclass
class GroundingResult:
    ranked_ids: list[int]
    scores: list[float] = field(default_factory=list)  # empty when only an order is known
    trace: dict = field(default_factory=dict)

    @property
    def top(self) -> int | None:
        return self.ranked_ids[0] if self.ranked_ids else None


# ---------------------------------------------------------------------------
# stage one: category filter


def mentioned_categories(query: str, vocabulary: Sequence[str]) -> list[str]:
    """Vocabulary entries occurring in ``query`` at a word start (plurals match)."""
    q = query.lower()
    return sorted(c for c in set(vocabulary) if re.search(r"(?<![a-z0-9])" + re.escape(c.lower()), q))


def subgraph(graph: SceneGraph, categories: Sequence[str]) -> SceneGraph:
    keep = set(categories)
    nodes = [n for n in graph.nodes if n.category in keep]
    ids = {n.cluster_id for n in nodes}
    edges = [e for e in graph.edges if e.kept and e.subject in ids and e.object in ids]
    return SceneGraph(nodes, edges)


def filter_categories(
    query: str,
    graph: SceneGraph,
    extractor: Callable[[str, Sequence[str]], Sequence[str]] | None = None,
) -> tuple[SceneGraph, list[str], list[str]]:
    """Return (sub-graph, matched categories, warnings).

    ``extractor(query, vocabulary)`` defaults to substring matching. When no
    extracted category exists in the graph the whole graph is passed on.
    """
    if not graph.nodes:
        raise NoCandidate("scene graph is empty")
    vocab = graph.categories
    raw = list(extractor(query, vocab)) if extractor else mentioned_categories(query, vocab)
    lower = {c.lower(): c for c in vocab}
    cats = sorted({lower[r.strip().lower()] for r in raw if r.strip().lower() in lower})
    if not cats:
        msg = f"no graph category matched query {query!r} (extracted {sorted(raw)}); using the full graph"
        logger.warning(msg)
        kept = SceneGraph(graph.nodes, [e for e in graph.edges if e.kept])
        return kept, [], [msg]
    return subgraph(graph, cats), cats, []


# ---------------------------------------------------------------------------
# deterministic resolver


def parse_query(query: str, graph: SceneGraph, predicates: Sequence[str] = ()) -> QueryConstraints:
    """Structure a plain-English query against the graph vocabulary.

    First mentioned category is the target; each later category becomes a
    relation constraint with the nearest preceding known predicate, or the
    anchor of a superlative ("closest ... to the X").
    """
    q = " ".join(query.lower().split())
    vocab = sorted(graph.categories, key=len, reverse=True)
    mentions: list[tuple[int, int, str]] = []
    taken = np.zeros(len(q) + 1, dtype=bool)
    for c in vocab:
        for m in re.finditer(r"(?<![a-z0-9])" + re.escape(c.lower()) + r"(?:e?s)?(?![a-z0-9])", q):
            if not taken[m.start() : m.end()].any():
                taken[m.start() : m.end()] = True
                mentions.append((m.start(), m.end(), c))
    mentions.sort()
    if not mentions:
        raise NoCandidate(f"query {query!r} names no known category")
    preds = sorted({normalize_predicate(p) for p in predicates} | {normalize_predicate(e.predicate) for e in graph.edges}, key=len, reverse=True)
    sup_kind = None
    for word, kind in SUPERLATIVES.items():
        if re.search(rf"\b{word}\b", q):
            sup_kind = kind
    target = mentions[0][2]
    rels: list[tuple[str, str]] = []
    superlative = None
    prev_end = mentions[0][1]
    for start, end, cat in mentions[1:]:
        seg = q[prev_end:start]
        pred = next((p for p in preds if re.search(rf"(?<![a-z]){re.escape(p)}(?![a-z])", seg)), None)
        if sup_kind and re.search(r"\b(to|from)\b\s*(the\s*)?$", seg.strip() + " ") and (
            pred is None or re.search(r"\b(closest|nearest|farthest|furthest)\b", seg)
        ):
            superlative = (sup_kind, cat)
        elif pred is not None:
            rels.append((pred, cat))
        prev_end = end
    return QueryConstraints(target, tuple(rels), superlative)


def _satisfies(graph: SceneGraph, node_id: int, predicate: str, category: str) -> bool:
    cats = {n.cluster_id: n.category for n in graph.nodes}
    p = normalize_predicate(predicate)
    return any(
        e.kept and e.subject == node_id and normalize_predicate(e.predicate) == p and cats.get(e.object) == category
        for e in graph.edges
    )


def resolve_deterministic(
    constraints: QueryConstraints,
    graph: SceneGraph,
    centroids: Mapping[int, np.ndarray],
) -> GroundingResult:
    """Rank target-category nodes by satisfied constraints (then id).

    A superlative orders by distance to the nearest anchor node instead of
    by id, and its single winner comes from :func:`nearest_of_category`
    when there is exactly one anchor.
    """
    targets = sorted(n.cluster_id for n in graph.nodes if n.category == constraints.target)
    if not targets:
        raise NoCandidate(f"no node of category {constraints.target!r}")
    sat = {t: sum(_satisfies(graph, t, p, c) for p, c in constraints.relations) for t in targets}
    dist = {t: 0.0 for t in targets}
    if constraints.superlative:
        kind, anchor_cat = constraints.superlative
        anchors = sorted(n.cluster_id for n in graph.nodes if n.category == anchor_cat)
        if not anchors:
            raise NoCandidate(f"no anchor of category {anchor_cat!r}")
        for t in targets:
            d = min(float(np.linalg.norm(np.asarray(centroids[t]) - np.asarray(centroids[a]))) for a in anchors if a != t) if any(a != t for a in anchors) else np.inf
            dist[t] = d if kind == "nearest" else -d
    ranked = sorted(targets, key=lambda t: (-sat[t], dist[t], t))
    if constraints.superlative and constraints.superlative[0] == "nearest" and not constraints.relations:
        anchors = [n.cluster_id for n in graph.nodes if n.category == constraints.superlative[1]]
        if len(anchors) == 1:
            best = nearest_of_category(constraints.target, anchors[0], graph, centroids)
            ranked = [best] + [t for t in ranked if t != best]
    n_full = sum(1 for t in targets if sat[t] == len(constraints.relations))
    return GroundingResult(
        ranked,
        [float(sat[t]) - (1e-6 * dist[t] if constraints.superlative else 0.0) for t in ranked],
        {
            "mode": "deterministic",
            "target": constraints.target,
            "constraints": [list(r) for r in constraints.relations],
            "superlative": list(constraints.superlative) if constraints.superlative else None,
            "subgraph_nodes": len(graph.nodes),
            "full_matches": n_full,
        },
    )


def ground_deterministic(query: str, graph: SceneGraph, centroids, predicates: Sequence[str] = ()) -> GroundingResult:
    """Text query -> category filter -> parse -> resolve."""
    sub, cats, warnings = filter_categories(query, graph)
    constraints = parse_query(query, graph, predicates)
    res = resolve_deterministic(constraints, sub, centroids)
    res.trace.update({"categories": cats, "warnings": warnings})
    return res


# ---------------------------------------------------------------------------
# LLM resolver


def load_template(name: str) -> string.Template:
    text = resources.files("gsgraph").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8")
    body = "\n".join(line for line in text.splitlines() if not line.startswith("#"))
    return string.Template(body.strip() + "\n")


def serialize_objects(graph: SceneGraph, centroids: Mapping[int, np.ndarray] | None = None) -> tuple[str, str]:
    """Object and relation listings in the form fed to the selection prompt."""
    objs = []
    for n in sorted(graph.nodes, key=lambda n: n.cluster_id):
        line = f"Gaussian_id: {n.cluster_id}; category: {n.category}; attributes: {'; '.join(n.attributes) or 'none'}"
        if centroids is not None and n.cluster_id in centroids:
            c = np.asarray(centroids[n.cluster_id], dtype=np.float64)
            line += f"; center: ({c[0]:.3f}, {c[1]:.3f}, {c[2]:.3f})"
        objs.append(line)
    rels = [
        f"{e.subject} | {e.predicate} | {e.object}"
        for e in sorted(graph.edges, key=lambda e: (e.subject, e.predicate, e.object))
        if e.kept
    ]
    return "\n".join(objs) or "(none)", "\n".join(rels) or "(none)"


def _parse_categories(text: str) -> list[str]:
    try:
        data = json.loads(_json_span(text))
    except (ValueError, TypeError):
        data = None
    if isinstance(data, dict):
        data = data.get("categories")
    if isinstance(data, list) and all(isinstance(x, str) for x in data):
        return data
    parts = [p.strip(" \"'[]") for p in re.split(r"[,\n]", text)]
    parts = [p for p in parts if p and len(p) < 64]
    if not parts:
        raise MalformedResponse(f"could not read categories from {text!r}")
    return parts


def _json_span(text: str) -> str:
    m = re.search(r"(\{.*\}|\[.*\])", text, re.S)
    return m.group(1) if m else text


def _parse_ids(text: str) -> list[int]:
    try:
        data = json.loads(_json_span(text))
    except (ValueError, TypeError):
        data = None
    if isinstance(data, dict):
        if "ids" in data and isinstance(data["ids"], list):
            return [int(x) for x in data["ids"] if isinstance(x, (int, float)) or str(x).lstrip("-").isdigit()]
        if "id" in data:
            v = data["id"]
            if isinstance(v, (int, float)) or str(v).lstrip("-").isdigit():
                return [int(v)]
    if isinstance(data, list) and data and all(isinstance(x, int) for x in data):
        return list(data)
    if isinstance(data, int):
        return [data]
    m = re.search(r"(?:gaussian_id|id)\D{0,5}(-?\d+)", text, re.I)
    if m:
        return [int(m.group(1))]
    return []


class HTTPChatClient:
    """Minimal chat-completion client (OpenAI-style JSON)."""

    def __init__(self, endpoint: LLMEndpoint):
        self.endpoint = endpoint
        self._slots = threading.BoundedSemaphore(endpoint.max_in_flight)

    def __call__(self, messages: Sequence[Mapping[str, str]]) -> str:
        ep = self.endpoint
        body = json.dumps(
            {"model": ep.model, "temperature": ep.temperature, "messages": list(messages)}
        ).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if ep.api_key:
            headers["Authorization"] = f"Bearer {ep.api_key}"
        req = urllib.request.Request(ep.url, data=body, headers=headers, method="POST")
        with self._slots:
            try:
                with urllib.request.urlopen(req, timeout=ep.timeout) as resp:
                    raw = resp.read()
            except (socket.timeout, TimeoutError) as exc:
                raise EndpointTimeout(f"{ep.url}: timed out after {ep.timeout}s") from exc
            except urllib.error.URLError as exc:
                if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                    raise EndpointTimeout(f"{ep.url}: timed out after {ep.timeout}s") from exc
                raise EndpointTimeout(f"{ep.url}: unreachable ({exc.reason})") from exc
        try:
            data = json.loads(raw)
            return str(data["choices"][0]["message"]["content"])
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"{ep.url}: unexpected response body") from exc


def resolve_llm(
    request: GroundingRequest,
    graph: SceneGraph,
    centroids: Mapping[int, np.ndarray] | None = None,
    chat: ChatFn | None = None,
) -> GroundingResult:
    """Prompt 1 extracts categories, prompt 2 picks an id from the filtered
    graph; an unusable answer gets ``retries`` correction prompts."""
    if chat is None:
        if request.endpoint is None:
            raise ConfigError("llm mode needs an endpoint or a chat function")
        chat = HTTPChatClient(request.endpoint)
    retries = request.endpoint.retries if request.endpoint else 1
    vocab = graph.categories
    p1 = load_template("categories").substitute(categories=", ".join(vocab), query=request.query)
    extracted = _parse_categories(chat([{"role": "user", "content": p1}]))

    sub, cats, warnings = filter_categories(request.query, graph, lambda q, v: extracted)
    objects, relations = serialize_objects(sub, centroids)
    p2 = load_template("select").substitute(objects=objects, relations=relations, query=request.query)
    messages = [{"role": "user", "content": p2}]
    valid = set(graph.node_ids)
    attempts = 0
    last_error = ""
    while True:
        answer = chat(messages)
        ids = _parse_ids(answer)
        good = [i for i in ids if i in valid]
        if good:
            return GroundingResult(
                good,
                [],
                {
                    "mode": "llm",
                    "categories": cats,
                    "extracted": extracted,
                    "subgraph_nodes": len(sub.nodes),
                    "retries": attempts,
                    "warnings": warnings,
                },
            )
        last_error = f"id(s) {ids} not in the graph" if ids else "no Gaussian_id found in the answer"
        if attempts >= retries:
            if ids:
                raise InvalidClusterId(last_error)
            raise MalformedResponse(last_error)
        attempts += 1
        retry = load_template("retry").substitute(error=last_error, valid_ids=", ".join(map(str, sorted(valid))))
        messages = messages + [{"role": "assistant", "content": answer}, {"role": "user", "content": retry}]


def ground(
    request: GroundingRequest,
    graph: SceneGraph,
    centroids: Mapping[int, np.ndarray],
    chat: ChatFn | None = None,
    params: CorrectionParams | None = None,
) -> GroundingResult:
    if request.mode == "llm":
        return resolve_llm(request, graph, centroids, chat)
    p = params or CorrectionParams()
    lexicon = list(p.contact_predicates) + list(p.directional_predicates) + list(p.adjacency_predicates)
    return ground_deterministic(request.query, graph, centroids, lexicon)
