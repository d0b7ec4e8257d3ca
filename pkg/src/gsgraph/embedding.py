"""Text-embedding providers.

Anything with ``embed(texts) -> (n, d) array of unit rows`` works; the
artifact only ships a lookup-table provider (text -> stored vector), which is
what the synthetic benchmark writes out and what real pipelines can export
from an offline text encoder.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .errors import EmbedderUnavailable, ParseError


class TextEmbedder(Protocol):
    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


class TableEmbedder:
    """Looks texts up (case-insensitive) in a fixed table of vectors."""

    def __init__(self, table: Mapping[str, Sequence[float]]):
        self.table = {}
        for k, v in table.items():
            vec = np.asarray(v, dtype=np.float64)
            n = np.linalg.norm(vec)
            self.table[k.strip().lower()] = vec / n if n > 0 else vec

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        rows = []
        for t in texts:
            key = t.strip().lower()
            if key not in self.table:
                raise EmbedderUnavailable(f"no embedding for {t!r}")
            rows.append(self.table[key])
        return np.stack(rows) if rows else np.zeros((0, 0))

    @classmethod
    def load(cls, path) -> "TableEmbedder":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"{path}: {exc}") from exc
        return cls(data)

    def to_dict(self) -> dict:
        return {k: [float(x) for x in v] for k, v in sorted(self.table.items())}
