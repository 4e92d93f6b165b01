"""GloVe-style word embedding tables."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np


class EmbeddingFormatError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingTable:
    dim: int
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, token: str) -> bool:
        return self.lookup(token) is not None

    def lookup(self, token: str) -> np.ndarray | None:
        return self.entries.get(normalize_token(token))


def normalize_token(token: str) -> str:
    return token.strip().lower()


def lookup(table: EmbeddingTable, token: str) -> np.ndarray | None:
    return table.lookup(token)


def load_embeddings(path, expected_dim: int | None = None) -> EmbeddingTable:
    """Read ``token v1 ... vd`` lines. Duplicate tokens: last one wins."""
    path = Path(path)
    entries: dict[str, np.ndarray] = {}
    dim = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
                if dim == 0:
                    raise EmbeddingFormatError(f"{path}:{lineno}: token {token!r} has no vector")
                if expected_dim is not None and dim != expected_dim:
                    raise EmbeddingFormatError(f"{path}:{lineno}: dimension {dim}, expected {expected_dim}")
            elif len(values) != dim:
                raise EmbeddingFormatError(f"{path}:{lineno}: dimension {len(values)} differs from {dim}")
            try:
                vec = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError as exc:
                raise EmbeddingFormatError(f"{path}:{lineno}: non-numeric component ({exc})") from None
            if not np.all(np.isfinite(vec)):
                raise EmbeddingFormatError(f"{path}:{lineno}: non-finite component")
            vec.setflags(write=False)
            entries[normalize_token(token)] = vec
    if dim is None:
        dim = expected_dim or 0
    return EmbeddingTable(dim, entries)


def fixture_path() -> Path:
    """Path of the bundled 10-d test table."""
    return Path(str(resources.files("textfusion") / "data" / "fixture_glove.txt"))


def load_fixture() -> EmbeddingTable:
    return load_embeddings(fixture_path(), expected_dim=10)
