"""Word-vector table in the plain ``token v1 ... vd`` text format."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ContractError, ParseError


class WordVectorTable:
    """Token to fixed-width vector map. Out-of-vocabulary tokens map to zero."""

    def __init__(self, vectors: dict[str, np.ndarray], dim: int | None = None, oov: str = "zero"):
        if oov not in ("zero", "error"):
            raise ContractError(f"unknown OOV policy {oov!r}")
        if dim is None:
            if not vectors:
                raise ContractError("dimension required for an empty table")
            dim = len(next(iter(vectors.values())))
        self.dim = int(dim)
        self.oov = oov
        self.vectors = {}
        for tok, vec in vectors.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (self.dim,):
                raise ContractError(f"{tok!r}: vector of shape {vec.shape}, expected ({self.dim},)")
            self.vectors[tok] = vec

    def __contains__(self, tok):
        return tok in self.vectors

    def __len__(self):
        return len(self.vectors)

    def lookup(self, tokens) -> np.ndarray:
        out = np.zeros((len(tokens), self.dim))
        for i, tok in enumerate(tokens):
            vec = self.vectors.get(tok)
            if vec is not None:
                out[i] = vec
            elif self.oov == "error":
                raise KeyError(tok)
        return out

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            for tok, vec in self.vectors.items():
                vals = " ".join(repr(float(v)) for v in vec.astype(np.float32))
                fh.write(f"{tok} {vals}\n")
        return path

    @classmethod
    def load(cls, path, dim: int | None = None, oov: str = "zero") -> "WordVectorTable":
        vectors = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split(" ")
                if len(parts) < 2:
                    continue
                try:
                    vec = np.array([float(v) for v in parts[1:]])
                except ValueError:
                    raise ParseError("non-numeric vector entry", lineno) from None
                if dim is None:
                    dim = len(vec)
                if len(vec) != dim:
                    raise ParseError(f"expected {dim} values, got {len(vec)}", lineno)
                vectors[parts[0]] = vec
        return cls(vectors, dim=dim, oov=oov)
