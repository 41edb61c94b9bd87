"""Triplet records (reference, relative captions, target) in JSON-lines form."""

from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path

from ..errors import ContractError, ParseError, ValidationError

SEPARATOR = "<and>"
_STRIP = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    out = []
    for raw in text.lower().split():
        tok = raw.translate(_STRIP)
        if tok:
            out.append(tok)
    return out


@dataclass(frozen=True)
class TripletRecord:
    ref_id: str
    trg_id: str
    captions: tuple
    category: str

    def __post_init__(self):
        if self.ref_id == self.trg_id:
            raise ValidationError(f"reference and target are the same image {self.ref_id!r}")
        if not self.captions or not 1 <= len(self.captions) <= 2:
            raise ValidationError(f"expected 1..2 captions, got {len(self.captions)}")
        if any(len(c) == 0 for c in self.captions):
            raise ValidationError("caption without tokens")

    @property
    def tokens(self) -> list[str]:
        return merge_captions(self.captions)


def merge_captions(captions) -> list[str]:
    """Join caption token sequences with the separator token, in order."""
    if not captions:
        raise ContractError("merge_captions needs at least one caption")
    merged: list[str] = []
    for i, cap in enumerate(captions):
        toks = tokenize(cap) if isinstance(cap, str) else list(cap)
        if i:
            merged.append(SEPARATOR)
        merged.extend(toks)
    return merged


def parse_triplet(line: str, lineno: int | None = None) -> TripletRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
    if not isinstance(obj, dict):
        raise ParseError("record is not an object", lineno)
    missing = [k for k in ("ref_id", "trg_id", "captions", "category") if k not in obj]
    if missing:
        raise ParseError(f"missing fields {missing}", lineno)
    caps = obj["captions"]
    if not isinstance(caps, list) or not all(isinstance(c, str) for c in caps):
        raise ParseError("captions must be a list of strings", lineno)
    try:
        return TripletRecord(
            str(obj["ref_id"]),
            str(obj["trg_id"]),
            tuple(tuple(tokenize(c)) for c in caps),
            str(obj["category"]),
        )
    except ValidationError as exc:
        raise ParseError(str(exc), lineno) from None


def load_triplets(path) -> list[TripletRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                records.append(parse_triplet(line, lineno))
    return records


def write_triplets(path, records) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {
                "ref_id": r.ref_id,
                "trg_id": r.trg_id,
                "captions": [" ".join(c) for c in r.captions],
                "category": r.category,
            }
            fh.write(json.dumps(obj) + "\n")
    return path
