"""On-disk dataset directory: feature store, word vectors, triplet splits."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ContractError, MissingIdError
from .features import FeatureStore, load_feature_store
from .triplets import TripletRecord, load_triplets
from .wordvec import WordVectorTable

WORDS_FILE = "wordvecs.txt"
CATEGORIES_FILE = "categories.json"


@dataclass
class Dataset:
    root: Path
    store: FeatureStore
    words: WordVectorTable
    image_categories: dict | None = None
    _splits: dict = field(default_factory=dict, repr=False)

    def split(self, name: str) -> list[TripletRecord]:
        if name not in self._splits:
            path = self.root / f"{name}.jsonl"
            if not path.exists():
                raise ContractError(f"no split {name!r} under {self.root}")
            records = load_triplets(path)
            for r in records:
                for image_id in (r.ref_id, r.trg_id):
                    if image_id not in self.store:
                        raise MissingIdError(image_id)
            self._splits[name] = records
        return self._splits[name]

    def galleries(self, records, kind: str = "auto") -> dict[str, list[str]]:
        """Candidate ids per category.

        ``kind`` selects the candidate pool: ``"category"`` is every image of the
        category (needs the category map), ``"split"`` every image the records
        mention, ``"targets"`` only the records' target images. ``"auto"`` means
        ``"category"`` when a category map exists and ``"split"`` otherwise.
        """
        if kind == "auto":
            kind = "category" if self.image_categories is not None else "split"
        cats = sorted({r.category for r in records})
        if kind == "category":
            if self.image_categories is None:
                raise ContractError(f"{self.root} has no {CATEGORIES_FILE}; category galleries unavailable")
            by_cat = {c: [] for c in cats}
            for image_id in sorted(self.image_categories):
                c = self.image_categories[image_id]
                if c in by_cat:
                    by_cat[c].append(image_id)
            return by_cat
        if kind not in ("split", "targets"):
            raise ContractError(f"unknown gallery kind {kind!r}")
        pools = {c: set() for c in cats}
        for r in records:
            pools[r.category].add(r.trg_id)
            if kind == "split":
                pools[r.category].add(r.ref_id)
        return {c: sorted(ids) for c, ids in pools.items()}


def load_dataset(root) -> Dataset:
    root = Path(root)
    cats = None
    if (root / CATEGORIES_FILE).exists():
        cats = json.loads((root / CATEGORIES_FILE).read_text())
    return Dataset(root, load_feature_store(root), WordVectorTable.load(root / WORDS_FILE), cats)
