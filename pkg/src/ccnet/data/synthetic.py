"""
Synthetic attribute-structured retrieval data.

Each image is a point of V^A (one value per attribute). Attribute 0 is a global
attribute: its pattern is added to every cell of the spatial map and a second
pattern encodes it in the intermediate vector. Every other attribute writes its
pattern into one of the 3x3 spatial slice regions. Category is derived from
attribute 0, so flips never leave the category.

A triplet flips one or two attributes of a reference image and names the new
values in its captions; the target is the unique image carrying the flipped
attribute vector.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InfeasibleSpecError
from .features import FeatureStore, load_feature_store, write_feature_store
from .triplets import SEPARATOR, TripletRecord, write_triplets
from .wordvec import WordVectorTable

# (row_start, row_stop, col_start, col_stop) on the 7x7 grid
SLICES = {
    "top": (0, 3, 2, 5),
    "left": (2, 5, 0, 3),
    "center": (2, 5, 2, 5),
    "right": (2, 5, 4, 7),
    "bottom": (4, 7, 2, 5),
}
REGION_ORDER = ("top", "bottom", "left", "right", "center")

ATTRIBUTES = [
    ("color", ["red", "blue", "green", "yellow", "black", "white", "pink", "purple"]),
    ("neckline", ["vneck", "crew", "collared", "halter", "scoop", "strapless", "cowl", "boat"]),
    ("hem", ["ruffled", "straight", "asymmetric", "fringed", "scalloped", "tiered", "slit", "frayed"]),
    ("sleeves", ["sleeveless", "short", "long", "capped", "puffy", "rolled", "flared", "bell"]),
    ("pocket", ["zipped", "patched", "hidden", "flapped", "welted", "buttoned", "slanted", "kangaroo"]),
    ("print", ["floral", "striped", "plaid", "dotted", "solid", "checkered", "paisley", "camo"]),
]
TEMPLATES = {
    "color": ["is {v}", "make it {v}", "is {v} colored"],
    None: ["has {v} {a}", "with {v} {a}", "change the {a} to {v}"],
}
CATEGORIES = ("dress", "shirt", "toptee")
SPLIT_ORDER = ("train", "val", "test")


@dataclass
class SyntheticSpec:
    n_attributes: int = 4
    n_values: int = 6
    n_images: int = 1296
    splits: dict = field(default_factory=lambda: {"train": 3000, "val": 200, "test": 500})
    noise: float = 0.05
    seed: int = 0
    channels: int = 32
    inter_channels: int = 32
    word_dim: int = 300
    height: int = 7
    width: int = 7
    categories: tuple = CATEGORIES
    max_flips: int = 2

    def __post_init__(self):
        self.categories = tuple(self.categories)
        self.splits = dict(self.splits)

    def to_json(self) -> str:
        d = asdict(self)
        d["categories"] = list(self.categories)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InfeasibleSpecError(f"unknown spec fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SyntheticSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _check(spec: SyntheticSpec):
    a, v = spec.n_attributes, spec.n_values
    if not 1 <= a <= 1 + len(REGION_ORDER):
        raise InfeasibleSpecError(f"n_attributes must be in 1..{1 + len(REGION_ORDER)}, got {a}")
    if v < 2:
        raise InfeasibleSpecError("n_values must be at least 2")
    if spec.n_images != v ** a:
        raise InfeasibleSpecError(
            f"n_images={spec.n_images} cannot cover V^A={v ** a} attribute vectors uniquely"
        )
    if (spec.height, spec.width) != (7, 7):
        raise InfeasibleSpecError("the slice layout needs a 7x7 spatial map")
    if not 1 <= len(spec.categories) <= v:
        raise InfeasibleSpecError("need between 1 and n_values categories")
    if spec.max_flips not in (1, 2) or spec.max_flips > a:
        raise InfeasibleSpecError("max_flips must be 1 or 2 and at most n_attributes")
    if a == 1 and v < 2 * len(spec.categories):
        raise InfeasibleSpecError("single-attribute spec needs an in-category alternative value")


class SyntheticWorld:
    """The generative mapping fixed by a spec: patterns, vocabulary, id layout."""

    def __init__(self, spec: SyntheticSpec):
        _check(spec)
        self.spec = spec
        a, v, c = spec.n_attributes, spec.n_values, spec.channels
        rng = np.random.default_rng([spec.seed, 0])
        self.patterns = _unit(rng.standard_normal((a, v, c)))
        self.inter_patterns = _unit(rng.standard_normal((v, spec.inter_channels)))
        # shuffled id -> attribute-vector assignment
        self.perm = rng.permutation(spec.n_images)
        self.regions = ["global"] + list(REGION_ORDER[: a - 1])

        self.attr_names, self.value_words = [], []
        for i in range(a):
            name, words = ATTRIBUTES[i]
            if v > len(words):
                words = words + [f"{name}{k}" for k in range(len(words), v)]
            self.attr_names.append(name)
            self.value_words.append(words[:v])
        self.word_to_flip = {
            w: (i, k) for i, words in enumerate(self.value_words) for k, w in enumerate(words)
        }
        vocab = [SEPARATOR]
        for i in range(a):
            for tpl in TEMPLATES.get(self.attr_names[i], TEMPLATES[None]):
                vocab += tpl.format(v="", a=self.attr_names[i]).split()
            vocab += self.value_words[i]
        self.vocab = list(dict.fromkeys(vocab))
        wrng = np.random.default_rng([spec.seed, 3])
        vecs = _unit(wrng.standard_normal((len(self.vocab), spec.word_dim)))
        self.word_vectors = {tok: vecs[i] for i, tok in enumerate(self.vocab)}

    # id layout
    def image_id(self, index: int) -> str:
        return f"img{index:05d}"

    def attributes(self, index: int) -> tuple:
        code = int(self.perm[index])
        out = []
        for _ in range(self.spec.n_attributes):
            out.append(code % self.spec.n_values)
            code //= self.spec.n_values
        return tuple(out)

    def index_of(self, attrs) -> int:
        code = 0
        for val in reversed(attrs):
            code = code * self.spec.n_values + int(val)
        return int(self._inverse_perm[code])

    @property
    def _inverse_perm(self):
        inv = getattr(self, "_inv", None)
        if inv is None:
            inv = np.empty_like(self.perm)
            inv[self.perm] = np.arange(len(self.perm))
            self._inv = inv
        return inv

    def category(self, attrs) -> str:
        return self.spec.categories[attrs[0] % len(self.spec.categories)]

    # rendering
    def render(self, index: int, noise: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        spec = self.spec
        noise = spec.noise if noise is None else noise
        attrs = self.attributes(index)
        fmap = np.zeros((spec.height, spec.width, spec.channels))
        fmap += self.patterns[0, attrs[0]]
        for a in range(1, spec.n_attributes):
            r0, r1, c0, c1 = SLICES[self.regions[a]]
            fmap[r0:r1, c0:c1] += self.patterns[a, attrs[a]]
        inter = self.inter_patterns[attrs[0]].copy()
        if noise > 0:
            rng = np.random.default_rng([spec.seed, 1, index])
            fmap += rng.uniform(-noise, noise, size=fmap.shape)
            inter += rng.uniform(-noise, noise, size=inter.shape)
        return fmap, inter

    def caption(self, attr: int, value: int, rng) -> str:
        name = self.attr_names[attr]
        templates = TEMPLATES.get(name, TEMPLATES[None])
        tpl = templates[int(rng.integers(len(templates)))]
        return tpl.format(v=self.value_words[attr][value], a=name)

    def make_triplets(self, n: int, rng, seen: set) -> list[TripletRecord]:
        spec = self.spec
        ncat = len(spec.categories)
        out = []
        attempts = 0
        while len(out) < n:
            attempts += 1
            if attempts > 100 * n + 10_000:
                raise InfeasibleSpecError("could not draw enough distinct triplets")
            ref = int(rng.integers(spec.n_images))
            attrs = list(self.attributes(ref))
            k = int(rng.integers(1, spec.max_flips + 1))
            flippable = [a for a in range(spec.n_attributes) if a > 0 or spec.n_values >= 2 * ncat]
            if k > len(flippable):
                continue
            chosen = sorted(rng.choice(flippable, size=k, replace=False).tolist())
            new = list(attrs)
            for a in chosen:
                if a == 0:
                    options = [x for x in range(spec.n_values) if x % ncat == attrs[0] % ncat and x != attrs[0]]
                else:
                    options = [x for x in range(spec.n_values) if x != attrs[a]]
                new[a] = int(options[int(rng.integers(len(options)))])
            key = (ref, tuple(new))
            if key in seen:
                continue
            seen.add(key)
            order = list(chosen)
            rng.shuffle(order)
            caps = tuple(tuple(self.caption(a, new[a], rng).split()) for a in order)
            trg = self.index_of(new)
            out.append(
                TripletRecord(self.image_id(ref), self.image_id(trg), caps, self.category(attrs))
            )
        return out


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@dataclass
class SyntheticDataset:
    store: FeatureStore
    splits: dict
    words: WordVectorTable
    world: SyntheticWorld

    def image_categories(self) -> dict:
        w = self.world
        return {w.image_id(i): w.category(w.attributes(i)) for i in range(w.spec.n_images)}


def generate_synthetic(spec: SyntheticSpec, out_dir=None) -> SyntheticDataset:
    """Render every image, draw triplet splits and word vectors.

    With ``out_dir`` the dataset is written there (feature store, one JSON-lines
    file per split, ``wordvecs.txt`` and ``synth_spec.json``) and the returned
    store is the reloaded on-disk one.
    """
    world = SyntheticWorld(spec)
    maps, inter = {}, {}
    for i in range(spec.n_images):
        maps[world.image_id(i)], inter[world.image_id(i)] = world.render(i)
    seen: set = set()
    splits = {}
    ordered = [s for s in SPLIT_ORDER if s in spec.splits] + sorted(
        s for s in spec.splits if s not in SPLIT_ORDER
    )
    for k, name in enumerate(ordered):
        rng = np.random.default_rng([spec.seed, 2, k])
        splits[name] = world.make_triplets(int(spec.splits[name]), rng, seen)
    words = WordVectorTable(world.word_vectors, dim=spec.word_dim)
    if out_dir is None:
        store = _memory_store(spec, maps, inter)
        return SyntheticDataset(store, splits, words, world)
    out = Path(out_dir)
    write_feature_store(out, maps, inter)
    for name, recs in splits.items():
        write_triplets(out / f"{name}.jsonl", recs)
    words.save(out / "wordvecs.txt")
    cats = SyntheticDataset(None, {}, words, world).image_categories()
    (out / "categories.json").write_text(json.dumps(cats, indent=0, sort_keys=True) + "\n")
    (out / "synth_spec.json").write_text(spec.to_json() + "\n")
    words = WordVectorTable.load(out / "wordvecs.txt")
    return SyntheticDataset(load_feature_store(out), splits, words, world)


def _memory_store(spec, maps, inter) -> FeatureStore:
    ids = list(maps)
    rec = spec.height * spec.width * spec.channels + spec.inter_channels
    data = np.empty(len(ids) * rec, dtype="<f4")
    offsets = {}
    for i, image_id in enumerate(ids):
        data[i * rec:(i + 1) * rec] = np.concatenate([maps[image_id].ravel(), inter[image_id]])
        offsets[image_id] = i * rec * 4
    return FeatureStore(spec.height, spec.width, spec.channels, spec.inter_channels, offsets, data)


class AttributeOracle:
    """Scores candidates by decoding attribute vectors with the generative mapping.

    Independent of any learned model: reads the intermediate vector for the
    global attribute, removes its background pattern, then matches each region's
    exclusive cells against the known value patterns.
    """

    def __init__(self, world: SyntheticWorld):
        self.world = world
        spec = world.spec
        self.cells = {}
        used = world.regions[1:]
        for a in range(1, spec.n_attributes):
            r0, r1, c0, c1 = SLICES[world.regions[a]]
            mine = {(r, c) for r in range(r0, r1) for c in range(c0, c1)}
            for other in used:
                if other != world.regions[a]:
                    q0, q1, p0, p1 = SLICES[other]
                    mine -= {(r, c) for r in range(q0, q1) for c in range(p0, p1)}
            self.cells[a] = sorted(mine)

    def decode(self, fmap: np.ndarray, inter: np.ndarray) -> tuple:
        w = self.world
        v0 = int(np.argmin(np.linalg.norm(w.inter_patterns - inter, axis=1)))
        attrs = [v0]
        resid = fmap - w.patterns[0, v0]
        for a in range(1, w.spec.n_attributes):
            rows, cols = zip(*self.cells[a])
            pooled = resid[list(rows), list(cols)].mean(axis=0)
            attrs.append(int(np.argmin(np.linalg.norm(w.patterns[a] - pooled, axis=1))))
        return tuple(attrs)

    def apply_caption(self, attrs, tokens) -> tuple:
        new = list(attrs)
        for tok in tokens:
            hit = self.world.word_to_flip.get(tok)
            if hit is not None:
                new[hit[0]] = hit[1]
        return tuple(new)

    def scores(self, store: FeatureStore, record: TripletRecord, gallery: list[str]) -> np.ndarray:
        ref = self.decode(*store.get(record.ref_id))
        want = self.apply_caption(ref, record.tokens)
        return np.array(
            [1.0 if self.decode(*store.get(g)) == want else 0.0 for g in gallery]
        )
