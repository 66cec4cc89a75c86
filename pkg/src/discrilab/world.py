"""Synthetic referential world: attribute items, their embeddings, and
styled reference captions.

Items enumerate the full Cartesian product of attribute slots. A clean item
embedding is the concatenation of one-hot encodings of its attribute values,
which makes the frozen bag-of-tokens retriever an analytic oracle: the
descriptive caption of an item is a known maximizer of its match score.

Also owns the binary embedding-table file format (magic "DEMB") used to feed
externally encoded images into evaluation and study construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, DataError

BOS_ID = 0
EOS_ID = 1
PERIOD_ID = 2
N_SPECIAL = 3

MAX_CAPTION_TOKENS = 40

FILLER_TOKENS = (("a", "DET"), ("stock", "ADJ"), ("photo", "NOUN"))


@dataclass(frozen=True)
class Caption:
    """A bounded token-id sequence, optionally with per-token log-probs."""

    tokens: tuple[int, ...]
    token_logprobs: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.tokens) > MAX_CAPTION_TOKENS:
            raise ValueError(f"caption exceeds {MAX_CAPTION_TOKENS} tokens: {len(self.tokens)}")
        if BOS_ID in self.tokens:
            raise ValueError("BOS must not appear inside a caption body")
        if self.token_logprobs is not None and len(self.token_logprobs) != len(self.tokens):
            raise ValueError("token_logprobs length differs from tokens")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class SlotSpec:
    """One attribute slot: a name, its value vocabulary, and analysis tags."""

    name: str
    values: tuple[str, ...]
    hypernym: str
    pos: str = "ADJ"


def default_slots() -> tuple[SlotSpec, ...]:
    return (
        SlotSpec("color", ("red", "green", "blue", "black",
                           "pink", "yellow", "purple", "white"), "thing", "ADJ"),
        SlotSpec("shape", ("cube", "sphere", "cone", "ring",
                           "star", "disk", "arch", "wedge"), "object", "NOUN"),
        SlotSpec("size", ("tiny", "small", "big", "huge"), "item", "ADJ"),
    )


@dataclass(frozen=True)
class WorldConfig:
    slots: tuple[SlotSpec, ...] = field(default_factory=default_slots)
    noise_sigma: float = 0.0
    seed: int = 0
    split_fraction: float = 0.8
    max_items: int = 10 ** 6

    def validate(self) -> None:
        if len(self.slots) < 2:
            raise ConfigError("need at least 2 attribute slots")
        for s in self.slots:
            if len(s.values) < 2:
                raise ConfigError(f"slot {s.name!r} needs at least 2 values")
        if not (0.0 <= self.split_fraction <= 1.0):
            raise ConfigError(f"split_fraction out of [0,1]: {self.split_fraction}")
        n = 1
        for s in self.slots:
            n *= len(s.values)
        if n > self.max_items:
            raise ConfigError(f"world size {n} exceeds cap {self.max_items}; refusing")


class Vocab:
    """Dense token-id table. Ids 0/1/2 are fixed to BOS/EOS/PERIOD."""

    def __init__(self, tokens: list[str], pos_tags: list[str]):
        if tokens[:N_SPECIAL] != ["<bos>", "<eos>", "."]:
            raise ValueError("vocab must start with BOS, EOS, PERIOD")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate token strings in vocab")
        self.tokens = tuple(tokens)
        self.pos_tags = tuple(pos_tags)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def n_emittable(self) -> int:
        """Tokens the policy may emit (everything but BOS and EOS)."""
        return len(self.tokens) - 2

    def id_of(self, token: str) -> int:
        return self.token_to_id[token]


@dataclass(frozen=True)
class Item:
    id: int
    attributes: tuple[int, ...]
    embedding: np.ndarray


@dataclass(frozen=True)
class CaptionStyle:
    kind: str  # descriptive | vague | abstract
    drop_probability: float = 0.5

    def __post_init__(self):
        if self.kind not in ("descriptive", "vague", "abstract"):
            raise ConfigError(f"unknown caption style {self.kind!r}")
        if not (0.0 <= self.drop_probability <= 1.0):
            raise ConfigError("drop_probability out of [0,1]")


class World:
    """Immutable generated world; safe to share across threads."""

    def __init__(self, config: WorldConfig, vocab: Vocab, items: list[Item],
                 train_ids: tuple[int, ...], test_ids: tuple[int, ...]):
        self.config = config
        self.slots = config.slots
        self.vocab = vocab
        self.items = items
        self.train_ids = train_ids
        self.test_ids = test_ids
        # token id of (slot s, value v), hypernym per slot, filler ids
        self.attr_token_ids = []
        next_id = N_SPECIAL
        for s in self.slots:
            self.attr_token_ids.append(tuple(range(next_id, next_id + len(s.values))))
            next_id += len(s.values)
        self.hypernym_ids = tuple(range(next_id, next_id + len(self.slots)))
        next_id += len(self.slots)
        self.filler_ids = tuple(range(next_id, next_id + len(FILLER_TOKENS)))
        self._block_offsets = np.cumsum([0] + [len(s.values) for s in self.slots])

    @property
    def embedding_dim(self) -> int:
        return int(self._block_offsets[-1])

    def embeddings(self) -> dict[int, np.ndarray]:
        return {it.id: it.embedding for it in self.items}

    def attribute_value_token(self, slot: int, value: int) -> int:
        return self.attr_token_ids[slot][value]

    def attribute_value_token_ids(self) -> set[int]:
        return {tid for slot in self.attr_token_ids for tid in slot}


def _build_vocab(slots: Iterable[SlotSpec]) -> Vocab:
    tokens = ["<bos>", "<eos>", "."]
    pos = ["SPECIAL", "SPECIAL", "PUNCT"]
    seen = set(tokens)
    for s in slots:
        for v in s.values:
            name = v if v not in seen else f"{s.name}:{v}"
            tokens.append(name)
            pos.append(s.pos)
            seen.add(name)
    for s in slots:
        name = s.hypernym if s.hypernym not in seen else f"{s.name}:{s.hypernym}"
        tokens.append(name)
        pos.append("NOUN")
        seen.add(name)
    for f, p in FILLER_TOKENS:
        tokens.append(f)
        pos.append(p)
    return Vocab(tokens, pos)


def generate_world(config: WorldConfig) -> World:
    """Enumerate the full attribute product, embed, and split train/test.

    Deterministic given config.seed: noise draws happen in item-id order,
    then one permutation decides the split.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    sizes = [len(s.values) for s in config.slots]
    dim = sum(sizes)
    offsets = np.cumsum([0] + sizes)

    items: list[Item] = []
    n_items = int(np.prod(sizes))
    for item_id in range(n_items):
        rem = item_id
        attrs = []
        for size in reversed(sizes):
            attrs.append(rem % size)
            rem //= size
        attrs = tuple(reversed(attrs))
        emb = np.zeros(dim)
        for slot, val in enumerate(attrs):
            emb[offsets[slot] + val] = 1.0
        if config.noise_sigma > 0:
            emb = emb + config.noise_sigma * rng.standard_normal(dim)
        items.append(Item(item_id, attrs, emb))

    perm = rng.permutation(n_items)
    n_train = int(round(config.split_fraction * n_items))
    train_ids = tuple(sorted(int(i) for i in perm[:n_train]))
    test_ids = tuple(sorted(int(i) for i in perm[n_train:]))
    return World(config, _build_vocab(config.slots), items, train_ids, test_ids)


def reference_caption(world: World, item: Item, style: CaptionStyle,
                      rng: np.random.Generator | None = None) -> Caption:
    """A styled ground-truth caption for `item`.

    descriptive: every attribute value, in slot order, then PERIOD.
    vague: drops each non-final attribute independently with
        drop_probability; the final attribute always survives.
    abstract: every attribute replaced by its slot hypernym, fillers
        appended, then PERIOD. Carries zero attribute-value tokens.
    """
    n_slots = len(world.slots)
    if style.kind == "descriptive":
        body = [world.attribute_value_token(s, item.attributes[s]) for s in range(n_slots)]
    elif style.kind == "vague":
        if style.drop_probability > 0 and rng is None:
            raise ValueError("vague style with drop_probability > 0 needs an rng")
        body = []
        for s in range(n_slots):
            final = s == n_slots - 1
            if final or style.drop_probability == 0 or rng.random() >= style.drop_probability:
                body.append(world.attribute_value_token(s, item.attributes[s]))
    else:  # abstract
        body = list(world.hypernym_ids) + list(world.filler_ids)
    return Caption(tokens=tuple(body) + (PERIOD_ID,))


def save_world(path, world: World) -> None:
    """Self-describing world dump; loading regenerates from the config."""
    import json
    obj = {
        "slots": [{"name": s.name, "values": list(s.values),
                   "hypernym": s.hypernym, "pos": s.pos} for s in world.slots],
        "noise_sigma": world.config.noise_sigma,
        "seed": world.config.seed,
        "split_fraction": world.config.split_fraction,
        "max_items": world.config.max_items,
        "n_items": len(world.items),
        "vocab": list(world.vocab.tokens),
        "items": [{"id": it.id, "attributes": list(it.attributes)}
                  for it in world.items],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh)


def load_world(path) -> World:
    import json
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
        slots = tuple(SlotSpec(s["name"], tuple(s["values"]), s["hypernym"], s["pos"])
                      for s in obj["slots"])
        config = WorldConfig(slots=slots, noise_sigma=obj["noise_sigma"],
                             seed=obj["seed"], split_fraction=obj["split_fraction"],
                             max_items=obj["max_items"])
    except (KeyError, TypeError, ValueError) as err:
        raise DataError(f"bad world file {path}: {err}") from err
    world = generate_world(config)
    if len(world.items) != obj["n_items"] or list(world.vocab.tokens) != obj["vocab"]:
        raise DataError(f"world file {path} disagrees with its regeneration")
    return world


# --- embedding table file format -------------------------------------------

_DEMB_MAGIC = b"DEMB"
_DEMB_VERSION = 1


class EmbeddingFormatError(DataError):
    """Base class for embedding-file parse failures."""


class EmbeddingMagicError(EmbeddingFormatError):
    pass


class EmbeddingDimensionError(EmbeddingFormatError):
    pass


class EmbeddingTruncatedError(EmbeddingFormatError):
    pass


class EmbeddingDuplicateIdError(EmbeddingFormatError):
    pass


def save_embeddings(path, table: Mapping[int, np.ndarray]) -> None:
    """Write an id -> vector table. Vectors are stored as float32."""
    ids = sorted(table)
    if not ids:
        raise EmbeddingDimensionError("refusing to write an empty embedding table")
    dim = len(np.asarray(table[ids[0]]).ravel())
    with open(path, "wb") as fh:
        fh.write(_DEMB_MAGIC)
        fh.write(struct.pack("<H", _DEMB_VERSION))
        fh.write(struct.pack("<I", dim))
        fh.write(struct.pack("<Q", len(ids)))
        for item_id in ids:
            vec = np.asarray(table[item_id], dtype=np.float32).ravel()
            if vec.size != dim:
                raise EmbeddingDimensionError(
                    f"vector for id {item_id} has dim {vec.size}, table dim is {dim}")
            fh.write(struct.pack("<Q", item_id))
            fh.write(vec.tobytes())


def load_embeddings(path, expect_dim: int | None = None) -> dict[int, np.ndarray]:
    """Read a DEMB file back into id -> float64 vector."""
    with open(path, "rb") as fh:
        raw = fh.read()
    header = struct.calcsize("<4sHIQ")
    if len(raw) < header:
        raise EmbeddingTruncatedError(
            f"file too short for header: {len(raw)} bytes, need {header}")
    magic, version, dim, count = struct.unpack_from("<4sHIQ", raw, 0)
    if magic != _DEMB_MAGIC:
        raise EmbeddingMagicError(f"bad magic {magic!r}, expected {_DEMB_MAGIC!r}")
    if version != _DEMB_VERSION:
        raise EmbeddingMagicError(f"unsupported version {version}")
    if expect_dim is not None and dim != expect_dim:
        raise EmbeddingDimensionError(f"file dim {dim} != expected {expect_dim}")
    record = struct.calcsize("<Q") + 4 * dim
    expected = header + count * record
    if len(raw) != expected:
        raise EmbeddingTruncatedError(
            f"payload size mismatch: expected {expected} bytes, got {len(raw)}")
    table: dict[int, np.ndarray] = {}
    off = header
    for _ in range(count):
        (item_id,) = struct.unpack_from("<Q", raw, off)
        off += 8
        vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=off).astype(np.float64)
        off += 4 * dim
        if item_id in table:
            raise EmbeddingDuplicateIdError(f"duplicate id {item_id}")
        table[item_id] = vec
    return table
