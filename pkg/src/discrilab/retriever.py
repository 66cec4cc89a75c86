"""The frozen discriminator: text/image encoders, match score, retrieval
criterion, hard-negative mining, and study neighbor-set construction.

The text side is a bag of frozen token embeddings (order-free sum), the
image side an identity or frozen linear map. In oracle mode each
attribute-value token row equals that value's one-hot block, so the
descriptive caption of an item scores exactly one point per named slot
and the reward landscape has a known optimum.

Nothing here is ever updated by training; `checksum()` exists so tests can
prove it.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError
from .world import Caption, N_SPECIAL, World

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CandidateSet:
    """One target plus its distractor ids, with provenance."""

    target_id: int
    distractor_ids: tuple[int, ...]
    provenance: str  # in-batch-random | mined-hard | neighbor-set

    def __post_init__(self):
        if self.target_id in self.distractor_ids:
            raise ValueError(f"target {self.target_id} appears among distractors")
        if len(set(self.distractor_ids)) != len(self.distractor_ids):
            raise ValueError("duplicate distractor ids")


class Retriever:
    """Frozen dual encoder. Construct via oracle_retriever or random_retriever."""

    def __init__(self, text_table: np.ndarray, image_map: np.ndarray | None):
        self._text_table = np.asarray(text_table, dtype=np.float64)
        self._image_map = None if image_map is None else np.asarray(image_map, dtype=np.float64)
        self._text_table.setflags(write=False)
        if self._image_map is not None:
            self._image_map.setflags(write=False)

    @property
    def text_dim(self) -> int:
        return self._text_table.shape[1]

    def encode_text(self, caption: Caption | Sequence[int]) -> np.ndarray:
        """Sum of frozen token rows; BOS/EOS/PERIOD contribute zero."""
        tokens = caption.tokens if isinstance(caption, Caption) else tuple(caption)
        out = np.zeros(self.text_dim)
        for tok in tokens:
            if tok >= N_SPECIAL:
                out += self._text_table[tok]
        return out

    def encode_image(self, embedding: np.ndarray) -> np.ndarray:
        if self._image_map is None:
            return np.asarray(embedding, dtype=np.float64)
        return self._image_map @ np.asarray(embedding, dtype=np.float64)

    def match(self, caption, image_embedding: np.ndarray) -> float:
        """Dot product of the encoded caption and the encoded image."""
        return float(self.encode_text(caption) @ self.encode_image(image_embedding))

    def retrieved(self, caption, target_embedding: np.ndarray,
                  distractor_embeddings: Iterable[np.ndarray]) -> bool:
        """True iff the target match strictly exceeds every distractor match.

        Exact ties count as failure; an empty distractor set is vacuously
        retrieved.
        """
        text = self.encode_text(caption)
        target_score = float(text @ self.encode_image(target_embedding))
        for emb in distractor_embeddings:
            if not target_score > float(text @ self.encode_image(emb)):
                return False
        return True

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self._text_table.tobytes())
        if self._image_map is not None:
            h.update(self._image_map.tobytes())
        return h.hexdigest()


def oracle_retriever(world: World) -> Retriever:
    """Text table whose attribute-value rows are the matching one-hot blocks.

    All non-attribute tokens (specials, hypernyms, fillers) map to the zero
    vector; the image map is the identity.
    """
    dim = world.embedding_dim
    table = np.zeros((len(world.vocab), dim))
    for slot, token_ids in enumerate(world.attr_token_ids):
        offset = int(world._block_offsets[slot])
        for value, tid in enumerate(token_ids):
            table[tid, offset + value] = 1.0
    return Retriever(table, None)


def random_retriever(vocab_size: int, image_dim: int, text_dim: int, seed: int) -> Retriever:
    """Frozen random encoders for non-oracle experiments."""
    rng = np.random.default_rng(seed)
    table = rng.standard_normal((vocab_size, text_dim)) / np.sqrt(text_dim)
    table[:N_SPECIAL] = 0.0
    image_map = rng.standard_normal((text_dim, image_dim)) / np.sqrt(image_dim)
    return Retriever(table, image_map)


def _cosine_to_target(embeddings: Mapping[int, np.ndarray], target_id: int,
                      candidates: Iterable[int]) -> tuple[list[tuple[float, int]], int]:
    """(cosine, id) pairs for candidates with nonzero norm; returns skip count."""
    target = np.asarray(embeddings[target_id], dtype=np.float64)
    t_norm = float(np.linalg.norm(target))
    if t_norm == 0.0:
        raise DataError(f"target {target_id} has a zero-norm embedding")
    ids = [cid for cid in candidates if cid != target_id]
    if not ids:
        return [], 0
    mat = np.stack([np.asarray(embeddings[cid], dtype=np.float64) for cid in ids])
    norms = np.linalg.norm(mat, axis=1)
    skipped = int(np.count_nonzero(norms == 0.0))
    if skipped:
        logger.warning("excluded %d zero-norm embeddings from cosine ranking", skipped)
    keep = norms > 0.0
    cos = (mat[keep] @ target) / (norms[keep] * t_norm)
    kept_ids = [cid for cid, ok in zip(ids, keep) if ok]
    return [(float(c), cid) for c, cid in zip(cos, kept_ids)], skipped


def mine_hard(embeddings: Mapping[int, np.ndarray], target_id: int,
              pool: Iterable[int], k: int) -> list[int]:
    """The k pool ids most cosine-similar to the target, ties to lower id."""
    pool = list(pool)
    if len(pool) <= k:
        raise DataError(f"pool of {len(pool)} cannot supply {k} distractors")
    scored, _ = _cosine_to_target(embeddings, target_id, pool)
    if len(scored) < k:
        raise DataError(f"only {len(scored)} rankable candidates for k={k}")
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    return [cid for _, cid in scored[:k]]


def neighbor_set(embeddings: Mapping[int, np.ndarray], target_id: int,
                 n: int = 9, cap: float = 0.8,
                 pool: Iterable[int] | None = None) -> CandidateSet:
    """The n nearest neighbors with cosine <= cap (near-duplicates excluded).

    Candidates with cosine strictly above the cap are dropped; exactly-cap
    candidates stay in. Ties break toward the lower id.
    """
    if pool is None:
        pool = embeddings.keys()
    scored, _ = _cosine_to_target(embeddings, target_id, pool)
    eligible = [(cos, cid) for cos, cid in scored if cos <= cap]
    if len(eligible) < n:
        raise DataError(
            f"only {len(eligible)} candidates at cosine <= {cap} for target "
            f"{target_id}, need {n}")
    eligible.sort(key=lambda pair: (-pair[0], pair[1]))
    return CandidateSet(target_id=target_id,
                        distractor_ids=tuple(cid for _, cid in eligible[:n]),
                        provenance="neighbor-set")
