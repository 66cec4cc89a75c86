"""Evaluation stack: retrieval P@1, corpus BLEU@4, plain CIDEr, and the
local Mutual Information lemma-association analysis.

All metrics are pure functions over immutable corpora. Caption tokens are
arbitrary hashables (tests use strings); the LMI analysis consumes
pre-lemmatized, POS-tagged corpora in the JSON Lines format written by
write_tagged_corpus.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError
from .retriever import Retriever

logger = logging.getLogger(__name__)

# Universal POS inventory plus the local SPECIAL tag for BOS/EOS rows.
KNOWN_POS = {"ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM",
             "PART", "PRON", "PROPN", "PUNCT", "SCONJ", "SYM", "VERB", "X",
             "SPECIAL"}
ANALYSIS_POS = ("ADJ", "NOUN")


def precision_at_1(retr: Retriever, captions: Sequence[tuple], embeddings: Mapping,
                   pool_ids: Sequence[int], n_candidates: int = 100,
                   rng: np.random.Generator | None = None) -> float:
    """Fraction of (caption, target_id) pairs strictly retrieved among
    n_candidates, with the n_candidates - 1 distractors drawn without
    replacement from the pool. Deterministic for a seeded rng."""
    if len(pool_ids) < n_candidates:
        raise DataError(f"pool of {len(pool_ids)} cannot seat {n_candidates} candidates")
    if rng is None:
        rng = np.random.default_rng(0)
    if not captions:
        raise DataError("no captions to evaluate")
    hits = 0
    for caption, target_id in captions:
        others = [i for i in pool_ids if i != target_id]
        picks = rng.choice(len(others), size=n_candidates - 1, replace=False)
        distractors = [embeddings[others[int(p)]] for p in picks]
        if retr.retrieved(caption, embeddings[target_id], distractors):
            hits += 1
    return hits / len(captions)


def _ngram_counts(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidates: Sequence[Sequence], references: Sequence[Sequence[Sequence]]) -> float:
    """Corpus-level BLEU@4, unsmoothed, scaled to 0..100.

    Modified n-gram precisions are clipped per sentence against the
    per-reference maximum count and aggregated over the corpus; the
    brevity penalty uses the per-sentence closest reference length
    (ties toward the shorter reference).
    """
    if len(candidates) != len(references):
        raise DataError("one reference list per candidate required")
    if not candidates:
        raise DataError("empty corpus")
    matches = [0] * 4
    totals = [0] * 4
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise DataError("every candidate needs at least one reference")
        cand = list(cand)
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            counts = _ngram_counts(cand, n)
            max_ref: Counter = Counter()
            for r in refs:
                for g, c in _ngram_counts(list(r), n).items():
                    if c > max_ref[g]:
                        max_ref[g] = c
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += max(0, len(cand) - n + 1)
    if any(t == 0 or m == 0 for m, t in zip(matches, totals)):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matches, totals)) / 4.0
    bp = min(1.0, math.exp(1.0 - ref_len / cand_len)) if cand_len > 0 else 0.0
    return 100.0 * bp * math.exp(log_precision)


def _tfidf(tokens: Sequence, n: int, doc_freq: Mapping, n_images: int) -> dict:
    counts = _ngram_counts(tokens, n)
    total = sum(counts.values())
    if total == 0:
        return {}
    return {g: (c / total) * math.log(n_images / max(1.0, doc_freq.get(g, 0.0)))
            for g, c in counts.items()}


def _cosine_sparse(u: Mapping, v: Mapping) -> float:
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    dot = sum(x * v[g] for g, x in u.items() if g in v)
    return dot / (nu * nv)


def cider(candidates: Sequence[Sequence], references: Sequence[Sequence[Sequence]]) -> float:
    """Plain CIDEr: mean over n = 1..4 of the average TF-IDF cosine between
    the candidate and each reference, scaled by 10 and averaged over images.

    IDF is log(|images| / image-frequency) over the reference corpus, with
    the frequency of corpus-unseen n-grams clipped to 1.
    """
    if len(candidates) != len(references):
        raise DataError("one reference list per candidate required")
    if not candidates:
        raise DataError("empty corpus")
    n_images = len(references)
    doc_freq: list[Counter] = [Counter() for _ in range(4)]
    for refs in references:
        for n in range(1, 5):
            seen = set()
            for r in refs:
                seen.update(_ngram_counts(list(r), n).keys())
            for g in seen:
                doc_freq[n - 1][g] += 1
    score = 0.0
    for cand, refs in zip(candidates, references):
        per_n = []
        for n in range(1, 5):
            cand_vec = _tfidf(list(cand), n, doc_freq[n - 1], n_images)
            sims = [_cosine_sparse(cand_vec, _tfidf(list(r), n, doc_freq[n - 1], n_images))
                    for r in refs]
            per_n.append(sum(sims) / len(sims))
        score += 10.0 * sum(per_n) / 4.0
    return score / len(candidates)


# --- local Mutual Information analysis --------------------------------------

@dataclass(frozen=True)
class TaggedCaption:
    caption_id: int
    caption_type: str
    tokens: tuple[tuple[str, str], ...]  # (lemma, POS)


@dataclass(frozen=True)
class LmiEntry:
    lemma: str
    pos: str
    caption_type: str
    lmi: float
    count: int


def write_tagged_corpus(path, captions: Iterable[TaggedCaption]) -> None:
    """One JSON object per caption: {"id", "type", "tokens": [{lemma, pos}]}."""
    with open(path, "w", encoding="utf-8") as fh:
        for cap in captions:
            fh.write(json.dumps({
                "id": cap.caption_id,
                "type": cap.caption_type,
                "tokens": [{"lemma": l, "pos": p} for l, p in cap.tokens],
            }) + "\n")


def read_tagged_corpus(path) -> list[TaggedCaption]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append(TaggedCaption(
                    caption_id=int(obj["id"]),
                    caption_type=str(obj["type"]),
                    tokens=tuple((str(t["lemma"]), str(t["pos"])) for t in obj["tokens"]),
                ))
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as err:
                raise DataError(f"{path}:{line_no}: bad tagged-caption record: {err}") from err
    return out


def local_mi(corpora: Sequence[TaggedCaption],
             pos_tags: Sequence[str] = ANALYSIS_POS) -> list[LmiEntry]:
    """Count-weighted LMI(l, t) = f(l,t) * log2(f(l,t) * N / (f(l) * f(t))).

    Counts are taken over the pooled corpus restricted to `pos_tags`
    (lemmas keyed per POS); N is that pooled token total. Pairs with zero
    joint count are omitted. Tokens with tags outside the known inventory
    are ignored and counted in a warning.
    """
    types = {c.caption_type for c in corpora}
    if len(types) < 2:
        raise DataError(f"need >= 2 caption types, got {sorted(types)}")
    keep = set(pos_tags)
    joint: Counter = Counter()   # (lemma, pos, type)
    lemma_f: Counter = Counter()  # (lemma, pos)
    type_f: Counter = Counter()
    unknown = 0
    total = 0
    for cap in corpora:
        for lemma, pos in cap.tokens:
            if pos not in KNOWN_POS:
                unknown += 1
                continue
            if pos not in keep:
                continue
            joint[(lemma, pos, cap.caption_type)] += 1
            lemma_f[(lemma, pos)] += 1
            type_f[cap.caption_type] += 1
            total += 1
    if unknown:
        logger.warning("ignored %d tokens with unknown POS tags", unknown)
    entries = []
    for (lemma, pos, ctype), f_lt in joint.items():
        score = f_lt * math.log2(f_lt * total / (lemma_f[(lemma, pos)] * type_f[ctype]))
        entries.append(LmiEntry(lemma, pos, ctype, score, f_lt))
    entries.sort(key=lambda e: (-e.lmi, e.lemma, e.pos, e.caption_type))
    return entries


def top_associated(entries: Sequence[LmiEntry], caption_type: str, pos: str | None,
                   k: int = 10) -> list[LmiEntry]:
    """Top-k entries for a caption type by LMI, ties by lemma; pos=None pools POS."""
    picked = [e for e in entries
              if e.caption_type == caption_type and (pos is None or e.pos == pos)]
    picked.sort(key=lambda e: (-e.lmi, e.lemma))
    return picked[:k]


def write_lmi_csv(path, entries: Sequence[LmiEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("type,pos,lemma,lmi,count\n")
        for e in entries:
            fh.write(f"{e.caption_type},{e.pos},{e.lemma},{e.lmi:.6f},{e.count}\n")


def metric_report(p_at_1: float | None, bleu: float | None, cider_score: float | None) -> dict:
    return {"p_at_1": p_at_1, "bleu4": bleu, "cider": cider_score}
