"""In-batch hard negative mining with a frozen teacher.

For every query of a batch the teacher scores M randomly drawn in-batch
negatives, the M' highest are kept, and the positive is placed in front. The
teacher's scores over that list are then permuted so the positive holds the
largest one while the set of values is unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dcd.data import Split
from dcd.errors import ConfigError
from dcd.model import ScorerParams, score_pairs


@dataclass(frozen=True)
class MiningConfig:
    M: int = 63
    M_prime: int = 7
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.M_prime <= self.M:
            raise ConfigError(f"need 1 <= M' <= M, got M={self.M}, M'={self.M_prime}")


@dataclass
class Batch:
    """K matched pairs, each used as one query in one direction.

    ``image_query[i]`` true: the image of pair ``i`` queries captions;
    false: the caption queries images. Key ids are caption rows or image rows
    of the split accordingly.
    """

    split: Split
    pairs: np.ndarray
    image_query: np.ndarray

    def __len__(self):
        return len(self.pairs)

    def query(self, i: int) -> tuple[str, int, int]:
        """(query modality, query row, positive key row)."""
        t = int(self.pairs[i])
        img = int(self.split.text_image(t))
        return ("image", img, t) if self.image_query[i] else ("text", t, img)

    def pool(self, i: int) -> np.ndarray:
        """Distinct non-matching key rows available to query ``i``, in batch order."""
        imgs = self.split.text_image(self.pairs)
        keep = imgs != imgs[i]
        keys = self.pairs[keep] if self.image_query[i] else imgs[keep]
        _, first = np.unique(keys, return_index=True)
        return keys[np.sort(first)]

    def key_features(self, i: int, keys) -> tuple[np.ndarray, np.ndarray]:
        """Row-aligned (image, text) features pairing query ``i`` with ``keys``."""
        modality, q, _ = self.query(i)
        keys = np.asarray(keys, dtype=int)
        if modality == "image":
            return np.repeat(self.split.images[q : q + 1], len(keys), 0), self.split.texts[keys]
        return self.split.images[keys], np.repeat(self.split.texts[q : q + 1], len(keys), 0)


def make_batch(split: Split, pairs, seed_key, direction: str = "mixed") -> Batch:
    pairs = np.asarray(pairs, dtype=int)
    if direction == "image":
        iq = np.ones(len(pairs), bool)
    elif direction == "text":
        iq = np.zeros(len(pairs), bool)
    elif direction == "mixed":
        iq = np.random.default_rng([*np.atleast_1d(seed_key), 7]).random(len(pairs)) < 0.5
    else:
        raise ConfigError(f"unknown query direction {direction!r}")
    return Batch(split, pairs, iq)


def query_rngs(seed_key, k: int) -> list[np.random.Generator]:
    """Independent per-query generators split from one batch seed."""
    children = np.random.SeedSequence([int(x) for x in np.atleast_1d(seed_key)]).spawn(k)
    return [np.random.default_rng(c) for c in children]


@dataclass
class CandidateList:
    query_id: int
    query_modality: str
    positive_key_id: int
    negative_key_ids: list[int]
    teacher_logits_raw: np.ndarray | None = None
    teacher_logits_adjusted: np.ndarray | None = None
    selection_provenance: list[int] = field(default_factory=list)

    @property
    def key_ids(self) -> list[int]:
        return [self.positive_key_id, *self.negative_key_ids]

    def __len__(self):
        return 1 + len(self.negative_key_ids)

    def to_record(self) -> dict:
        def _list(a):
            return None if a is None else [float(x) for x in a]

        return {
            "query_id": self.query_id,
            "query_modality": self.query_modality,
            "key_ids": self.key_ids,
            "raw": _list(self.teacher_logits_raw),
            "adjusted": _list(self.teacher_logits_adjusted),
            "provenance": list(self.selection_provenance),
        }


def sample_negatives(batch: Batch, query_index: int, M: int, rng: np.random.Generator) -> np.ndarray:
    pool = batch.pool(query_index)
    if len(pool) < M:
        raise ConfigError(f"need {M} negatives for query {query_index}, only {len(pool)} available in batch")
    return rng.choice(pool, size=M, replace=False)


def select_hard_negatives(teacher_scores, M_prime: int) -> list[int]:
    """Indices of the M' largest scores, descending, ties to the smaller index."""
    s = np.asarray(teacher_scores, dtype=float).reshape(-1)
    if not 1 <= M_prime <= s.size:
        raise ConfigError(f"M'={M_prime} must lie in [1, {s.size}]")
    return [int(i) for i in np.argsort(-s, kind="stable")[:M_prime]]


def knowledge_adjust(raw, positive_position: int = 0) -> np.ndarray:
    """Give position 0 the largest score; negatives keep their relative order.

    The remaining values, in descending order, go to the negatives ranked by
    their own raw score (stable by index). The multiset of values is unchanged.
    """
    if positive_position != 0:
        raise ConfigError("the positive must sit at position 0")
    raw = np.asarray(raw, dtype=float).reshape(-1)
    if raw.size <= 1:
        return raw.copy()
    values = np.sort(raw)[::-1]
    out = np.empty_like(raw)
    out[0] = values[0]
    neg_order = 1 + np.argsort(-raw[1:], kind="stable")
    out[neg_order] = values[1:]
    return out


def build_candidate_lists(teacher: ScorerParams, batch: Batch, config: MiningConfig, seed_key,
                          adjust: bool = True) -> list[CandidateList]:
    """Mine hard negatives for every query of ``batch`` in one teacher pass."""
    rngs = query_rngs(seed_key, len(batch))
    sampled = [sample_negatives(batch, i, config.M, rngs[i]) for i in range(len(batch))]
    feats = [batch.key_features(i, [batch.query(i)[2], *neg]) for i, neg in enumerate(sampled)]
    scores = score_pairs(teacher, np.vstack([f[0] for f in feats]), np.vstack([f[1] for f in feats]))
    scores = scores.reshape(len(batch), config.M + 1)
    out = []
    for i, neg in enumerate(sampled):
        picked = select_hard_negatives(scores[i, 1:], config.M_prime)
        raw = np.concatenate([scores[i, :1], scores[i, 1:][picked]])
        modality, q, pos = batch.query(i)
        out.append(CandidateList(
            query_id=q,
            query_modality=modality,
            positive_key_id=pos,
            negative_key_ids=[int(neg[j]) for j in picked],
            teacher_logits_raw=raw,
            teacher_logits_adjusted=knowledge_adjust(raw) if adjust else raw.copy(),
            selection_provenance=picked,
        ))
    return out


def build_candidate_list(teacher: ScorerParams, batch: Batch, query_index: int, config: MiningConfig,
                         seed_key) -> CandidateList:
    """Single-query form of :func:`build_candidate_lists` (same rng stream for that query)."""
    rng = query_rngs(seed_key, len(batch))[query_index]
    neg = sample_negatives(batch, query_index, config.M, rng)
    modality, q, pos = batch.query(query_index)
    scores = score_pairs(teacher, *batch.key_features(query_index, [pos, *neg]))
    picked = select_hard_negatives(scores[1:], config.M_prime)
    raw = np.concatenate([scores[:1], scores[1:][picked]])
    return CandidateList(q, modality, pos, [int(neg[j]) for j in picked], raw, knowledge_adjust(raw), picked)


def random_candidate_lists(batch: Batch, M_prime: int, seed_key,
                           teacher: ScorerParams | None = None) -> list[CandidateList]:
    """Positive plus M' uniformly drawn negatives per query; teacher logits left raw."""
    rngs = query_rngs(seed_key, len(batch))
    out = []
    for i in range(len(batch)):
        neg = sample_negatives(batch, i, M_prime, rngs[i])
        modality, q, pos = batch.query(i)
        out.append(CandidateList(q, modality, pos, [int(x) for x in neg], selection_provenance=list(range(M_prime))))
    if teacher is not None:
        feats = [batch.key_features(i, c.key_ids) for i, c in enumerate(out)]
        scores = score_pairs(teacher, np.vstack([f[0] for f in feats]), np.vstack([f[1] for f in feats]))
        for c, row in zip(out, scores.reshape(len(batch), M_prime + 1)):
            c.teacher_logits_raw = row.copy()
            c.teacher_logits_adjusted = row.copy()
    return out


def candidate_features(batch: Batch, cands: list[CandidateList]) -> tuple[np.ndarray, np.ndarray]:
    """Stacked row-aligned features for all (query, key) pairs, query-major."""
    feats = [batch.key_features(i, c.key_ids) for i, c in enumerate(cands)]
    return np.vstack([f[0] for f in feats]), np.vstack([f[1] for f in feats])


def dump_candidates(cands: list[CandidateList], path, batch_index: int = 0) -> None:
    """Append one JSON line per candidate list."""
    with Path(path).open("a", encoding="utf-8") as fh:
        for c in cands:
            fh.write(json.dumps({"batch": batch_index, **c.to_record()}) + "\n")
