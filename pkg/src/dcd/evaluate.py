"""Recall@K in both directions and positive/negative score separability."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dcd.data import Split
from dcd.errors import UsageError
from dcd.model import ScorerParams, load_checkpoint, score_matrix

KS = (1, 5, 10)


@dataclass
class RetrievalMetrics:
    text_r1: float
    text_r5: float
    text_r10: float
    image_r1: float
    image_r5: float
    image_r10: float

    @property
    def mean_r1(self) -> float:
        return 0.5 * (self.text_r1 + self.image_r1)

    def as_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k}={v:.4f}\n" for k, v in asdict(self).items())


def _first_hit_ranks(scores: np.ndarray, positive: np.ndarray) -> np.ndarray:
    """0-based rank of the best-ranked positive in each row.

    Rows are ranked by score descending, ties broken by smaller column index.
    """
    masked = np.where(positive, scores, -np.inf)
    best = masked.max(axis=1, keepdims=True)
    # smallest column index among positives attaining the best score
    col = np.argmax(positive & (scores == best), axis=1)
    above = (scores > best).sum(axis=1)
    cols = np.arange(scores.shape[1])[None, :]
    tied_before = ((scores == best) & (cols < col[:, None])).sum(axis=1)
    return above + tied_before


def retrieval_metrics(scores, image_groups, text_groups) -> RetrievalMetrics:
    """Metrics from an (n_images, n_texts) score matrix."""
    scores = np.asarray(scores, dtype=float)
    ig, tg = np.asarray(image_groups), np.asarray(text_groups)
    if scores.size == 0:
        raise UsageError("cannot evaluate an empty split")
    match = ig[:, None] == tg[None, :]
    if not match.any(axis=1).all() or not match.any(axis=0).all():
        raise UsageError("every image and every text needs at least one match")
    tr = _first_hit_ranks(scores, match)
    ir = _first_hit_ranks(scores.T, match.T)
    vals = {}
    for name, ranks in (("text", tr), ("image", ir)):
        for k in KS:
            vals[f"{name}_r{k}"] = 100.0 * int(np.count_nonzero(ranks < k)) / len(ranks)
    return RetrievalMetrics(**vals)


def evaluate_retrieval(scorer, split: Split) -> RetrievalMetrics:
    """``scorer`` is a :class:`ScorerParams` or a callable ``split -> score matrix``."""
    if len(split.images) == 0 or len(split.texts) == 0:
        raise UsageError(f"split {split.name!r} is empty")
    if isinstance(scorer, ScorerParams):
        scores = score_matrix(scorer, split.images, split.texts)
    else:
        scores = np.asarray(scorer(split), dtype=float)
    return retrieval_metrics(scores, split.image_groups, split.text_groups)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


@dataclass
class SeparabilityTrace:
    positive: list[float] = field(default_factory=list)
    negative_1: list[float] = field(default_factory=list)
    negative_2: list[float] = field(default_factory=list)
    negative_3: list[float] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)

    def append(self, label, pos, n1, n2, n3):
        self.labels.append(str(label))
        for series, v in zip((self.positive, self.negative_1, self.negative_2, self.negative_3), (pos, n1, n2, n3)):
            series.append(float(v))

    def to_tsv(self) -> str:
        rows = ["checkpoint\tpositive\tnegative_1\tnegative_2\tnegative_3"]
        for i, label in enumerate(self.labels):
            rows.append(
                f"{label}\t{self.positive[i]:.6f}\t{self.negative_1[i]:.6f}"
                f"\t{self.negative_2[i]:.6f}\t{self.negative_3[i]:.6f}"
            )
        return "\n".join(rows) + "\n"


def separability_point(scores, image_groups, text_groups) -> tuple[float, float, float, float]:
    """Mean squashed score of the positives and of the 1st/2nd/3rd strongest negative per image query."""
    sq = sigmoid(scores)
    match = np.asarray(image_groups)[:, None] == np.asarray(text_groups)[None, :]
    if (~match).sum(axis=1).min() < 3:
        raise UsageError("probe set needs at least three negatives per query")
    pos = (sq * match).sum(axis=1) / match.sum(axis=1)
    neg = np.sort(np.where(match, -np.inf, sq), axis=1)[:, ::-1][:, :3]
    return float(pos.mean()), *(float(v) for v in neg.mean(axis=0))


def separability_trace(checkpoints, probe: Split, scorer_fn=None) -> SeparabilityTrace:
    """One trace point per checkpoint (ScorerParams or checkpoint directory)."""
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise UsageError("separability_trace needs at least one checkpoint")
    trace = SeparabilityTrace()
    for i, ck in enumerate(checkpoints):
        if isinstance(ck, ScorerParams):
            scores, label = score_matrix(ck, probe.images, probe.texts), str(i)
        elif callable(ck):
            scores, label = np.asarray(ck(probe), dtype=float), str(i)
        else:
            path = Path(ck)
            if not path.exists():
                raise FileNotFoundError(f"missing checkpoint {path}")
            scores, label = score_matrix(load_checkpoint(path), probe.images, probe.texts), path.name
        trace.append(label, *separability_point(scores, probe.image_groups, probe.text_groups))
    return trace


def write_metrics(metrics: RetrievalMetrics, out_dir, extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(metrics.to_text(), encoding="utf-8")
    summary = {**metrics.as_dict(), "mean_r1": metrics.mean_r1, **(extra or {})}
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
