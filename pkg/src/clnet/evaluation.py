"""
Exhaustive retrieval and the retrieval metrics: Recall@k, Hit Rate, AP.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Union

import numpy as np
import torch
from pydantic import BaseModel, Field, model_validator

from .config import ViewId
from .errors import ValidationError
from .io import load_embeddings, save_embeddings
from .model import CrossViewNet

logger = logging.getLogger(__name__)

TOP_ONE_PERCENT = "1%"
UNIT_NORM_TOL = 1e-5


@dataclass
class EmbeddingMatrix:
    ids: List[str]
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ValidationError(f"embedding matrix {self.vectors.shape} does not match {len(self.ids)} ids")
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("embedding ids must be unique")
        norms = np.linalg.norm(self.vectors, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
        if bad.size:
            raise ValidationError(f"row {self.ids[bad[0]]!r} has norm {norms[bad[0]]:.6f}, expected unit norm")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def save(self, path: Union[str, Path]) -> None:
        save_embeddings(path, self.ids, self.vectors)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EmbeddingMatrix":
        ids, vectors = load_embeddings(path)
        return cls(ids, vectors)


@dataclass
class RetrievalResult:
    """
    ``rankings[q]`` lists indices into ``reference_ids`` by descending
    similarity, ties broken by ascending reference id.
    """

    query_ids: List[str]
    reference_ids: List[str]
    rankings: np.ndarray

    def __post_init__(self):
        self._query_index = {q: i for i, q in enumerate(self.query_ids)}
        self._ref_index = {r: i for i, r in enumerate(self.reference_ids)}

    def ranking(self, query_id: str) -> List[str]:
        return [self.reference_ids[j] for j in self.rankings[self._row(query_id)]]

    def _row(self, query_id: str) -> int:
        if query_id not in self._query_index:
            raise ValidationError(f"query {query_id!r} missing from retrieval result")
        return self._query_index[query_id]

    def rank_of(self, query_id: str, reference_id: str) -> int:
        """1-based rank of ``reference_id`` for ``query_id``."""
        if reference_id not in self._ref_index:
            raise ValidationError(f"reference {reference_id!r} not in the database")
        row = self.rankings[self._row(query_id)]
        return int(np.flatnonzero(row == self._ref_index[reference_id])[0]) + 1

    def top1(self, query_id: str) -> str:
        return self.reference_ids[self.rankings[self._row(query_id)][0]]


class MetricsReport(BaseModel):
    recall_at_1: float = Field(ge=0, le=1)
    recall_at_5: float = Field(ge=0, le=1)
    recall_at_10: float = Field(ge=0, le=1)
    recall_at_1pct: float = Field(ge=0, le=1)
    hit_rate: Optional[float] = Field(None, ge=0, le=1)
    average_precision: Optional[float] = Field(None, ge=0, le=1)
    num_queries: int
    num_references: int
    config_hash: str = ""
    timestamp: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))

    @model_validator(mode="after")
    def _monotone(self) -> "MetricsReport":
        if not self.recall_at_1 <= self.recall_at_5 <= self.recall_at_10:
            raise ValueError("recall must be non-decreasing in k")
        return self

    def write(self, path: Union[str, Path]) -> None:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.model_dump_json(indent=2) + "\n", encoding="utf-8")


# ---------- EMBEDDING ----------

@torch.no_grad()
def embed_corpus(
    model: CrossViewNet,
    images: Sequence[torch.Tensor],
    view: ViewId,
    ids: Optional[Sequence[str]] = None,
    batch_size: int = 64,
) -> EmbeddingMatrix:
    """Row ``i`` is the embedding of ``images[i]``."""
    view = ViewId(view)
    expected = (3, *model.cfg.input_hw(view))
    for i, img in enumerate(images):
        if tuple(img.shape) != expected:
            raise ValidationError(f"{view.value} image {i} has shape {tuple(img.shape)}, expected {expected}")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(images))]
    dtype = next(model.parameters()).dtype

    was_training = model.training
    model.eval()
    rows: List[np.ndarray] = []
    for start in range(0, len(images), batch_size):
        batch = torch.stack(list(images[start : start + batch_size])).to(dtype)
        rows.append(model.embed(batch, view).cpu().numpy())
    model.train(was_training)

    vectors = np.concatenate(rows) if rows else np.zeros((0, model.cfg.embedding_dim), dtype=np.float32)
    return EmbeddingMatrix(ids, vectors)


# ---------- RANKING ----------

def rank_references(queries: EmbeddingMatrix, refs: EmbeddingMatrix) -> RetrievalResult:
    """Exhaustive dot-product ranking of every reference for every query."""
    if queries.dim != refs.dim:
        raise ValidationError(f"dimension mismatch: queries {queries.dim} vs references {refs.dim}")
    # id-sorted references + stable sort = ascending-id tie-break
    order = sorted(range(len(refs.ids)), key=lambda j: refs.ids[j])
    ref_ids = [refs.ids[j] for j in order]
    # identical reference vectors must score identically
    unique, inverse = np.unique(refs.vectors[order].astype(np.float64), axis=0, return_inverse=True)
    scores = (queries.vectors.astype(np.float64) @ unique.T)[:, np.ravel(inverse)]
    rankings = np.argsort(-scores, axis=1, kind="stable")
    return RetrievalResult(list(queries.ids), ref_ids, rankings)


# ---------- METRICS ----------

def resolve_k(k: Union[int, str], num_refs: int) -> int:
    if k == TOP_ONE_PERCENT:
        return max(1, math.ceil(0.01 * num_refs))
    k = int(k)
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    return k


def recall_at_k(result: RetrievalResult, truth: Mapping[str, str], k: Union[int, str]) -> float:
    """Fraction of queries whose true reference ranks within the top k."""
    if not truth:
        raise ValidationError("recall_at_k needs at least one query")
    kk = resolve_k(k, len(result.reference_ids))
    hits = sum(result.rank_of(q, ref) <= kk for q, ref in truth.items())
    return hits / len(truth)


def hit_rate(result: RetrievalResult, positives: Mapping[str, Iterable[str]]) -> float:
    """Fraction of queries whose top-1 reference is a positive or semi-positive."""
    if not positives:
        raise ValidationError("hit_rate needs at least one query")
    hits = 0
    for q, pos in positives.items():
        pos = set(pos)
        if not pos:
            raise ValidationError(f"query {q!r} has an empty positive set")
        hits += result.top1(q) in pos
    return hits / len(positives)


def average_precision(result: RetrievalResult, relevant: Mapping[str, Iterable[str]]) -> float:
    """
    Mean over queries of the mean precision at each relevant reference's rank.
    """
    if not relevant:
        raise ValidationError("average_precision needs at least one query")
    total = 0.0
    for q, rel in relevant.items():
        rel = set(rel)
        if not rel:
            raise ValidationError(f"query {q!r} has an empty relevant set")
        ranks = sorted(result.rank_of(q, r) for r in rel)
        total += sum((i + 1) / rank for i, rank in enumerate(ranks)) / len(ranks)
    return total / len(relevant)


def evaluate(
    queries: EmbeddingMatrix,
    refs: EmbeddingMatrix,
    truth: Mapping[str, str],
    semi_positives: Optional[Mapping[str, Sequence[str]]] = None,
    with_hit_rate: bool = False,
    with_average_precision: bool = True,
    config_hash: str = "",
) -> MetricsReport:
    """
    Rank ``refs`` for ``queries`` and compute every metric the report carries.
    Hit rate and AP treat semi-positives as matches when they are given.
    """
    result = rank_references(queries, refs)
    semi = semi_positives or {}
    if with_hit_rate and not any(semi.get(q) for q in truth):
        raise ValidationError("hit rate requested but no query has semi-positive ids")
    positive_sets: Dict[str, Set[str]] = {q: {ref, *semi.get(q, [])} for q, ref in truth.items()}

    report = MetricsReport(
        recall_at_1=recall_at_k(result, truth, 1),
        recall_at_5=recall_at_k(result, truth, 5),
        recall_at_10=recall_at_k(result, truth, 10),
        recall_at_1pct=recall_at_k(result, truth, TOP_ONE_PERCENT),
        hit_rate=hit_rate(result, positive_sets) if with_hit_rate else None,
        average_precision=average_precision(result, positive_sets) if with_average_precision else None,
        num_queries=len(truth),
        num_references=len(result.reference_ids),
        config_hash=config_hash,
    )
    logger.info(
        "eval queries=%d refs=%d r1=%.4f r5=%.4f r10=%.4f r1pct=%.4f",
        report.num_queries, report.num_references,
        report.recall_at_1, report.recall_at_5, report.recall_at_10, report.recall_at_1pct,
    )
    return report
