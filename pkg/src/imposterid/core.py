"""Embedding vector math and closed-set identification against speaker centroids."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, DimensionMismatchError, EmptyListError, ZeroVectorError

ZERO_NORM = 1e-12

Scorer = Callable[[np.ndarray, np.ndarray], float]


def as_embedding(v, dim: int | None = None) -> np.ndarray:
    """Coerce to a finite float64 vector, optionally checking its dimension."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatchError(f"embedding must be 1-D, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionMismatchError(f"expected dimension {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise DataError("embedding has non-finite components")
    return arr


def _check_same_dim(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise DimensionMismatchError(f"dimension {a.shape[-1]} != {b.shape[-1]}")


def l2_normalize(v) -> np.ndarray:
    v = as_embedding(v)
    norm = np.sqrt(np.sum(v * v))
    if norm < ZERO_NORM:
        raise ZeroVectorError("cannot normalize a zero vector")
    return v / norm


# The scalar and matrix cosine paths share one summation scheme (numpy pairwise
# sums along the last axis) so that they agree bit for bit.
def _row_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(x * x, axis=-1))


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_dim(a, b)
    na, nb = np.sqrt(np.sum(a * a)), np.sqrt(np.sum(b * b))
    if na < ZERO_NORM or nb < ZERO_NORM:
        raise ZeroVectorError("cosine similarity of a zero vector")
    return float(np.clip(np.sum(a * b) / (na * nb), -1.0, 1.0))


def cosine_matrix(a, b) -> np.ndarray:
    """All-pairs cosine similarity between the rows of ``a`` (P, D) and ``b`` (Q, D)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    _check_same_dim(a, b)
    na, nb = _row_norms(a), _row_norms(b)
    if np.any(na < ZERO_NORM) or np.any(nb < ZERO_NORM):
        raise ZeroVectorError("cosine similarity of a zero vector")
    dots = np.sum(a[:, None, :] * b[None, :, :], axis=-1)
    return np.clip(dots / (na[:, None] * nb[None, :]), -1.0, 1.0)


class CosineScorer:
    """Cosine back-end. Callable on a pair, with a batched ``matrix`` form."""

    name = "cosine"

    def __call__(self, a, b) -> float:
        return cosine_similarity(a, b)

    def matrix(self, a, b) -> np.ndarray:
        return cosine_matrix(a, b)

    def __repr__(self):
        return "CosineScorer()"


COSINE = CosineScorer()


def score_matrix(scorer: Scorer, a, b) -> np.ndarray:
    """Scores for every (row of a, row of b) pair, batched when the scorer allows it."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    _check_same_dim(a, b)
    batched = getattr(scorer, "matrix", None)
    if batched is not None:
        return np.asarray(batched(a, b), dtype=np.float64)
    out = np.empty((a.shape[0], b.shape[0]))
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i, j] = scorer(x, y)
    return out


def elementwise_product(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shape {a.shape} != {b.shape}")
    return a * b


def _ordered_mean(x: np.ndarray, axis: int) -> np.ndarray:
    # Summing each component in sorted order makes the result independent of the
    # order the utterances arrive in, bit for bit.
    return np.sort(x, axis=axis).sum(axis=axis) / x.shape[axis]


def centroid(utterances: Sequence) -> np.ndarray:
    """Component-wise mean of the utterance embeddings (no renormalization)."""
    if len(utterances) == 0:
        raise EmptyListError("centroid of an empty list")
    dims = {np.shape(u) for u in utterances}
    if len(dims) != 1:
        raise DimensionMismatchError(f"mixed embedding shapes {sorted(dims)}")
    return _ordered_mean(np.asarray(utterances, dtype=np.float64), axis=0)


@dataclass(frozen=True)
class EnrollmentSet:
    """M enrolled speakers with N enrollment embeddings each.

    ``embeddings`` has shape (M, N, D); ``centroids`` (M, D) is derived on construction.
    """

    speaker_ids: tuple
    embeddings: np.ndarray
    centroids: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 3:
            raise DimensionMismatchError(f"enrollment must be (M, N, D), got {emb.shape}")
        m, n, _ = emb.shape
        if m < 1 or n < 1:
            raise EmptyListError("enrollment needs at least one speaker and one utterance")
        if len(self.speaker_ids) != m:
            raise DataError(f"{len(self.speaker_ids)} speaker ids for {m} speakers")
        if len(set(self.speaker_ids)) != m or any(not str(s) for s in self.speaker_ids):
            raise DataError("speaker ids must be unique and non-empty")
        if not np.all(np.isfinite(emb)):
            raise DataError("enrollment has non-finite components")
        emb.setflags(write=False)
        cents = _ordered_mean(emb, axis=1)
        cents.setflags(write=False)
        object.__setattr__(self, "speaker_ids", tuple(self.speaker_ids))
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "centroids", cents)

    @classmethod
    def from_lists(cls, speakers: Sequence[tuple]) -> "EnrollmentSet":
        """Build from ``[(speaker_id, [emb, ...]), ...]``."""
        ids = [s for s, _ in speakers]
        counts = {len(u) for _, u in speakers}
        if len(counts) > 1:
            raise DataError(f"unequal utterance counts per speaker: {sorted(counts)}")
        return cls(tuple(ids), np.asarray([u for _, u in speakers], dtype=np.float64))

    @property
    def n_speakers(self) -> int:
        return self.embeddings.shape[0]

    @property
    def n_utterances(self) -> int:
        return self.embeddings.shape[1]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[2]


@dataclass(frozen=True)
class ScoredIdentification:
    best_index: int
    best_score: float
    all_scores: np.ndarray


def identify(query, enrollment: EnrollmentSet, scorer: Scorer = COSINE) -> ScoredIdentification:
    """Closed-set identification: score the query against every centroid, take the argmax.

    Ties go to the lowest speaker index (``np.argmax`` semantics).
    """
    q = as_embedding(query, enrollment.dim)
    scores = score_matrix(scorer, q[None, :], enrollment.centroids)[0]
    best = int(np.argmax(scores))
    return ScoredIdentification(best, float(scores[best]), scores)


def identify_many(queries, enrollment: EnrollmentSet, scorer: Scorer = COSINE):
    """Batched :func:`identify`. Returns ``(best_index, best_score, all_scores)`` arrays."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if q.shape[1] != enrollment.dim:
        raise DimensionMismatchError(f"query dimension {q.shape[1]} != {enrollment.dim}")
    scores = score_matrix(scorer, q, enrollment.centroids)
    best = np.argmax(scores, axis=1)
    return best, scores[np.arange(len(q)), best], scores
