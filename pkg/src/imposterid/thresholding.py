"""Threshold-based imposter rejection.

Fixed thresholds, EER and max-accuracy calibration, adaptive score normalization,
and speaker-specific thresholds built from the enrollment utterances alone.
All decision rules are strict: a score equal to its threshold is rejected.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import COSINE, EnrollmentSet, Scorer, as_embedding, identify, identify_many, score_matrix
from .errors import (
    DegenerateCohortError,
    EmptyCohortError,
    EmptyGridError,
    FormatError,
    MissingClassError,
    SingleSpeakerError,
    SingleUtteranceError,
    TableLengthMismatchError,
)

IMPOSTER = -1
MIN_COHORT_STD = 1e-9


@dataclass(frozen=True)
class Decision:
    """``speaker`` is the accepted enrolled-speaker index, or None for an imposter."""

    speaker: Optional[int]
    raw_score: float
    threshold_used: float

    @property
    def is_imposter(self) -> bool:
        return self.speaker is None

    @property
    def label(self) -> int:
        return IMPOSTER if self.speaker is None else self.speaker


def _decide(best_index: int, best_score: float, tau: float) -> Decision:
    if best_score > tau:
        return Decision(int(best_index), float(best_score), float(tau))
    return Decision(None, float(best_score), float(tau))


@dataclass(frozen=True)
class ThresholdTable:
    """Either one global ``tau`` (mode "fixed") or one per enrolled speaker ("per_speaker")."""

    mode: str
    tau: object
    speakers: Optional[tuple] = None

    def __post_init__(self):
        if self.mode == "fixed":
            if not math.isfinite(float(self.tau)):
                raise FormatError("fixed threshold must be finite")
            object.__setattr__(self, "tau", float(self.tau))
        elif self.mode == "per_speaker":
            tau = np.asarray(self.tau, dtype=np.float64)
            if tau.ndim != 1 or not np.all(np.isfinite(tau)):
                raise FormatError("per-speaker thresholds must be a finite vector")
            if self.speakers is not None and len(self.speakers) != len(tau):
                raise TableLengthMismatchError(f"{len(tau)} thresholds for {len(self.speakers)} speakers")
            tau.setflags(write=False)
            object.__setattr__(self, "tau", tau)
            if self.speakers is not None:
                object.__setattr__(self, "speakers", tuple(self.speakers))
        else:
            raise FormatError(f"unknown threshold mode {self.mode!r}")

    @classmethod
    def fixed(cls, tau: float) -> "ThresholdTable":
        return cls("fixed", tau)

    def to_dict(self) -> dict:
        if self.mode == "fixed":
            return {"mode": "fixed", "tau": self.tau}
        return {
            "mode": "per_speaker",
            "tau": [float(t) for t in self.tau],
            "speakers": list(self.speakers) if self.speakers is not None else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdTable":
        try:
            mode = d["mode"]
            if mode == "fixed":
                return cls("fixed", d["tau"])
            speakers = d.get("speakers")
            return cls("per_speaker", d["tau"], tuple(speakers) if speakers is not None else None)
        except (KeyError, TypeError) as exc:
            raise FormatError(f"bad threshold table: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "ThresholdTable":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise FormatError(str(exc), offset=exc.pos) from exc


def identify_fixed(query, enrollment: EnrollmentSet, scorer: Scorer, tau: float) -> Decision:
    ident = identify(query, enrollment, scorer)
    return _decide(ident.best_index, ident.best_score, tau)


def inter_speaker_similarities(enrollment: EnrollmentSet, j: int, scorer: Scorer = COSINE) -> np.ndarray:
    """Scores of every enrollment utterance of speaker ``j`` against every utterance
    of every other enrolled speaker: N * N * (M - 1) values, raw utterances, not centroids.
    """
    m = enrollment.n_speakers
    if m < 2:
        raise SingleSpeakerError("inter-speaker similarities need at least two speakers")
    own = enrollment.embeddings[j]
    others = np.concatenate([enrollment.embeddings[u] for u in range(m) if u != j])
    return score_matrix(scorer, own, others).ravel()


def intra_speaker_similarities(enrollment: EnrollmentSet, j: int, scorer: Scorer = COSINE) -> np.ndarray:
    """Scores over the N(N-1)/2 unordered pairs of distinct utterances of speaker ``j``."""
    n = enrollment.n_utterances
    if n < 2:
        raise SingleUtteranceError("intra-speaker similarities need at least two utterances")
    own = enrollment.embeddings[j]
    scores = score_matrix(scorer, own, own)
    k, l = np.triu_indices(n, k=1)
    return scores[k, l]


def speaker_specific_thresholds(enrollment: EnrollmentSet, scorer: Scorer = COSINE) -> ThresholdTable:
    """Per-speaker threshold = max similarity between that speaker's enrollment
    utterances and any other enrolled speaker's utterances."""
    m, n, d = enrollment.embeddings.shape
    if m < 2:
        raise SingleSpeakerError("speaker-specific thresholds need at least two speakers")
    flat = enrollment.embeddings.reshape(m * n, d)
    scores = score_matrix(scorer, flat, flat).reshape(m, n, m, n)
    taus = np.empty(m)
    for j in range(m):
        cross = np.delete(scores[j], j, axis=1)
        taus[j] = cross.max()
    return ThresholdTable("per_speaker", taus, enrollment.speaker_ids)


def identify_sst(query, enrollment: EnrollmentSet, scorer: Scorer, table: ThresholdTable) -> Decision:
    if table.mode != "per_speaker" or len(table.tau) != enrollment.n_speakers:
        raise TableLengthMismatchError(
            f"need a per-speaker table of length {enrollment.n_speakers}"
        )
    ident = identify(query, enrollment, scorer)
    return _decide(ident.best_index, ident.best_score, table.tau[ident.best_index])


def _top_k(scores: np.ndarray, k: Optional[int]) -> np.ndarray:
    if k is None or k >= scores.shape[-1]:
        return scores
    return -np.sort(-scores, axis=-1)[..., :k]


def adaptive_score_norm(
    query,
    enrollment: EnrollmentSet,
    cohort,
    scorer: Scorer = COSINE,
    top_k: Optional[int] = None,
) -> np.ndarray:
    """Symmetric adaptive s-norm of the query's score against each centroid.

    For raw score s against speaker j the result is
    ``0.5 * ((s - mu_e) / sd_e + (s - mu_q) / sd_q)`` where (mu_e, sd_e) summarise
    the centroid's scores against the cohort and (mu_q, sd_q) the query's.
    Standard deviations are population (ddof=0). With ``top_k`` only the k
    highest-scoring cohort entries enter each side's statistics.
    """
    cohort = np.atleast_2d(np.asarray(cohort, dtype=np.float64))
    if cohort.size == 0:
        raise EmptyCohortError("cohort is empty")
    q = as_embedding(query, enrollment.dim)
    raw = score_matrix(scorer, q[None, :], enrollment.centroids)[0]
    enr = _top_k(score_matrix(scorer, enrollment.centroids, cohort), top_k)
    qry = _top_k(score_matrix(scorer, q[None, :], cohort)[0], top_k)
    mu_e, sd_e = enr.mean(axis=1), enr.std(axis=1)
    mu_q, sd_q = qry.mean(), qry.std()
    if np.any(sd_e < MIN_COHORT_STD) or sd_q < MIN_COHORT_STD:
        raise DegenerateCohortError("cohort scores have (near) zero spread")
    return 0.5 * ((raw - mu_e) / sd_e + (raw - mu_q) / sd_q)


@dataclass(frozen=True)
class TrialPair:
    score: float
    is_target: bool


@dataclass(frozen=True)
class EerResult:
    eer: float
    threshold: float
    far_curve: list
    frr_curve: list

    def to_dict(self) -> dict:
        return {
            "eer": self.eer,
            "threshold": self.threshold,
            "far_curve": [[t, r] for t, r in self.far_curve],
            "frr_curve": [[t, r] for t, r in self.frr_curve],
        }


def error_rates(scores: np.ndarray, is_target: np.ndarray, thresholds: np.ndarray):
    """FAR and FRR at each threshold under the accept-if-``score > t`` rule."""
    tar = np.sort(scores[is_target])
    non = np.sort(scores[~is_target])
    far = (len(non) - np.searchsorted(non, thresholds, side="right")) / len(non)
    frr = np.searchsorted(tar, thresholds, side="right") / len(tar)
    return far, frr


def compute_eer(trials: Sequence[TrialPair]) -> EerResult:
    """Equal error rate by sweeping every distinct score as a threshold.

    The sweep starts just below the lowest score (everything accepted). The EER is
    the linear interpolation of the FAR/FRR crossing between the two adjacent
    operating points where FAR - FRR changes sign. When FAR == FRR holds exactly
    over a run of thresholds, the threshold reported is the midpoint between the
    start of that run and the next operating point.
    """
    scores = np.array([t.score for t in trials], dtype=np.float64)
    is_target = np.array([bool(t.is_target) for t in trials])
    if not is_target.any() or is_target.all():
        raise MissingClassError("EER needs both target and non-target trials")
    if not np.all(np.isfinite(scores)):
        raise FormatError("trial scores must be finite")

    distinct = np.unique(scores)
    thresholds = np.concatenate([[np.nextafter(distinct[0], -np.inf)], distinct])
    far, frr = error_rates(scores, is_target, thresholds)
    diff = far - frr
    k = int(np.argmax(diff <= 0))  # diff[0] = 1 and diff[-1] = -1 by construction
    if diff[k] == 0:
        k_end = k
        while diff[k_end + 1] == 0:
            k_end += 1
        eer = float(far[k])
        threshold = float(0.5 * (thresholds[k] + thresholds[k_end + 1]))
    else:
        alpha = diff[k - 1] / (diff[k - 1] - diff[k])
        eer = float(far[k - 1] + alpha * (far[k] - far[k - 1]))
        threshold = float(thresholds[k - 1] + alpha * (thresholds[k] - thresholds[k - 1]))
    return EerResult(
        eer=eer,
        threshold=threshold,
        far_curve=[(float(t), float(r)) for t, r in zip(thresholds, far)],
        frr_curve=[(float(t), float(r)) for t, r in zip(thresholds, frr)],
    )


def threshold_accuracies(best_scores, best_index, labels, grid) -> np.ndarray:
    """Identification accuracy at every grid threshold.

    An enrolled query (label >= 0) is correct when accepted with the right speaker;
    an imposter query (label == IMPOSTER) is correct when rejected.
    """
    s = np.asarray(best_scores, dtype=np.float64)
    labels = np.asarray(labels)
    imp = labels == IMPOSTER
    right = np.asarray(best_index) == labels
    accepted = s[None, :] > np.asarray(grid, dtype=np.float64)[:, None]
    correct = np.where(imp[None, :], ~accepted, accepted & right[None, :])
    return correct.mean(axis=1)


def best_grid_threshold(best_scores, best_index, labels, grid) -> float:
    """Grid threshold of maximal accuracy; ties go to the smallest threshold."""
    grid = np.unique(np.asarray(grid, dtype=np.float64))
    if grid.size == 0:
        raise EmptyGridError("threshold grid is empty")
    acc = threshold_accuracies(best_scores, best_index, labels, grid)
    return float(grid[int(np.argmax(acc))])


def optimal_fixed_threshold(queries, labels, enrollment: EnrollmentSet, scorer: Scorer, grid) -> float:
    """Fixed threshold maximising accuracy on labelled calibration queries.

    ``labels[i]`` is the enrolled-speaker index of query i, or ``IMPOSTER``.
    """
    if len(np.atleast_1d(grid)) == 0:
        raise EmptyGridError("threshold grid is empty")
    best, top, _ = identify_many(queries, enrollment, scorer)
    return best_grid_threshold(top, best, labels, grid)
