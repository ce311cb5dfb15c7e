"""Open-set identification benchmark over repeated random speaker sets.

Each speaker set enrolls M test speakers, asks 10 queries per enrolled speaker
plus 10 * M imposter queries, and keeps a small cohort for score normalization.
A method turns a trial's queries into decisions (speaker index or imposter);
accuracy is averaged over sets with a normal-approximation 95% interval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .core import COSINE, EnrollmentSet, identify_many, score_matrix
from .corpus import Corpus
from .errors import (
    ConfigError,
    DegenerateCohortError,
    EmptyCohortError,
    InsufficientSpeakersError,
    InsufficientUtterancesError,
    MissingClassError,
    TooFewSetsError,
)
from .nnet import Assembly, RelationScorer, SymmetricRelationScorer, idn_inputs, mlp_forward
from .thresholding import (
    IMPOSTER,
    MIN_COHORT_STD,
    Decision,
    ThresholdTable,
    best_grid_threshold,
    speaker_specific_thresholds,
)

Z_95 = 1.96


@dataclass(frozen=True)
class SetLayout:
    """Counts that define one speaker set."""

    n_speakers: int = 5
    n_enroll: int = 5
    queries_per_speaker: int = 10
    imposters_per_speaker: int = 10
    cohort_size: int = 10

    def __post_init__(self):
        for name in ("n_speakers", "n_enroll", "queries_per_speaker", "cohort_size"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.imposters_per_speaker < 0:
            raise ConfigError("imposters_per_speaker", "must be >= 0")


@dataclass(frozen=True)
class SpeakerSetTrial:
    enrollment: EnrollmentSet
    queries: np.ndarray  # enrolled-speaker queries, (M * q, D)
    labels: np.ndarray  # enrollment index of each query
    imposters: np.ndarray  # (M * i, D)
    imposter_speakers: tuple
    cohort: np.ndarray  # (cohort_size, D)
    cohort_speakers: tuple
    seed: tuple = ()

    @property
    def all_queries(self) -> np.ndarray:
        return np.concatenate([self.queries, self.imposters])

    @property
    def all_labels(self) -> np.ndarray:
        return np.concatenate([self.labels, np.full(len(self.imposters), IMPOSTER, dtype=np.int64)])


def build_speaker_set(corpus: Corpus, n_speakers: int, rng, layout: Optional[SetLayout] = None,
                      seed: tuple = ()) -> SpeakerSetTrial:
    """Sample one speaker set from a test corpus.

    Enrolled speakers are drawn among those with enough utterances; the remaining
    speakers are shuffled, the first ``min(cohort_size, rest - 1)`` supply the cohort
    (round robin, one utterance each before any speaker gives a second) and the
    others form the imposter pool, from which ``imposters_per_speaker * M``
    utterances are drawn without replacement.
    """
    layout = layout or SetLayout(n_speakers=n_speakers)
    if layout.n_speakers != n_speakers:
        layout = SetLayout(n_speakers, layout.n_enroll, layout.queries_per_speaker,
                           layout.imposters_per_speaker, layout.cohort_size)
    ids = corpus.speaker_ids
    need = layout.n_enroll + layout.queries_per_speaker
    if len(ids) < n_speakers + 2:
        raise InsufficientSpeakersError(
            f"{len(ids)} speakers, a set of {n_speakers} needs at least {n_speakers + 2}"
        )
    eligible = [s for s in ids if len(corpus.speakers[s]) >= need]
    if len(eligible) < n_speakers:
        raise InsufficientUtterancesError(
            f"only {len(eligible)} speakers have >= {need} utterances, need {n_speakers}"
        )

    enrolled = [eligible[i] for i in rng.choice(len(eligible), size=n_speakers, replace=False)]
    enroll, queries, labels = [], [], []
    for j, sid in enumerate(enrolled):
        emb = corpus.speakers[sid]
        pick = rng.choice(len(emb), size=need, replace=False)
        enroll.append(emb[pick[: layout.n_enroll]])
        queries.append(emb[pick[layout.n_enroll:]])
        labels.extend([j] * layout.queries_per_speaker)

    taken = set(enrolled)
    rest = [s for s in ids if s not in taken]
    rest = [rest[i] for i in rng.permutation(len(rest))]
    n_cohort_spk = min(layout.cohort_size, len(rest) - 1)
    cohort_spk, pool_spk = rest[:n_cohort_spk], rest[n_cohort_spk:]

    cohort_sizes = np.array([len(corpus.speakers[s]) for s in cohort_spk])
    if cohort_sizes.sum() < layout.cohort_size:
        raise InsufficientUtterancesError("not enough cohort utterances")
    orders = [rng.permutation(n) for n in cohort_sizes]
    cohort, cohort_owner, rnd = [], [], 0
    while len(cohort) < layout.cohort_size:
        for k, sid in enumerate(cohort_spk):
            if rnd < cohort_sizes[k] and len(cohort) < layout.cohort_size:
                cohort.append(corpus.speakers[sid][orders[k][rnd]])
                cohort_owner.append(sid)
        rnd += 1

    n_imp = layout.imposters_per_speaker * n_speakers
    sizes = np.array([len(corpus.speakers[s]) for s in pool_spk])
    if sizes.sum() < n_imp:
        raise InsufficientUtterancesError(f"{sizes.sum()} imposter utterances available, need {n_imp}")
    flat = np.sort(rng.choice(sizes.sum(), size=n_imp, replace=False))
    ends = np.cumsum(sizes)
    owner = np.searchsorted(ends, flat, side="right")
    starts = ends - sizes
    imposters = np.array([corpus.speakers[pool_spk[o]][f - starts[o]] for o, f in zip(owner, flat)])

    return SpeakerSetTrial(
        enrollment=EnrollmentSet(tuple(enrolled), np.asarray(enroll)),
        queries=np.concatenate(queries),
        labels=np.asarray(labels, dtype=np.int64),
        imposters=imposters.reshape(n_imp, corpus.dim),
        imposter_speakers=tuple(pool_spk[o] for o in owner),
        cohort=np.asarray(cohort),
        cohort_speakers=tuple(cohort_owner),
        seed=tuple(seed),
    )


def make_trials(corpus: Corpus, n_speakers: int, n_sets: int, seed: int,
                layout: Optional[SetLayout] = None) -> list:
    """``n_sets`` independent speaker sets; set ``i`` draws from ``default_rng([seed, i])``."""
    return [
        build_speaker_set(corpus, n_speakers, np.random.default_rng([seed, i]), layout, (seed, i))
        for i in range(n_sets)
    ]


# --- methods ----------------------------------------------------------------------
#
# A method exposes ``decisions(trial, queries) -> (predicted, raw_score, threshold)``,
# three arrays with one entry per query; ``predicted`` holds IMPOSTER for rejections.
# Fixed-threshold methods also expose ``best_scores`` so their threshold can be
# calibrated on labelled trials.


def _gate(best, score, tau):
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), score.shape)
    return np.where(score > tau, best, IMPOSTER), score, tau


def _adapted(assembly: Assembly, trial: SpeakerSetTrial, queries):
    enr = EnrollmentSet(trial.enrollment.speaker_ids, assembly.adapt(trial.enrollment.embeddings))
    return enr, assembly.adapt(np.atleast_2d(queries))


@dataclass(frozen=True)
class FixedCosine:
    tau: float
    name: str = "fixed"

    def best_scores(self, trial, queries):
        best, top, _ = identify_many(queries, trial.enrollment, COSINE)
        return best, top

    def decisions(self, trial, queries):
        return _gate(*self.best_scores(trial, queries), self.tau)


@dataclass(frozen=True)
class FixedRelNet:
    tau: float
    assembly: Assembly = field(repr=False, default=None)
    name: str = "fixed_relnet"

    def best_scores(self, trial, queries):
        enr, q = _adapted(self.assembly, trial, queries)
        best, top, _ = identify_many(q, enr, RelationScorer(self.assembly.relnet))
        return best, top

    def decisions(self, trial, queries):
        return _gate(*self.best_scores(trial, queries), self.tau)


def snorm_matrix(queries, centroids, cohort, top_k: Optional[int] = None) -> np.ndarray:
    """Batched symmetric s-norm of cosine scores (same statistics as
    :func:`thresholding.adaptive_score_norm`, one row per query)."""
    cohort = np.atleast_2d(np.asarray(cohort, dtype=np.float64))
    if cohort.size == 0:
        raise EmptyCohortError("cohort is empty")
    raw = score_matrix(COSINE, queries, centroids)
    enr = score_matrix(COSINE, centroids, cohort)
    qry = score_matrix(COSINE, queries, cohort)
    if top_k is not None and top_k < cohort.shape[0]:
        enr = -np.sort(-enr, axis=1)[:, :top_k]
        qry = -np.sort(-qry, axis=1)[:, :top_k]
    mu_e, sd_e = enr.mean(axis=1), enr.std(axis=1)
    mu_q, sd_q = qry.mean(axis=1), qry.std(axis=1)
    if np.any(sd_e < MIN_COHORT_STD) or np.any(sd_q < MIN_COHORT_STD):
        raise DegenerateCohortError("cohort scores have (near) zero spread")
    return 0.5 * ((raw - mu_e[None, :]) / sd_e[None, :] + (raw - mu_q[:, None]) / sd_q[:, None])


@dataclass(frozen=True)
class ScoreNorm:
    """Fixed threshold on the largest s-normalized cosine score."""

    tau: float
    cohort_size: int = 10
    top_k: Optional[int] = None
    name: str = "score_norm"

    def best_scores(self, trial, queries):
        s = snorm_matrix(np.atleast_2d(queries), trial.enrollment.centroids,
                         trial.cohort[: self.cohort_size], self.top_k)
        best = np.argmax(s, axis=1)
        return best, s[np.arange(len(s)), best]

    def decisions(self, trial, queries):
        return _gate(*self.best_scores(trial, queries), self.tau)


@dataclass(frozen=True)
class SstCosine:
    name: str = "sst"

    def table(self, trial) -> ThresholdTable:
        return speaker_specific_thresholds(trial.enrollment, COSINE)

    def decisions(self, trial, queries):
        best, top, _ = identify_many(queries, trial.enrollment, COSINE)
        return _gate(best, top, self.table(trial).tau[best])


@dataclass(frozen=True)
class SstRelNet:
    """Speaker-specific thresholds with the relation net; utterance pairs are scored
    with both argument orders averaged since the network is not symmetric."""

    assembly: Assembly = field(repr=False, default=None)
    name: str = "sst_relnet"

    def decisions(self, trial, queries):
        enr, q = _adapted(self.assembly, trial, queries)
        table = speaker_specific_thresholds(enr, SymmetricRelationScorer(self.assembly.relnet))
        best, top, _ = identify_many(q, enr, RelationScorer(self.assembly.relnet))
        return _gate(best, top, table.tau[best])


@dataclass(frozen=True)
class IdnRelNet:
    """Reject when the IDN score exceeds ``threshold``; otherwise take the relation argmax.

    When the set has more speakers than the IDN was trained for, the speaker
    subsample is drawn from the trial's own seed, so every query of a trial sees
    the same selection.
    """

    assembly: Assembly = field(repr=False, default=None)
    threshold: float = 0.5
    name: str = "idn"

    def imposter_scores(self, trial, queries):
        enr, q = _adapted(self.assembly, trial, queries)
        rng = np.random.default_rng([*trial.seed, 7]) if trial.seed else np.random.default_rng(7)
        x = idn_inputs(enr.centroids, q, self.assembly.m_train, rng)
        out, _ = mlp_forward(self.assembly.idn, x)
        return out[:, 0], enr, q

    def decisions(self, trial, queries):
        imp, enr, q = self.imposter_scores(trial, queries)
        best, _, _ = identify_many(q, enr, RelationScorer(self.assembly.relnet))
        predicted = np.where(imp > self.threshold, IMPOSTER, best)
        return predicted, imp, np.full(len(imp), float(self.threshold))


def decide(method, query, trial: SpeakerSetTrial) -> Decision:
    """Decision for a single query."""
    pred, score, tau = method.decisions(trial, np.atleast_2d(np.asarray(query, dtype=np.float64)))
    speaker = None if pred[0] == IMPOSTER else int(pred[0])
    return Decision(speaker, float(score[0]), float(tau[0]))


# --- scoring ---------------------------------------------------------------------

def confidence_interval(values) -> tuple:
    """``(mean, 1.96 * s / sqrt(n))`` with the sample standard deviation (ddof=1)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise TooFewSetsError("a confidence interval needs at least two speaker sets")
    if np.all(v == v[0]):
        return float(v[0]), 0.0
    return float(v.mean()), float(Z_95 * v.std(ddof=1) / math.sqrt(v.size))


@dataclass(frozen=True)
class EvalResult:
    method: str
    overall_acc_mean: float
    overall_acc_ci95: float
    imposter_acc_mean: float
    imposter_acc_ci95: float
    n_sets: int
    per_set_records: list

    def to_dict(self, with_records: bool = True) -> dict:
        d = {
            "method": self.method,
            "overall_acc_mean": self.overall_acc_mean,
            "overall_acc_ci95": self.overall_acc_ci95,
            "imposter_acc_mean": self.imposter_acc_mean,
            "imposter_acc_ci95": self.imposter_acc_ci95,
            "n_sets": self.n_sets,
        }
        if with_records:
            d["per_set_records"] = [dict(r) for r in self.per_set_records]
        return d


def score_trial(method, trial: SpeakerSetTrial) -> dict:
    """Per-set counts: enrolled queries right, imposters rejected, and the two rates."""
    pred, _, _ = method.decisions(trial, trial.all_queries)
    labels = trial.all_labels
    imp = labels == IMPOSTER
    correct = pred == labels
    n_imp = int(imp.sum())
    return {
        "enrolled_correct": int(correct[~imp].sum()),
        "n_enrolled": int((~imp).sum()),
        "imposters_rejected": int(correct[imp].sum()),
        "n_imposters": n_imp,
        "overall_acc": float(correct.mean()),
        "imposter_acc": float(correct[imp].mean()) if n_imp else float("nan"),
    }


def evaluate_method(method, trials) -> EvalResult:
    records = [score_trial(method, t) for t in trials]
    overall = confidence_interval([r["overall_acc"] for r in records])
    imposter = confidence_interval([r["imposter_acc"] for r in records])
    return EvalResult(getattr(method, "name", type(method).__name__), overall[0], overall[1],
                      imposter[0], imposter[1], len(records), records)


def calibrate_threshold(method, trials, grid) -> float:
    """Accuracy-maximising fixed threshold for ``method`` over labelled trials,
    pooling every query of every trial (ties go to the smallest threshold)."""
    best, top, labels = [], [], []
    for t in trials:
        b, s = method.best_scores(t, t.all_queries)
        best.append(b)
        top.append(s)
        labels.append(t.all_labels)
    return best_grid_threshold(np.concatenate(top), np.concatenate(best), np.concatenate(labels), grid)


def roc_auc(scores, positive) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties count one half)."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise MissingClassError("ROC-AUC needs both classes")
    ranks = rankdata(s)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def results_tsv(results) -> str:
    """Comparison table: one row per method, mean and CI for both accuracies."""
    lines = ["method\toverall_acc\toverall_ci95\timposter_acc\timposter_ci95"]
    for r in results:
        lines.append(f"{r.method}\t{r.overall_acc_mean!r}\t{r.overall_acc_ci95!r}"
                     f"\t{r.imposter_acc_mean!r}\t{r.imposter_acc_ci95!r}")
    return "\n".join(lines) + "\n"
