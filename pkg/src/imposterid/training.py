"""Episodic sampling and the three-stage training schedule.

Stage A trains the adapter with a softmax speaker classifier, stage B adds the
relation network on imposter-free episodes, stage C trains the imposter detection
network (optionally end to end) on episodes that mix enrolled and imposter queries.
One episode is one optimizer step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .corpus import Corpus
from .errors import ConfigError, InsufficientSpeakersError, InsufficientUtterancesError
from .nnet import (
    AdamState,
    Assembly,
    MlpModel,
    adam_step,
    episode_objective,
    idn_inputs,
    init_assembly,
    mlp_backward,
    mlp_forward,
    relation_matrix,
)

log = logging.getLogger(__name__)

IMPOSTER = -1


@dataclass(frozen=True)
class EpisodeConfig:
    m_train: int = 80
    n_support: int = 1
    queries_per_speaker: int = 2
    imposter_queries: int = 160

    def __post_init__(self):
        for name in ("m_train", "n_support", "queries_per_speaker"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.imposter_queries < 0:
            raise ConfigError("imposter_queries", "must be >= 0")

    @classmethod
    def balanced(cls, m_train: int, n_support: int = 1, queries_per_speaker: int = 2) -> "EpisodeConfig":
        return cls(m_train, n_support, queries_per_speaker, m_train * queries_per_speaker)


FULL_EPISODE = EpisodeConfig()
DESK_EPISODE = EpisodeConfig.balanced(10)


@dataclass(frozen=True)
class Episode:
    support: np.ndarray  # (M, N, D)
    support_speakers: tuple
    queries: np.ndarray  # (Q, D)
    labels: np.ndarray  # support index or IMPOSTER
    query_speakers: tuple


def sample_episode(corpus: Corpus, config: EpisodeConfig, rng, with_imposters: bool = True) -> Episode:
    """Draw one episode: ``m_train`` support speakers without replacement, and per
    speaker ``n_support + queries_per_speaker`` distinct utterances. Imposter queries
    come from speakers outside the support set."""
    need = config.n_support + config.queries_per_speaker
    ids = corpus.speaker_ids
    eligible = [s for s in ids if len(corpus.speakers[s]) >= need]
    spare = 1 if with_imposters and config.imposter_queries > 0 else 0
    if len(ids) < config.m_train + spare:
        raise InsufficientSpeakersError(f"{len(ids)} speakers, episode needs {config.m_train + spare}")
    if len(eligible) < config.m_train:
        raise InsufficientUtterancesError(
            f"only {len(eligible)} speakers have >= {need} utterances, episode needs {config.m_train}"
        )

    chosen = [eligible[i] for i in rng.choice(len(eligible), size=config.m_train, replace=False)]
    support, queries, labels, qspk = [], [], [], []
    for j, sid in enumerate(chosen):
        emb = corpus.speakers[sid]
        pick = rng.choice(len(emb), size=need, replace=False)
        support.append(emb[pick[: config.n_support]])
        queries.append(emb[pick[config.n_support:]])
        labels.extend([j] * config.queries_per_speaker)
        qspk.extend([sid] * config.queries_per_speaker)

    if with_imposters and config.imposter_queries > 0:
        chosen_set = set(chosen)
        others = [s for s in ids if s not in chosen_set]
        sizes = np.array([len(corpus.speakers[s]) for s in others])
        if sizes.sum() < config.imposter_queries:
            raise InsufficientUtterancesError(
                f"{sizes.sum()} imposter utterances available, episode needs {config.imposter_queries}"
            )
        flat = np.sort(rng.choice(sizes.sum(), size=config.imposter_queries, replace=False))
        owner = np.searchsorted(np.cumsum(sizes), flat, side="right")
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        imp = [corpus.speakers[others[o]][f - starts[o]] for o, f in zip(owner, flat)]
        queries.append(np.asarray(imp))
        labels.extend([IMPOSTER] * config.imposter_queries)
        qspk.extend(others[o] for o in owner)

    return Episode(
        np.asarray(support),
        tuple(chosen),
        np.concatenate(queries),
        np.asarray(labels, dtype=np.int64),
        tuple(qspk),
    )


@dataclass
class TrainReport:
    """One record per episode (stage A: one per epoch, loss in ``l_total``)."""

    records: list = field(default_factory=list)

    def add(self, episode: int, stage: str, l_rel: float, l_imp: float, l_total: float):
        self.records.append((episode, stage, float(l_rel), float(l_imp), float(l_total)))

    def extend(self, other: "TrainReport"):
        self.records.extend(other.records)

    def losses(self, stage: Optional[str] = None, column: int = 4) -> np.ndarray:
        return np.array([r[column] for r in self.records if stage is None or r[1] == stage])

    def to_tsv(self) -> str:
        lines = ["episode\tstage\tl_relation\tl_imposter\tl_total"]
        lines += [f"{e}\t{s}\t{lr!r}\t{li!r}\t{lt!r}" for e, s, lr, li, lt in self.records]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; the reference episode layout is :data:`FULL_EPISODE`."""

    episode: EpisodeConfig = DESK_EPISODE
    epochs_a: int = 10
    episodes_b: int = 500
    episodes_c: int = 500
    lr_a: float = 1e-3
    lr_b: float = 1e-3
    lr_c: float = 1e-4
    lr_idn: float = 1e-2
    batch_size_a: int = 64
    lam: float = 1.0
    weight_decay: float = 2e-5
    freeze_adapter_b: bool = False
    end_to_end: bool = True
    relnet_hidden: tuple = (256, 64)
    idn_hidden: tuple = (256, 64)
    dropout: float = 0.1
    adapter_mult: int = 2


def _softmax_xent(logits: np.ndarray, y: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = len(y)
    loss = -np.mean(np.log(p[np.arange(n), y]))
    g = p.copy()
    g[np.arange(n), y] -= 1.0
    return float(loss), g / n, p


def train_stage_a(adapter: MlpModel, corpus: Corpus, epochs: int, rng, lr: float = 1e-3,
                  batch_size: int = 64, weight_decay: float = 2e-5, return_head: bool = False):
    """Softmax speaker classification through the adapter.

    A linear head over the corpus speakers is trained alongside and discarded
    unless ``return_head``. Returns ``(adapter, report)`` or ``(adapter, head, report)``.
    """
    ids = corpus.speaker_ids
    x = np.concatenate([corpus.speakers[s] for s in ids])
    y = np.concatenate([np.full(len(corpus.speakers[s]), k) for k, s in enumerate(ids)])
    head = MlpModel.init([corpus.dim, len(ids)], ["identity"], rng)
    adapter = adapter.copy()
    sa = AdamState.for_model(adapter, lr, weight_decay=weight_decay)
    sh = AdamState.for_model(head, lr, weight_decay=weight_decay)
    report = TrainReport()
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), batch_size):
            batch = order[start:start + batch_size]
            emb, t_ad = mlp_forward(adapter, x[batch], rng)
            logits, t_head = mlp_forward(head, emb, rng)
            loss, g, _ = _softmax_xent(logits, y[batch])
            g_head, g_emb = mlp_backward(head, t_head, g)
            g_ad, _ = mlp_backward(adapter, t_ad, g_emb)
            head, sh = adam_step(head, g_head, sh)
            adapter, sa = adam_step(adapter, g_ad, sa)
            total += loss * len(batch)
        report.add(epoch, "a", 0.0, 0.0, total / len(x))
        log.debug("stage a epoch %d loss %.4f", epoch, total / len(x))
    if return_head:
        return adapter, head, report
    return adapter, report


def train_stage_b(assembly: Assembly, corpus: Corpus, config: EpisodeConfig, episodes: int, rng,
                  lr: float = 1e-3, freeze_adapter: bool = False, weight_decay: float = 2e-5):
    """Relation network on imposter-free episodes. Returns ``(assembly, report)``."""
    asm = assembly.copy()
    s_rel = AdamState.for_model(asm.relnet, lr, weight_decay=weight_decay)
    s_ad = AdamState.for_model(asm.adapter, lr, weight_decay=weight_decay)
    report = TrainReport()
    for e in range(episodes):
        ep = sample_episode(corpus, config, rng, with_imposters=False)
        out = episode_objective(asm, ep.support, ep.queries, ep.labels, rng=rng,
                                relation=True, imposter=False)
        asm.relnet, s_rel = adam_step(asm.relnet, out.grads["relnet"], s_rel)
        if not freeze_adapter:
            asm.adapter, s_ad = adam_step(asm.adapter, out.grads["adapter"], s_ad)
        report.add(e, "b", out.l_relation, 0.0, out.l_total)
    asm.stage = "b"
    return asm, report


def train_stage_c(assembly: Assembly, corpus: Corpus, config: EpisodeConfig, episodes: int, rng,
                  lam: float = 1.0, end_to_end: bool = True, lr: float = 1e-4,
                  lr_idn: Optional[float] = None, weight_decay: float = 2e-5):
    """Joint relation + imposter objective on episodes with imposter queries.

    ``lr`` applies to the pretrained adapter and relation net, ``lr_idn`` (default:
    same as ``lr``) to the freshly initialised IDN. With ``end_to_end=False`` only the
    IDN is updated. With ``lam == 0`` the IDN is outside the objective and is left
    untouched.
    """
    asm = assembly.copy()
    rates = {"adapter": lr, "relnet": lr, "idn": lr if lr_idn is None else lr_idn}
    states = {name: AdamState.for_model(getattr(asm, name), rates[name], weight_decay=weight_decay)
              for name in rates}
    trainable = ["adapter", "relnet", "idn"] if end_to_end else ["idn"]
    if lam == 0:
        trainable.remove("idn")
    report = TrainReport()
    for e in range(episodes):
        ep = sample_episode(corpus, config, rng, with_imposters=True)
        out = episode_objective(asm, ep.support, ep.queries, ep.labels, lam=lam, rng=rng)
        for name in trainable:
            model, states[name] = adam_step(getattr(asm, name), out.grads[name], states[name])
            setattr(asm, name, model)
        report.add(e, "c", out.l_relation, out.l_imposter, out.l_total)
    asm.stage = "c"
    return asm, report


def run_training(train: Corpus, cfg: TrainConfig, seed: int, start: str = "a",
                 assembly: Optional[Assembly] = None, after_stage=None):
    """Run stages ``start``..C. ``after_stage(name, assembly)`` may return a replacement
    assembly (the CLI uses it to round-trip through checkpoints)."""
    stages = "abc"
    if start not in stages:
        raise ConfigError("stage", f"unknown stage {start!r}")
    if start != "a" and assembly is None:
        raise ConfigError("stage", "resuming needs the previous stage's checkpoint")
    if assembly is None:
        assembly = init_assembly(train.dim, cfg.episode.m_train, seed, cfg.relnet_hidden,
                                 cfg.idn_hidden, cfg.dropout, cfg.adapter_mult)
    report = TrainReport()
    for stage in stages[stages.index(start):]:
        rng = np.random.default_rng([seed, 100 + stages.index(stage)])
        if stage == "a":
            adapter, rep = train_stage_a(assembly.adapter, train, cfg.epochs_a, rng, cfg.lr_a,
                                         cfg.batch_size_a, cfg.weight_decay)
            assembly = assembly.copy()
            assembly.adapter = adapter
            assembly.stage = "a"
        elif stage == "b":
            assembly, rep = train_stage_b(assembly, train, cfg.episode, cfg.episodes_b, rng,
                                          cfg.lr_b, cfg.freeze_adapter_b, cfg.weight_decay)
        else:
            assembly, rep = train_stage_c(assembly, train, cfg.episode, cfg.episodes_c, rng,
                                          cfg.lam, cfg.end_to_end, cfg.lr_c, cfg.lr_idn,
                                          cfg.weight_decay)
        report.extend(rep)
        if after_stage is not None:
            assembly = after_stage(stage, assembly) or assembly
    return assembly, report


# --- held-out diagnostics ---------------------------------------------------------

def relation_separation(assembly: Assembly, corpus: Corpus, config: EpisodeConfig,
                        n_episodes: int, rng) -> float:
    """Mean relation score of matched pairs minus that of mismatched pairs."""
    matched, mismatched = [], []
    for _ in range(n_episodes):
        ep = sample_episode(corpus, config, rng, with_imposters=False)
        cents = assembly.adapt(ep.support).mean(axis=1)
        r, _ = relation_matrix(assembly.relnet, assembly.adapt(ep.queries), cents)
        hit = np.zeros_like(r, dtype=bool)
        hit[np.arange(len(r)), ep.labels] = True
        matched.append(r[hit])
        mismatched.append(r[~hit])
    return float(np.concatenate(matched).mean() - np.concatenate(mismatched).mean())


def imposter_scores(assembly: Assembly, corpus: Corpus, config: EpisodeConfig,
                    n_episodes: int, rng):
    """IDN scores and imposter flags pooled over held-out episodes."""
    scores, flags = [], []
    for _ in range(n_episodes):
        ep = sample_episode(corpus, config, rng, with_imposters=True)
        cents = assembly.adapt(ep.support).mean(axis=1)
        x = idn_inputs(cents, assembly.adapt(ep.queries), assembly.m_train, rng)
        out, _ = mlp_forward(assembly.idn, x)
        scores.append(out[:, 0])
        flags.append(ep.labels == IMPOSTER)
    return np.concatenate(scores), np.concatenate(flags)
