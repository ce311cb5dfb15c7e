"""Seeded synthetic speaker embeddings with controllable separability and domain shift.

Each speaker has a mean direction drawn uniformly on the unit sphere; an utterance
is ``normalize(mean + spread * e)`` with ``e ~ N(0, I)``. Random streams are keyed
per speaker, which makes every speaker's data independent of generation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Corpus
from .errors import ConfigError


@dataclass(frozen=True)
class SynthConfig:
    dim: int = 16
    n_speakers: int = 100
    utterances_per_speaker: int = 20
    intra_spread: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ConfigError("dim", "must be >= 2")
        if self.n_speakers < 1 or self.utterances_per_speaker < 1:
            raise ConfigError("n_speakers", "counts must be >= 1")
        if self.intra_spread < 0:
            raise ConfigError("intra_spread", "must be >= 0")


@dataclass(frozen=True)
class ShiftConfig:
    bias_scale: float = 0.5
    extra_noise: float = 0.2
    seed: int = 1

    def __post_init__(self):
        if self.bias_scale < 0 or self.extra_noise < 0:
            raise ConfigError("shift", "scales must be >= 0")


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.sum(x * x, axis=-1, keepdims=True))


def speaker_id(index: int) -> str:
    return f"spk{index:05d}"


def generate_corpus(config: SynthConfig, partition: str = "unspecified") -> Corpus:
    d = config.dim
    speakers, utts = {}, {}
    for idx in range(config.n_speakers):
        rng = np.random.default_rng([config.seed, idx])
        mean = _normalize_rows(rng.normal(size=d))
        noise = rng.normal(size=(config.utterances_per_speaker, d))
        sid = speaker_id(idx)
        speakers[sid] = _normalize_rows(mean + config.intra_spread * noise)
        utts[sid] = [f"{sid}-u{k:04d}" for k in range(config.utterances_per_speaker)]
    return Corpus(d, speakers, utts, partition)


def split_corpus(corpus: Corpus, n_train: int):
    """First ``n_train`` speakers become the train partition, the rest the test partition."""
    ids = corpus.speaker_ids
    if not 0 < n_train < len(ids):
        raise ConfigError("train_speakers", f"must lie in (0, {len(ids)})")
    return corpus.subset(ids[:n_train], "train"), corpus.subset(ids[n_train:], "test")


def shift_direction(shift: ShiftConfig, dim: int) -> np.ndarray:
    rng = np.random.default_rng([shift.seed, 0])
    return _normalize_rows(rng.normal(size=dim))


def apply_domain_shift(corpus: Corpus, shift: ShiftConfig) -> Corpus:
    """Add a shared bias direction plus fresh noise to every embedding, then renormalize."""
    d = corpus.dim
    direction = shift_direction(shift, d)
    speakers = {}
    for idx, (sid, emb) in enumerate(corpus.speakers.items()):
        rng = np.random.default_rng([shift.seed, 1, idx])
        noise = rng.normal(size=emb.shape)
        speakers[sid] = _normalize_rows(emb + shift.bias_scale * direction + shift.extra_noise * noise)
    return Corpus(d, speakers, {s: list(u) for s, u in corpus.utt_ids.items()}, corpus.partition)


def separability(corpus: Corpus):
    """Mean intra-speaker and inter-speaker cosine over all utterance pairs.

    Returns ``(intra_mean, inter_mean, gap)``.
    """
    x = np.concatenate([_normalize_rows(e) for e in corpus.speakers.values()])
    owner = np.concatenate([np.full(len(e), i) for i, e in enumerate(corpus.speakers.values())])
    sims = x @ x.T
    same = owner[:, None] == owner[None, :]
    off_diag = ~np.eye(len(x), dtype=bool)
    intra = sims[same & off_diag].mean() if (same & off_diag).any() else float("nan")
    inter = sims[~same].mean() if (~same).any() else float("nan")
    return float(intra), float(inter), float(intra - inter)
