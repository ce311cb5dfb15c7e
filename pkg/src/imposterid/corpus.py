"""Labelled embedding corpus shared by training, evaluation and the file formats."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionMismatchError

PARTITIONS = ("unspecified", "train", "test")


@dataclass
class Corpus:
    """Embeddings grouped by speaker. ``speakers[sid]`` is an (n_utts, D) float64 array."""

    dim: int
    speakers: dict
    utt_ids: dict = field(default_factory=dict)
    partition: str = "unspecified"

    def __post_init__(self):
        if self.partition not in PARTITIONS:
            raise DataError(f"unknown partition {self.partition!r}")
        clean = {}
        for sid, emb in self.speakers.items():
            if not isinstance(sid, str) or not sid:
                raise DataError("speaker ids must be non-empty strings")
            arr = np.asarray(emb, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != self.dim:
                raise DimensionMismatchError(f"speaker {sid}: shape {arr.shape}, corpus dim {self.dim}")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"speaker {sid}: non-finite embedding")
            clean[sid] = arr
            ids = self.utt_ids.get(sid)
            if ids is None:
                self.utt_ids[sid] = [f"{sid}-{k:04d}" for k in range(arr.shape[0])]
            elif len(ids) != arr.shape[0]:
                raise DataError(f"speaker {sid}: {len(ids)} utterance ids for {arr.shape[0]} embeddings")
        self.speakers = clean

    @property
    def speaker_ids(self) -> list:
        return list(self.speakers)

    @property
    def n_utterances(self) -> int:
        return sum(len(v) for v in self.speakers.values())

    def subset(self, speaker_ids, partition=None) -> "Corpus":
        return Corpus(
            self.dim,
            {s: self.speakers[s] for s in speaker_ids},
            {s: list(self.utt_ids[s]) for s in speaker_ids},
            partition or self.partition,
        )

    def with_partition(self, partition: str) -> "Corpus":
        return self.subset(self.speaker_ids, partition)


def check_disjoint(train: Corpus, test: Corpus) -> None:
    """Unseen-speaker constraint: no speaker may appear in both partitions."""
    shared = set(train.speakers) & set(test.speakers)
    if shared:
        raise DataError(f"{len(shared)} speakers appear in both train and test, e.g. {sorted(shared)[0]}")
    if train.dim != test.dim:
        raise DimensionMismatchError(f"train dim {train.dim} != test dim {test.dim}")
