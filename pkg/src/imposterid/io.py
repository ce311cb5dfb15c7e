"""File formats: embedding corpora, checkpoints, trial pairs and reports.

Every writer goes through :func:`atomic_write`, so a failed run never leaves a
partial file behind. Readers raise :class:`FormatError` naming the file and the
byte offset (binary) or line number (text) of the problem.

Corpus file (little endian)::

    b"SPKEMB1"  uint32 D  uint64 record_count  uint8 partition
    record*: uint32 n + n bytes speaker id (UTF-8)
             uint32 n + n bytes utterance id (UTF-8)
             D x float32

Checkpoint file::

    b"IMPCKPT1"  uint32 n  n bytes JSON header  float32 blob

The JSON header lists each network's architecture; the blob holds every
parameter array in header order (weight then bias per layer), row major.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Optional

import numpy as np

from .corpus import PARTITIONS, Corpus
from .errors import DataError, FormatError
from .nnet import NETWORKS, Assembly, MlpModel
from .thresholding import TrialPair

CORPUS_MAGIC = b"SPKEMB1"
CHECKPOINT_MAGIC = b"IMPCKPT1"
CHECKPOINT_VERSION = 1
TRIAL_LABELS = {True: "target", False: "nontarget"}


def atomic_write(path, data) -> None:
    """Write bytes or text to ``path`` via a temporary file and rename."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


# --- corpus ------------------------------------------------------------------------

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def corpus_to_bytes(corpus: Corpus) -> bytes:
    parts = [
        CORPUS_MAGIC,
        struct.pack("<IQB", corpus.dim, corpus.n_utterances, PARTITIONS.index(corpus.partition)),
    ]
    for sid, emb in corpus.speakers.items():
        spk = _pack_str(sid)
        vecs = np.asarray(emb, dtype="<f4")
        for utt, vec in zip(corpus.utt_ids[sid], vecs):
            parts += [spk, _pack_str(utt), vec.tobytes()]
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.path, self.pos = data, path, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {what}", self.path, self.pos)
        out = self.data[self.pos: self.pos + n]
        self.pos += n
        return out

    def string(self, what: str) -> str:
        start = self.pos
        (n,) = struct.unpack("<I", self.take(4, f"{what} length"))
        try:
            s = self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{what} is not valid UTF-8", self.path, start) from exc
        if not s:
            raise FormatError(f"empty {what}", self.path, start)
        return s


def corpus_from_bytes(data: bytes, path=None) -> Corpus:
    r = _Reader(data, path)
    if r.take(len(CORPUS_MAGIC), "magic") != CORPUS_MAGIC:
        raise FormatError("bad magic, not a corpus file", path, 0)
    dim, count, part = struct.unpack("<IQB", r.take(13, "header"))
    if dim < 1:
        raise FormatError("dimension must be positive", path, len(CORPUS_MAGIC))
    if part >= len(PARTITIONS):
        raise FormatError(f"unknown partition tag {part}", path, len(CORPUS_MAGIC) + 12)
    groups: dict = {}
    ids: dict = {}
    for _ in range(count):
        start = r.pos
        sid = r.string("speaker id")
        utt = r.string("utterance id")
        vec = np.frombuffer(r.take(4 * dim, "vector"), dtype="<f4").astype(np.float64)
        if not np.all(np.isfinite(vec)):
            raise FormatError("non-finite vector component", path, start)
        groups.setdefault(sid, []).append(vec)
        ids.setdefault(sid, []).append(utt)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after {count} records", path, r.pos)
    return Corpus(dim, {s: np.asarray(v) for s, v in groups.items()}, ids, PARTITIONS[part])


def write_corpus(path, corpus: Corpus) -> None:
    atomic_write(path, corpus_to_bytes(corpus))


def read_corpus(path) -> Corpus:
    """Load a binary corpus file, or JSON lines when the file ends in ``.jsonl``."""
    if str(path).endswith(".jsonl"):
        return read_corpus_jsonl(path)
    return corpus_from_bytes(_read_bytes(path), path)


def read_corpus_jsonl(path, partition: str = "unspecified") -> Corpus:
    """One ``{"speaker": ..., "utt": ..., "vec": [...]}`` object per line."""
    groups: dict = {}
    ids: dict = {}
    dim: Optional[int] = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid, utt, vec = str(rec["speaker"]), str(rec["utt"]), np.asarray(rec["vec"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"line {lineno}: {exc}", path) from exc
            if vec.ndim != 1 or (dim is not None and vec.shape[0] != dim):
                raise FormatError(f"line {lineno}: vector has shape {vec.shape}, expected ({dim},)", path)
            dim = vec.shape[0]
            groups.setdefault(sid, []).append(vec)
            ids.setdefault(sid, []).append(utt)
    if dim is None:
        raise FormatError("no records", path)
    try:
        return Corpus(dim, {s: np.asarray(v) for s, v in groups.items()}, ids, partition)
    except DataError as exc:
        raise FormatError(str(exc), path) from exc


# --- checkpoints ---------------------------------------------------------------------

def quantize(assembly: Assembly) -> Assembly:
    """Round every parameter to float32 precision (what a checkpoint stores)."""
    out = assembly.copy()
    for model in out.networks().values():
        for layer in model.layers:
            layer.weight = layer.weight.astype(np.float32).astype(np.float64)
            layer.bias = layer.bias.astype(np.float32).astype(np.float64)
    return out


def checkpoint_to_bytes(assembly: Assembly) -> bytes:
    nets = assembly.networks()
    header = {
        "version": CHECKPOINT_VERSION,
        "dim": assembly.dim,
        "m_train": assembly.m_train,
        "seed": assembly.seed,
        "stage": assembly.stage,
        "networks": {name: nets[name].architecture() for name in NETWORKS if name in nets},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(
        np.ascontiguousarray(p, dtype="<f4").tobytes()
        for name in NETWORKS if name in nets
        for p in nets[name].params()
    )
    return CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + blob


def checkpoint_from_bytes(data: bytes, path=None) -> Assembly:
    r = _Reader(data, path)
    if r.take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad magic, not a checkpoint", path, 0)
    (n,) = struct.unpack("<I", r.take(4, "header length"))
    start = r.pos
    try:
        header = json.loads(r.take(n, "header").decode("utf-8"))
        if header["version"] != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {header['version']}", path, start)
        models = {name: MlpModel.from_architecture(arch) for name, arch in header["networks"].items()}
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"bad checkpoint header: {exc}", path, start) from exc
    if "adapter" not in models or set(models) - set(NETWORKS):
        raise FormatError(f"unexpected network set {sorted(models)}", path, start)
    for name in NETWORKS:
        if name not in models:
            continue
        for layer in models[name].layers:
            for attr in ("weight", "bias"):
                arr = getattr(layer, attr)
                raw = r.take(4 * arr.size, f"{name} parameters")
                setattr(layer, attr, np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(arr.shape))
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes", path, r.pos)
    asm = Assembly(models["adapter"], models.get("relnet"), models.get("idn"),
                   int(header["m_train"]), int(header["seed"]), str(header["stage"]))
    if asm.dim != header["dim"]:
        raise FormatError(f"adapter dimension {asm.dim} != header dimension {header['dim']}", path, start)
    return asm


def write_checkpoint(path, assembly: Assembly) -> None:
    atomic_write(path, checkpoint_to_bytes(assembly))


def read_checkpoint(path) -> Assembly:
    return checkpoint_from_bytes(_read_bytes(path), path)


# --- trial pairs -------------------------------------------------------------------

def trials_to_tsv(trials) -> str:
    """``score<TAB>target`` or ``score<TAB>nontarget``, one trial per line."""
    return "".join(f"{float(t.score)!r}\t{TRIAL_LABELS[bool(t.is_target)]}\n" for t in trials)


def trials_from_tsv(text: str, path=None) -> list:
    """Inverse of :func:`trials_to_tsv`; blank lines and ``#`` comments are skipped."""
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise FormatError(f"line {lineno}: expected 2 tab-separated fields, got {len(fields)}", path)
        try:
            score = float(fields[0])
        except ValueError as exc:
            raise FormatError(f"line {lineno}: bad score {fields[0]!r}", path) from exc
        if not np.isfinite(score):
            raise FormatError(f"line {lineno}: score must be finite", path)
        label = fields[1].strip()
        if label not in TRIAL_LABELS.values():
            raise FormatError(f"line {lineno}: label must be target or nontarget, got {label!r}", path)
        out.append(TrialPair(score, label == TRIAL_LABELS[True]))
    return out


def write_trials(path, trials) -> None:
    atomic_write(path, trials_to_tsv(trials))


def read_trials(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return trials_from_tsv(fh.read(), path)


# --- JSON reports -------------------------------------------------------------------

def dumps_json(obj) -> str:
    """Canonical JSON (sorted keys, fixed indent, trailing newline) for reports."""
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def write_json(path, obj) -> None:
    atomic_write(path, dumps_json(obj))


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", path, exc.pos) from exc
