"""Tensor container, utterance manifests and corpus datasets.

Tensor file layout (all little-endian)::

    magic   4 bytes   b"VCTF"
    version u32       1
    dtype   u8        1 = float32
    ndim    u32       1..4
    dims    u64[ndim]
    payload float32[prod(dims)], row-major
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import random
import struct
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, FormatError

log = logging.getLogger(__name__)

MAGIC = b"VCTF"
VERSION = 1
DTYPE_FLOAT32 = 1
_HEADER = struct.Struct("<4sIBI")

AUDIO_SUFFIXES = (".wav",)


def encode_tensor(matrix) -> bytes:
    arr = np.asarray(matrix)
    if arr.ndim < 1 or arr.ndim > 4:
        raise FormatError(f"tensor must have 1-4 dims, got {arr.ndim}")
    if arr.dtype != np.float32:
        if not np.issubdtype(arr.dtype, np.floating) and not np.issubdtype(arr.dtype, np.integer):
            raise FormatError(f"unsupported dtype {arr.dtype}")
        arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise FormatError("tensor contains non-finite values")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + dims + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, dtype, ndim = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dtype != DTYPE_FLOAT32:
        raise FormatError(f"dtype mismatch: code {dtype}, expected {DTYPE_FLOAT32}")
    if not 1 <= ndim <= 4:
        raise FormatError(f"invalid ndim {ndim}")
    offset = _HEADER.size
    if len(blob) < offset + 8 * ndim:
        raise FormatError("truncated dims")
    shape = struct.unpack_from(f"<{ndim}Q", blob, offset)
    offset += 8 * ndim
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    payload = len(blob) - offset
    if payload != expected:
        raise FormatError(f"payload is {payload} bytes, header implies {expected}")
    return np.frombuffer(blob, dtype="<f4", offset=offset).reshape(shape).astype(np.float32)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path, matrix) -> None:
    atomic_write_bytes(path, encode_tensor(matrix))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


@dataclasses.dataclass
class UtteranceRecord:
    id: str
    speaker: str
    audio_path: str
    corpus_tag: str = "target"
    feature_path: str | None = None
    mel_path: str | None = None
    prosody_path: str | None = None
    rate: float = 1.0

    def __post_init__(self):
        if self.corpus_tag not in ("target", "external"):
            raise ConfigError(f"corpus_tag must be 'target' or 'external', got {self.corpus_tag!r}")
        if not 0.8 <= self.rate <= 1.2:
            raise ConfigError(f"rate {self.rate} outside [0.8, 1.2]")

    @property
    def source_id(self) -> str:
        """Id of the unaugmented utterance this record derives from."""
        return self.id.split("@", 1)[0]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "UtteranceRecord":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise FormatError(f"unknown manifest fields {sorted(unknown)}")
        return cls(**d)


def write_manifest(path, records: Iterable[UtteranceRecord]) -> None:
    text = "".join(r.to_json() + "\n" for r in records)
    atomic_write_bytes(path, text.encode())


def read_manifest(path) -> list[UtteranceRecord]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(UtteranceRecord.from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return out


def _audio_files(root: Path) -> list[Path]:
    return sorted(p for p in root.rglob("*") if p.suffix.lower() in AUDIO_SUFFIXES and p.is_file())


def scan_corpus(root, corpus_tag: str, speaker: str | None = None) -> list[UtteranceRecord]:
    """One record per WAV under ``root``.

    External speakers are named after the WAV's parent directory relative to
    the corpus root (``root/<speaker>/<utt>.wav``), falling back to the root
    directory name for flat layouts.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"corpus directory does not exist: {root}")
    records = []
    for wav in _audio_files(root):
        rel = wav.relative_to(root)
        spk = speaker
        if spk is None:
            spk = rel.parts[0] if len(rel.parts) > 1 else root.name
        uid = f"{corpus_tag}-" + "-".join(rel.with_suffix("").parts)
        records.append(UtteranceRecord(id=uid, speaker=spk, audio_path=str(wav), corpus_tag=corpus_tag))
    return records


def split_records(records: Sequence[UtteranceRecord], split_ratio: float, seed: int):
    if not 0.0 < split_ratio <= 1.0:
        raise ConfigError(f"split_ratio must be in (0, 1], got {split_ratio}")
    ordered = sorted(records, key=lambda r: r.id)
    random.Random(seed).shuffle(ordered)
    n_train = int(round(split_ratio * len(ordered)))
    if split_ratio < 1.0 and len(ordered) > 1:
        n_train = min(n_train, len(ordered) - 1)
    train, val = ordered[:n_train], ordered[n_train:]
    if not val:
        log.warning("split_ratio=%s leaves the validation set empty", split_ratio)
    return train, val


def build_manifest(target_dir, external_dir, split_ratio: float = 0.9, seed: int = 0,
                   target_speaker: str = "target"):
    """Scan both corpora and split the target corpus into train/validation.

    External records all land in the training set.
    """
    target = scan_corpus(target_dir, "target", speaker=target_speaker)
    if not target:
        raise ConfigError(f"target corpus {target_dir} contains no audio")
    external = scan_corpus(external_dir, "external")
    train, val = split_records(target, split_ratio, seed)
    return train + external, val


def augment_records(records: Iterable[UtteranceRecord], rates: Sequence[float]) -> list[UtteranceRecord]:
    """Expand target records with speaking-rate copies; external records pass through.

    Copies inherit their source's split side simply by being derived from the
    already split list.
    """
    out = []
    for rec in records:
        out.append(rec)
        if rec.corpus_tag != "target":
            continue
        for rate in rates:
            if rate == 1.0:
                continue
            out.append(dataclasses.replace(rec, id=f"{rec.id}@r{rate:.2f}", rate=float(rate),
                                           feature_path=None, mel_path=None, prosody_path=None))
    return out


def parallel_map(fn: Callable, items: Sequence, workers: int = 1) -> Iterator:
    """Apply ``fn`` to every item using a thread pool; results come back in input order."""
    if workers <= 1:
        for item in items:
            yield fn(item)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, item) for item in items]
        for fut in futures:
            yield fut.result()


class CorpusDataset:
    """In-memory view of prepared features and mels for a list of records."""

    def __init__(self, records: Sequence[UtteranceRecord], load_mels: bool = True, workers: int = 1):
        self.records = list(records)
        missing = [r.id for r in self.records
                   if r.feature_path is None or (load_mels and r.mel_path is None)]
        if missing:
            raise ConfigError(f"records without prepared paths: {missing[:10]}")

        def load(rec):
            feats = read_tensor(rec.feature_path)
            mel = read_tensor(rec.mel_path) if load_mels else None
            return feats, mel

        loaded = list(parallel_map(load, self.records, workers))
        self.features = [f for f, _ in loaded]
        self.mels = [m for _, m in loaded]

    @classmethod
    def from_arrays(cls, records, features, mels=None) -> "CorpusDataset":
        """Wrap arrays already in memory (no file access)."""
        ds = cls.__new__(cls)
        ds.records = list(records)
        ds.features = list(features)
        ds.mels = list(mels) if mels is not None else [None] * len(ds.records)
        return ds

    def __len__(self):
        return len(self.records)

    def __getitem__(self, idx):
        return self.records[idx], self.features[idx], self.mels[idx]
