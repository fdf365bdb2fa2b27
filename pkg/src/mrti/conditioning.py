"""Vocabulary, token embeddings, the text encoder and multiresolution embedding sets."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .diffusion import NULL_ID, ModelParams, _write_blob_file, encode_batch, read_blob_file
from .errors import ConfigurationError, CorruptFile, DomainError, LookupFailure

CONCEPT_FORMAT = "mrti-concept/1"

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_\-]*$")


@dataclass
class Vocabulary:
    tokens: tuple[str, ...]
    reserved: set[str] = field(default_factory=set)

    def __post_init__(self):
        self.tokens = tuple(self.tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigurationError("vocabulary tokens must be unique")
        if self.tokens[NULL_ID] != "<null>":
            raise ConfigurationError("NULL token must sit at index 0")
        self._index = {tok: i for i, tok in enumerate(self.tokens)}

    @property
    def null_id(self) -> int:
        return NULL_ID

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def id(self, word: str) -> int:
        try:
            return self._index[word.lower()]
        except KeyError:
            raise LookupFailure(f"unknown word {word!r}") from None

    def tokenize(self, text: str) -> list[int]:
        return [self.id(w) for w in text.split()]

    def register(self, name: str) -> None:
        """Reserve a pseudo-word name; it may not shadow a real word."""
        if not _NAME_RE.match(name):
            raise ConfigurationError(f"invalid pseudo-word name {name!r}")
        if name.lower() in self._index:
            raise ConfigurationError(f"pseudo-word {name!r} collides with a vocabulary word")
        self.reserved.add(name)


@dataclass
class MultiResEmbeddingSet:
    """Learned embeddings ``emb_0 .. emb_{T-1}`` for one pseudo-word."""

    name: str
    embeddings: np.ndarray

    def __post_init__(self):
        self.embeddings = np.array(self.embeddings, dtype=np.float64, ndmin=2)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ConfigurationError("embedding set must be a non-empty T x d matrix")
        if not np.all(np.isfinite(self.embeddings)):
            raise ConfigurationError(f"embedding set {self.name!r} has non-finite entries")
        if not _NAME_RE.match(self.name):
            raise ConfigurationError(f"invalid pseudo-word name {self.name!r}")

    @property
    def T(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    def save(self, path) -> None:
        header = {"format": CONCEPT_FORMAT, "name": self.name, "T": self.T, "d": self.d}
        _write_blob_file(path, header, self.embeddings)

    @classmethod
    def load(cls, path) -> "MultiResEmbeddingSet":
        header, blob = read_blob_file(path)
        if header.get("format") != CONCEPT_FORMAT:
            raise ConfigurationError(f"{path}: not a concept file (format {header.get('format')!r})")
        T, d = header["T"], header["d"]
        if blob.size != T * d:
            raise CorruptFile(f"{path}: expected {T * d} values, found {blob.size}")
        return cls(header["name"], blob.reshape(T, d))


Entry = Union[int, np.ndarray]


def embed_sequence(table: np.ndarray, seq: Sequence[Entry], max_len: int) -> np.ndarray:
    """Look up token rows, substituting resolved pseudo-word vectors as given.

    Short sequences are padded with the NULL row.
    """
    if len(seq) > max_len:
        raise ConfigurationError(f"sequence of length {len(seq)} exceeds max_len {max_len}")
    rows = np.repeat(table[NULL_ID][None, :], max_len, axis=0)
    for i, entry in enumerate(seq):
        if isinstance(entry, (int, np.integer)):
            if not 0 <= entry < table.shape[0]:
                raise LookupFailure(f"unknown token id {entry}")
            rows[i] = table[entry]
        else:
            vec = np.asarray(entry, dtype=np.float64)
            if vec.shape != (table.shape[1],):
                raise ConfigurationError(f"pseudo-word vector has shape {vec.shape}, expected ({table.shape[1]},)")
            rows[i] = vec
    return rows


def encode(rows: np.ndarray, params: ModelParams) -> np.ndarray:
    """Conditioning vector for one (L, d) row matrix."""
    cfg = params.config
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape != (cfg.max_len, cfg.embed_dim):
        raise ConfigurationError(f"rows must have shape ({cfg.max_len}, {cfg.embed_dim}), got {rows.shape}")
    return encode_batch(params, rows[None])[0]


def null_conditioning(params: ModelParams) -> np.ndarray:
    if params._null_cond is None:
        rows = embed_sequence(params["token_table"], [], params.config.max_len)
        params._null_cond = encode(rows, params)
    return params._null_cond


def _check_time(t: float) -> None:
    if not (0.0 <= t <= 1.0):
        raise DomainError(f"diffusion time {t!r} outside [0, 1]")


def bucket_index(t: float, T: int) -> int:
    _check_time(t)
    if T < 1:
        raise DomainError("bucket count must be at least 1")
    return min(int(math.floor(t * T)), T - 1)


def bucket_indices(t: np.ndarray, T: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise DomainError("diffusion time outside [0, 1]")
    return np.minimum(np.floor(t * T).astype(np.int64), T - 1)


def bucket_center(k: int, T: int) -> float:
    return (k + 0.5) / T


def embedding_at(emb_set: MultiResEmbeddingSet, t: float) -> np.ndarray:
    """Piecewise-linear interpolation through the bucket centers, clamped at the ends."""
    _check_time(t)
    E = emb_set.embeddings
    T = emb_set.T
    pos = t * T - 0.5  # fractional bucket coordinate; centers sit at integers
    if pos <= 0.0:
        return E[0].copy()
    if pos >= T - 1:
        return E[T - 1].copy()
    nearest = round(pos)
    if abs(pos - nearest) <= 1e-12:
        # t landed on a center up to representation error
        return E[nearest].copy()
    k = int(math.floor(pos))
    w = pos - k
    return (1.0 - w) * E[k] + w * E[k + 1]


def save_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
