"""Frozen sentence embeddings: binary store, remote fetch, deterministic mock.

The student classifier never sees raw text, only fixed-width float32 vectors
keyed by the exact string they embed. Vectors come from a local store file,
a remote embedding service, or a seeded mock that derives a unit vector from
a hash of the key.
"""
from __future__ import annotations

import hashlib
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from urllib.parse import parse_qs, urlparse

import numpy as np
import requests

from .errors import (
    CorruptEntryError,
    DimensionMismatchError,
    MissingEmbeddingError,
    TransportError,
)

logger = logging.getLogger(__name__)

MAGIC = b"EMBS"
FORMAT_VERSION = 1
DEFAULT_DIM = 768

TOKEN_ENV_VAR = "EMBEDDING_API_TOKEN"


@dataclass
class EmbeddingStore:
    """In-memory map of key to float32 vector, with a provenance note."""

    dim: int
    entries: dict[str, np.ndarray] = field(default_factory=dict)
    provenance: str = ""

    def add(self, key: str, vector: np.ndarray) -> None:
        vec = np.asarray(vector, dtype=np.float32)
        if vec.shape != (self.dim,):
            raise DimensionMismatchError(key)
        if not np.all(np.isfinite(vec)):
            raise CorruptEntryError(key)
        self.entries[key] = vec

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)


def save_embeddings(store: EmbeddingStore, path: str | Path) -> None:
    """Write the store in the binary format (little-endian float32)."""
    path = Path(path)
    prov = store.provenance.encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIQ", FORMAT_VERSION, store.dim, len(store.entries)))
        fh.write(struct.pack("<I", len(prov)))
        fh.write(prov)
        for key, vec in store.entries.items():
            kb = key.encode("utf-8")
            fh.write(struct.pack("<I", len(kb)))
            fh.write(kb)
            fh.write(np.asarray(vec, dtype="<f4").tobytes())


def _load_binary(path: Path) -> EmbeddingStore:
    data = path.read_bytes()
    off = len(MAGIC)
    version, dim, count = struct.unpack_from("<IIQ", data, off)
    off += struct.calcsize("<IIQ")
    if version != FORMAT_VERSION:
        raise CorruptEntryError("<header>", f"unsupported store version {version}")
    (prov_len,) = struct.unpack_from("<I", data, off)
    off += 4
    provenance = data[off : off + prov_len].decode("utf-8")
    off += prov_len
    store = EmbeddingStore(dim=dim, provenance=provenance)
    vec_bytes = 4 * dim
    for _ in range(count):
        if off + 4 > len(data):
            raise CorruptEntryError("<eof>", "truncated store file")
        (key_len,) = struct.unpack_from("<I", data, off)
        off += 4
        key = data[off : off + key_len].decode("utf-8")
        off += key_len
        if off + vec_bytes > len(data):
            raise CorruptEntryError(key, f"truncated vector for {key!r}")
        vec = np.frombuffer(data[off : off + vec_bytes], dtype="<f4").copy()
        off += vec_bytes
        if not np.all(np.isfinite(vec)):
            raise CorruptEntryError(key)
        store.entries[key] = vec
    return store


def _load_csv(path: Path) -> EmbeddingStore:
    import csv as _csv

    store: EmbeddingStore | None = None
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = _csv.reader(fh)
        for row_index, row in enumerate(reader):
            if not row:
                continue
            if row_index == 0:
                try:
                    [float(v) for v in row[1:]]
                except ValueError:
                    continue  # header row
            key, values = row[0], row[1:]
            try:
                vec = np.asarray([float(v) for v in values], dtype=np.float32)
            except ValueError as exc:
                raise CorruptEntryError(key, f"unparseable values for {key!r}: {exc}")
            if store is None:
                store = EmbeddingStore(dim=len(vec), provenance=str(path.name))
            if len(vec) != store.dim:
                raise DimensionMismatchError(key)
            if not np.all(np.isfinite(vec)):
                raise CorruptEntryError(key)
            store.entries[key] = vec
    if store is None:
        raise CorruptEntryError("<empty>", f"no embeddings found in {path}")
    return store


def load_embeddings(path: str | Path) -> EmbeddingStore:
    """Load a store file; binary when it carries the magic, else CSV."""
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(len(MAGIC))
    if head == MAGIC:
        return _load_binary(path)
    return _load_csv(path)


class EmbeddingEndpoint:
    deterministic = False

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        raise NotImplementedError


class MockEmbeddingEndpoint(EmbeddingEndpoint):
    """Seeded hash-to-unit-vector generator; same key always maps to the
    same vector, independent of call order."""

    deterministic = True

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def _vector(self, key: str) -> np.ndarray:
        digest = hashlib.blake2b(
            key.encode("utf-8"),
            digest_size=32,
            key=str(self.seed).encode("utf-8")[:64],
        ).digest()
        rng = np.random.default_rng(np.frombuffer(digest, dtype=np.uint64))
        vec = rng.standard_normal(self.dim)
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            vec = np.ones(self.dim)
            norm = np.linalg.norm(vec)
        return (vec / norm).astype(np.float32)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self._vector(t) for t in texts]


class HttpEmbeddingEndpoint(EmbeddingEndpoint):
    """POSTs ``{"texts": [...]}`` and expects ``{"vectors": [[...], ...]}``."""

    def __init__(self, url: str, token_env: str = TOKEN_ENV_VAR, timeout: float = 60.0):
        self.url = url
        self.token_env = token_env
        self.timeout = timeout

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            resp = requests.post(
                self.url, json={"texts": list(texts)}, headers=headers,
                timeout=self.timeout,
            )
            resp.raise_for_status()
            vectors = resp.json()["vectors"]
        except (requests.RequestException, KeyError, ValueError) as exc:
            raise TransportError(f"embedding request failed: {exc}") from exc
        return [np.asarray(v, dtype=np.float32) for v in vectors]


def make_embedding_endpoint(
    url: str, dim: int = DEFAULT_DIM, seed: int = 0
) -> EmbeddingEndpoint:
    """Build an endpoint from a URL; ``mock:`` selects the seeded mock."""
    if url.startswith("mock:"):
        params = {k: v[-1] for k, v in parse_qs(urlparse(url).query).items()}
        if "dim" in params:
            dim = int(params["dim"])
        if "seed" in params:
            seed = int(params["seed"])
        return MockEmbeddingEndpoint(dim=dim, seed=seed)
    return HttpEmbeddingEndpoint(url)


class EmbeddingProvider:
    """Cache-first access to embeddings with optional remote fill-in."""

    def __init__(
        self,
        store: EmbeddingStore | None = None,
        endpoint: EmbeddingEndpoint | None = None,
        normalize: bool = True,
        dim: int | None = None,
    ):
        if store is None and endpoint is None:
            raise ValueError("provider needs a store, an endpoint, or both")
        if dim is None:
            dim = store.dim if store is not None else getattr(endpoint, "dim", None)
        if dim is None:
            raise ValueError("embedding dimension could not be inferred")
        self.dim = int(dim)
        self.store = store if store is not None else EmbeddingStore(dim=self.dim)
        if self.store.dim != self.dim:
            raise DimensionMismatchError(
                message=f"store dim {self.store.dim} != provider dim {self.dim}"
            )
        self.endpoint = endpoint
        self.normalize = normalize

    def _normalized(self, vec: np.ndarray, key: str) -> np.ndarray:
        vec = np.asarray(vec, dtype=np.float32)
        if vec.shape != (self.dim,):
            raise DimensionMismatchError(key)
        if not np.all(np.isfinite(vec)):
            raise CorruptEntryError(key)
        if self.normalize:
            norm = float(np.linalg.norm(vec.astype(np.float64)))
            if norm > 0.0:
                vec = (vec.astype(np.float64) / norm).astype(np.float32)
        return vec

    def get(self, key: str) -> np.ndarray:
        if key in self.store:
            # stores may hold raw vectors, so cache hits normalize too
            return self._normalized(self.store.entries[key], key)
        if self.endpoint is None:
            raise MissingEmbeddingError(key)
        vec = self._normalized(self.endpoint.embed([key])[0], key)
        self.store.entries[key] = vec
        return vec

    def get_many(self, keys: Sequence[str], batch_size: int = 256) -> np.ndarray:
        missing = [k for k in keys if k not in self.store]
        if missing:
            if self.endpoint is None:
                raise MissingEmbeddingError(missing[0])
            for start in range(0, len(missing), batch_size):
                chunk = missing[start : start + batch_size]
                for key, vec in zip(chunk, self.endpoint.embed(chunk)):
                    self.store.entries[key] = self._normalized(vec, key)
        return np.stack([self._normalized(self.store.entries[k], k) for k in keys])

    def save_cache(self, path: str | Path) -> None:
        save_embeddings(self.store, path)
