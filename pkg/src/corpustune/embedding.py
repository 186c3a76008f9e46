"""Vector space for retrieval: hashed-feature reference embedder, cosine
distance, and the client for an external embedding endpoint.

The reference embedder is a linear model: token unigrams and bigrams are
signed-hashed into ``hash_dim`` buckets, L2-normalized, projected by a dense
matrix and normalized again. It is small enough to retrain in seconds while
exposing the same contract an external transformer endpoint would.
"""

from __future__ import annotations

import hashlib
import re
import struct
import time
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

from .errors import (
    DegenerateEmbeddingError,
    PreconditionError,
    TransportError,
    UnembeddableTextError,
)
from .io_utils import read_binary_with_header, write_binary_with_header

_TOKEN = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*")

_CHECKPOINT_MAGIC = b"CTMV"
_CHECKPOINT_VERSION = 1


def tokenize(text: str) -> list[str]:
    """Lowercase and return alphanumeric tokens (hyphenated runs kept whole)."""
    return _TOKEN.findall(text.lower())


def featurize(text: str, hash_dim: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Signed-hash unigrams and bigrams of ``text`` into ``hash_dim`` buckets.

    Returns (bucket indices, L2-normalized signed counts), indices ascending.
    Raises UnembeddableTextError when no token survives normalization.
    """
    tokens = tokenize(text)
    if not tokens:
        raise UnembeddableTextError(f"unembeddable text: {text[:40]!r}")
    key = struct.pack("<q", seed)
    buckets: dict[int, float] = {}
    for feat in _iter_features(tokens):
        digest = hashlib.blake2b(feat.encode("utf-8"), digest_size=8, key=key).digest()
        h = int.from_bytes(digest, "little")
        sign = 1.0 if h & (1 << 63) else -1.0
        idx = h % hash_dim
        buckets[idx] = buckets.get(idx, 0.0) + sign
    indices = np.array(sorted(buckets), dtype=np.int64)
    values = np.array([buckets[i] for i in indices], dtype=np.float32)
    norm = float(np.linalg.norm(values))
    if norm == 0.0:
        # possible only through sign cancellation inside every bucket
        raise DegenerateEmbeddingError(f"all features cancelled for {text[:40]!r}")
    return indices, values / np.float32(norm)


def _iter_features(tokens: list[str]):
    yield from tokens
    for a, b in zip(tokens, tokens[1:]):
        yield f"{a} {b}"


def distance(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine distance 1 - <u, v> for unit vectors. Symmetric, in [0, 2]."""
    if u.shape != v.shape:
        raise PreconditionError(f"dim mismatch: {u.shape} vs {v.shape}")
    return 1.0 - float(np.dot(u.astype(np.float64), v.astype(np.float64)))


class ReferenceEmbedder:
    """Trainable linear embedder; one instance is one immutable model version.

    Parameters
    ----------
    tag:
        Version tag, e.g. "bi-enc(0)".
    weights:
        Projection matrix of shape (out_dim, hash_dim), float32.
    seed:
        Keys the feature hashing and (at initialization) the weight draw.
        Training changes weights only, so versions derived from the same
        lineage share a feature space.
    """

    kind = "reference"

    def __init__(self, tag: str, weights: np.ndarray, seed: int,
                 _feature_cache: dict | None = None):
        if weights.ndim != 2:
            raise PreconditionError("weights must be a 2-D matrix")
        self.tag = tag
        self.weights = np.ascontiguousarray(weights, dtype=np.float32)
        self.seed = int(seed)
        self._feature_cache = _feature_cache if _feature_cache is not None else {}

    @classmethod
    def initialize(cls, tag: str = "bi-enc(0)", hash_dim: int = 2 ** 15,
                   out_dim: int = 64, seed: int = 0) -> "ReferenceEmbedder":
        """Fresh model with W ~ Normal(0, 1/sqrt(hash_dim))."""
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(hash_dim)
        weights = rng.normal(0.0, scale, size=(out_dim, hash_dim)).astype(np.float32)
        return cls(tag=tag, weights=weights, seed=seed)

    @property
    def hash_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def get_params(self) -> dict:
        return {"tag": self.tag, "kind": self.kind, "hash_dim": self.hash_dim,
                "out_dim": self.dim, "seed": self.seed}

    def featurize(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        """Cached sparse features; pure function of (seed, hash_dim, text)."""
        cached = self._feature_cache.get(text)
        if cached is None:
            cached = featurize(text, self.hash_dim, self.seed)
            self._feature_cache[text] = cached
        return cached

    def feature_matrix(self, texts: Sequence[str]) -> sparse.csr_matrix:
        indptr = [0]
        indices: list[np.ndarray] = []
        data: list[np.ndarray] = []
        for text in texts:
            idx, vals = self.featurize(text)
            indices.append(idx)
            data.append(vals)
            indptr.append(indptr[-1] + len(idx))
        return sparse.csr_matrix(
            (np.concatenate(data) if data else np.empty(0, np.float32),
             np.concatenate(indices) if indices else np.empty(0, np.int64),
             np.array(indptr, dtype=np.int64)),
            shape=(len(texts), self.hash_dim),
        )

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        """Embed a batch; rows are unit-norm float32 vectors."""
        feats = self.feature_matrix(texts)
        raw = np.asarray(feats @ self.weights.T, dtype=np.float32)
        norms = np.linalg.norm(raw, axis=1)
        bad = np.flatnonzero(norms == 0.0)
        if bad.size:
            raise DegenerateEmbeddingError(
                f"degenerate embedding for {texts[bad[0]][:40]!r}")
        return raw / norms[:, None].astype(np.float32)

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def with_weights(self, weights: np.ndarray, tag: str) -> "ReferenceEmbedder":
        """New version sharing this model's feature space (and cache)."""
        return ReferenceEmbedder(tag=tag, weights=weights, seed=self.seed,
                                 _feature_cache=self._feature_cache)

    def save(self, path: str | Path) -> None:
        header = {"tag": self.tag, "hash_dim": self.hash_dim,
                  "out_dim": self.dim, "seed": self.seed}
        payload = self.weights.astype("<f4").tobytes()
        write_binary_with_header(path, _CHECKPOINT_MAGIC, _CHECKPOINT_VERSION,
                                 header, [payload])

    @classmethod
    def load(cls, path: str | Path) -> "ReferenceEmbedder":
        header, payload = read_binary_with_header(path, _CHECKPOINT_MAGIC,
                                                  _CHECKPOINT_VERSION)
        weights = np.frombuffer(payload, dtype="<f4").reshape(
            header["out_dim"], header["hash_dim"]).copy()
        return cls(tag=header["tag"], weights=weights, seed=header["seed"])


class ExternalEmbedder:
    """Client for an embedding endpoint speaking the /v1/embed contract.

    Request: POST {endpoint}/v1/embed {"model": str, "texts": [str]}
    Response: {"vectors": [[float]]}

    Vectors are re-normalized locally so the unit-norm contract holds
    regardless of what the endpoint returns.
    """

    kind = "external"

    def __init__(self, tag: str, endpoint: str, model_name: str,
                 batch_size: int = 64, retries: int = 3,
                 backoff_s: float = 0.5, session=None):
        import requests

        self.tag = tag
        self.endpoint = endpoint.rstrip("/")
        self.model_name = model_name
        self.batch_size = batch_size
        self.retries = retries
        self.backoff_s = backoff_s
        self._session = session or requests.Session()
        self._dim: int | None = None

    @property
    def dim(self) -> int:
        if self._dim is None:
            raise PreconditionError("dimension unknown until first embed call")
        return self._dim

    def get_params(self) -> dict:
        return {"tag": self.tag, "kind": self.kind, "endpoint": self.endpoint,
                "model_name": self.model_name}

    def _post(self, texts: Sequence[str]) -> list[list[float]]:
        import requests

        url = f"{self.endpoint}/v1/embed"
        body = {"model": self.model_name, "texts": list(texts)}
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._session.post(url, json=body, timeout=60)
                resp.raise_for_status()
                return resp.json()["vectors"]
            except (requests.RequestException, KeyError, ValueError) as exc:
                last_error = exc
                if attempt < self.retries:
                    time.sleep(self.backoff_s * (2 ** attempt))
        raise TransportError(f"embedding endpoint failed after "
                             f"{self.retries + 1} attempts: {last_error}")

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        for text in texts:
            if not text.strip():
                raise UnembeddableTextError("unembeddable text: empty")
        rows: list[list[float]] = []
        for ofs in range(0, len(texts), self.batch_size):
            rows.extend(self._post(texts[ofs:ofs + self.batch_size]))
        raw = np.asarray(rows, dtype=np.float32)
        if raw.ndim != 2 or raw.shape[0] != len(texts):
            raise TransportError("embedding endpoint returned a malformed batch")
        norms = np.linalg.norm(raw, axis=1)
        if np.any(norms == 0.0):
            raise DegenerateEmbeddingError("degenerate embedding from endpoint")
        self._dim = raw.shape[1]
        return raw / norms[:, None].astype(np.float32)

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]
