"""Embedding providers and the concatenate-plus-interaction feature layout.

A feature vector for an experiment is ``[t, o, t * o]`` where ``t`` and ``o``
are the embeddings of the (enriched, when available) treatment and outcome
texts and ``*`` is elementwise multiplication. Embeddings are used exactly as
the provider returns them; no extra normalization is applied here.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .archive import Archive

ENV_EMBED_KEY = "EXATLAS_EMBED_KEY"
DEFAULT_REMOTE_MODEL = "sentence-transformers/all-mpnet-base-v2"
DEFAULT_REMOTE_DIMENSION = 768


class EmbeddingError(Exception):
    """Base class for embedding failures."""


class EmbeddingTransportError(EmbeddingError):
    """Remote request failed after retries; retryable at the call site."""


class MissingVectorError(EmbeddingError):
    """A vector-file provider has no entry for the requested text."""

    def __init__(self, vector_id: str):
        super().__init__(f"no stored vector for id {vector_id!r}")
        self.vector_id = vector_id


class DimensionMismatchError(EmbeddingError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"dimension mismatch: expected {expected}, got {got}")
        self.expected = expected
        self.got = got


class EmbeddingProvider(Protocol):
    kind: str
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


def text_key(text: str) -> str:
    """Stable id for a text: hex SHA-256 of its UTF-8 bytes."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class DeterministicStubProvider:
    """Seeded pseudo-random unit-norm embeddings, stable across platforms.

    The vector for a text is drawn by seeding numpy's PCG64 generator with
    SHA-256(f"{seed}:{text}") and normalizing a standard-normal draw, so the
    same (seed, dimension, text) always yields the same vector.
    """

    kind = "deterministic-stub"

    def __init__(self, dimension: int, seed: int = 0):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = int(dimension)
        self.seed = int(seed)

    def embed(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{text}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "big"))
        v = rng.standard_normal(self.dimension)
        return v / np.linalg.norm(v)


class VectorFileProvider:
    """Serves embeddings stored in a vector file, looked up by text.

    Lookup tries the verbatim text first, then its :func:`text_key` hash, so
    files may key vectors either way. Vectors are returned verbatim.
    """

    kind = "vector-file"

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.vectors = read_vector_file(self.path)
        if not self.vectors:
            raise EmbeddingError(f"vector file {self.path} is empty")
        self.dimension = len(next(iter(self.vectors.values())))

    def embed(self, text: str) -> np.ndarray:
        vec = self.vectors.get(text)
        if vec is None:
            vec = self.vectors.get(text_key(text))
        if vec is None:
            raise MissingVectorError(text_key(text))
        return vec


class RemoteEmbeddingProvider:
    """HTTP embedding client with batching, retries, and a write-through cache.

    The wire contract is ``POST endpoint`` with ``{"model": ..., "input":
    [texts]}`` returning ``{"data": [{"embedding": [...]}, ...]}`` in input
    order. The API key is read from ``EXATLAS_EMBED_KEY`` unless given.
    Responses are cached in memory by (model, text) and, when ``cache_dir``
    is set, appended to ``<cache_dir>/<model-slug>.jsonl`` so reruns make no
    remote calls. All cache access is lock-synchronized; concurrent batches
    are limited by ``max_inflight``.
    """

    kind = "remote-service"

    def __init__(
        self,
        endpoint: str,
        model: str = DEFAULT_REMOTE_MODEL,
        dimension: int = DEFAULT_REMOTE_DIMENSION,
        api_key: str | None = None,
        batch_size: int = 32,
        max_retries: int = 3,
        backoff: float = 0.5,
        max_inflight: int = 4,
        cache_dir: str | Path | None = None,
        transport: Callable[[str, dict, dict], dict] | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.endpoint = endpoint
        self.model = model
        self.dimension = int(dimension)
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_EMBED_KEY)
        self.batch_size = max(1, int(batch_size))
        self.max_retries = max(0, int(max_retries))
        self.backoff = backoff
        self._transport = transport or _requests_post_json
        self._sleep = sleep
        self._lock = threading.Lock()
        self._inflight = threading.Semaphore(max(1, int(max_inflight)))
        self._cache: dict[str, np.ndarray] = {}
        self._cache_path: Path | None = None
        if cache_dir is not None:
            slug = "".join(c if c.isalnum() or c in "-_." else "_" for c in model)
            self._cache_path = Path(cache_dir) / f"{slug}.jsonl"
            if self._cache_path.exists():
                self._cache.update(read_vector_file(self._cache_path))

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        keys = [text_key(t) for t in texts]
        with self._lock:
            missing = [t for t, k in zip(texts, keys) if k not in self._cache]
        missing = list(dict.fromkeys(missing))  # dedupe, keep order
        for start in range(0, len(missing), self.batch_size):
            batch = missing[start:start + self.batch_size]
            vectors = self._request(batch)
            with self._lock:
                for t, v in zip(batch, vectors):
                    self._cache[text_key(t)] = v
                if self._cache_path is not None:
                    append_vector_file(self._cache_path,
                                       {text_key(t): v for t, v in zip(batch, vectors)})
        with self._lock:
            return [self._cache[k] for k in keys]

    def _request(self, batch: list[str]) -> list[np.ndarray]:
        payload = {"model": self.model, "input": list(batch)}
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                with self._inflight:
                    doc = self._transport(self.endpoint, payload, headers)
                break
            except EmbeddingTransportError as e:
                last = e
                if attempt == self.max_retries:
                    raise
                self._sleep(self.backoff * (2 ** attempt))
        else:  # pragma: no cover
            raise last or EmbeddingTransportError("no attempts made")
        data = doc.get("data")
        if not isinstance(data, list) or len(data) != len(batch):
            raise EmbeddingError(f"malformed embedding response for batch of {len(batch)}")
        out = []
        for item in data:
            vec = np.asarray(item["embedding"], dtype=float)
            if vec.shape != (self.dimension,):
                raise DimensionMismatchError(self.dimension, vec.size)
            out.append(vec)
        return out


def _requests_post_json(endpoint: str, payload: dict, headers: dict) -> dict:
    import requests

    try:
        resp = requests.post(endpoint, json=payload, headers=headers, timeout=60)
    except requests.RequestException as e:
        raise EmbeddingTransportError(f"embedding request failed: {e}") from e
    if resp.status_code != 200:
        raise EmbeddingTransportError(
            f"embedding endpoint returned {resp.status_code}: {resp.text[:200]}"
        )
    return resp.json()


def embed_text(provider: EmbeddingProvider, text: str) -> np.ndarray:
    """Embed one text, enforcing the provider's declared dimension."""
    if not text or not text.strip():
        raise EmbeddingError("cannot embed empty text")
    vec = np.asarray(provider.embed(text), dtype=float)
    if vec.ndim != 1 or vec.shape[0] != provider.dimension:
        raise DimensionMismatchError(provider.dimension, vec.size)
    if not np.all(np.isfinite(vec)):
        raise EmbeddingError("provider returned non-finite embedding values")
    return vec


def build_feature(t: np.ndarray, o: np.ndarray) -> np.ndarray:
    """Assemble the 3d feature vector [t, o, t*o] from equal-length embeddings."""
    t = np.asarray(t, dtype=float)
    o = np.asarray(o, dtype=float)
    if t.ndim != 1 or o.ndim != 1 or t.shape[0] != o.shape[0]:
        raise DimensionMismatchError(t.size, o.size)
    return np.concatenate([t, o, t * o])


@dataclass
class FeatureMatrix:
    """Per-experiment feature vectors plus which records used enriched texts.

    ``used_enrichment[id]`` is True only when both the treatment and outcome
    embeddings came from enriched descriptions; partially enriched records
    still prefer whichever enriched field exists but are flagged False.
    """

    features: dict[str, np.ndarray]
    used_enrichment: dict[str, bool]
    embedding_dim: int

    @property
    def feature_dim(self) -> int:
        return 3 * self.embedding_dim


def embedding_texts(exp) -> tuple[str, str, bool]:
    """Pick the texts to embed for an experiment: enriched first, raw fallback."""
    t = exp.enriched_treatment or exp.treatment_text
    o = exp.enriched_outcome or exp.outcome_text
    enriched = bool(exp.enriched_treatment) and bool(exp.enriched_outcome)
    return t, o, enriched


def feature_matrix(archive: Archive, provider: EmbeddingProvider,
                   jobs: int = 1) -> FeatureMatrix:
    """Build one feature vector per experiment; results are keyed by id."""

    def one(exp) -> tuple[str, np.ndarray, bool]:
        t_text, o_text, enriched = embedding_texts(exp)
        try:
            t = embed_text(provider, t_text)
            o = embed_text(provider, o_text)
        except EmbeddingError as e:
            raise EmbeddingError(f"experiment {exp.id!r}: {e}") from e
        return exp.id, build_feature(t, o), enriched

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(one, archive))
    else:
        rows = [one(exp) for exp in archive]
    features = {exp_id: vec for exp_id, vec, _ in rows}
    flags = {exp_id: enriched for exp_id, _, enriched in rows}
    return FeatureMatrix(features, flags, provider.dimension)


def read_vector_file(path: str | Path) -> dict[str, np.ndarray]:
    """Read a ``{id, values}``-per-line vector file, enforcing one dimension."""
    path = Path(path)
    vectors: dict[str, np.ndarray] = {}
    dim: int | None = None
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise EmbeddingError(f"{path}:{line_no}: invalid JSON: {e.msg}") from e
            vec = np.asarray(rec["values"], dtype=float)
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise DimensionMismatchError(dim, vec.size)
            vectors[str(rec["id"])] = vec
    return vectors


def write_vector_file(path: str | Path, vectors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        _write_vector_lines(fh, vectors)


def append_vector_file(path: str | Path, vectors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        _write_vector_lines(fh, vectors)


def _write_vector_lines(fh, vectors: Mapping[str, np.ndarray]) -> None:
    for vec_id, vec in vectors.items():
        rec = {"id": vec_id, "values": [float(x) for x in np.asarray(vec).ravel()]}
        fh.write(json.dumps(rec, ensure_ascii=False))
        fh.write("\n")
