"""Category knowledge from a language model, its on-disk cache, and text embeddings."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import CategoryRegistry
from .errors import ChecksumError, EncodingError, InvalidInputError, RetrievalError

logger = logging.getLogger(__name__)

PROMPT_TEMPLATE = "Knowledge retrieve for {category}, limited to {n} words"
SOURCES = ("llm", "fixture", "human")
TEXT_DIM = 768
WORD_LIMIT_SLACK = 1.2


def build_prompt(category: str, n: int) -> str:
    if not category or not category.strip():
        raise InvalidInputError("category phrase must be nonempty")
    if int(n) <= 0:
        raise InvalidInputError(f"word limit must be positive, got {n}")
    return PROMPT_TEMPLATE.format(category=category, n=int(n))


def slugify(phrase: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", phrase.lower()).strip("-")


@dataclass(frozen=True)
class KnowledgeEntry:
    hoi_id: int
    phrase: str
    description: str
    word_limit: int
    source: str
    retrieved_at: str  # ISO-8601, UTC
    backend_id: str = ""

    def __post_init__(self):
        if self.source not in SOURCES:
            raise InvalidInputError(f"unknown knowledge source {self.source!r}")
        if self.source != "human" and not self.description.strip():
            raise InvalidInputError(f"empty description for {self.phrase!r}")

    @property
    def key(self) -> Tuple[str, int, str]:
        return (self.phrase, self.word_limit, self.backend_id)

    @property
    def word_count(self) -> int:
        return len(self.description.split())

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: Mapping) -> "KnowledgeEntry":
        return cls(**{k: doc[k] for k in cls.__dataclass_fields__ if k in doc})


class KnowledgeCache:
    """JSON-lines store with a ``.sha256`` sidecar over the file bytes.

    Many threads may read; writes are serialized and replace the file
    atomically, sidecar last.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.sidecar = self.path.with_name(self.path.name + ".sha256")
        self._lock = threading.RLock()
        self._entries: Dict[Tuple[str, int, str], KnowledgeEntry] = {}
        if self.path.exists():
            self._entries = {e.key: e for e in self._read()}

    def _read(self) -> List[KnowledgeEntry]:
        raw = self.path.read_bytes()
        if not self.sidecar.exists():
            raise ChecksumError(f"knowledge cache {self.path} has no checksum sidecar")
        expected = self.sidecar.read_text().split()[0] if self.sidecar.read_text().strip() else ""
        if hashlib.sha256(raw).hexdigest() != expected:
            raise ChecksumError(f"knowledge cache {self.path} failed checksum verification")
        return [KnowledgeEntry.from_json(json.loads(line)) for line in raw.decode("utf-8").splitlines() if line.strip()]

    def get(self, key) -> Optional[KnowledgeEntry]:
        with self._lock:
            return self._entries.get(tuple(key))

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> List[KnowledgeEntry]:
        with self._lock:
            return list(self._entries.values())

    def put(self, entry: KnowledgeEntry) -> None:
        with self._lock:
            self._entries[entry.key] = entry
            self._flush()

    def _flush(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        body = "".join(json.dumps(e.to_json(), sort_keys=True) + "\n" for e in self._entries.values())
        data = body.encode("utf-8")
        tmp = self.path.with_name(self.path.name + f".tmp{os.getpid()}")
        tmp.write_bytes(data)
        os.replace(tmp, self.path)
        tmp_sum = self.sidecar.with_name(self.sidecar.name + f".tmp{os.getpid()}")
        tmp_sum.write_text(hashlib.sha256(data).hexdigest() + "\n")
        os.replace(tmp_sum, self.sidecar)


class LLMBackend:
    backend_id = "abstract"
    source = "llm"

    def complete(self, prompt: str, max_words: int, phrase: str) -> str:
        raise NotImplementedError


class FixtureBackend(LLMBackend):
    """Canned answers: ``{slug(phrase)}.txt`` in a directory."""

    source = "fixture"

    def __init__(self, directory, backend_id: str = "fixture"):
        self.directory = Path(directory)
        self.backend_id = backend_id
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, prompt: str, max_words: int, phrase: str) -> str:
        with self._lock:
            self.calls += 1
        path = self.directory / f"{slugify(phrase)}.txt"
        if not path.is_file():
            raise RetrievalError(f"fixture has no entry for key {path.name!r} (phrase {phrase!r})")
        return path.read_text(encoding="utf-8").strip()


class HTTPLLMBackend(LLMBackend):
    """POST ``{"prompt", "max_words"}``, expect ``{"text"}``."""

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 3, backoff: float = 0.5,
                 api_key_env: str = "HOIPROMPT_LLM_API_KEY", backend_id: Optional[str] = None):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.api_key_env = api_key_env
        self.backend_id = backend_id or f"http:{endpoint}"
        self.calls = 0

    def complete(self, prompt: str, max_words: int, phrase: str) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        last_error = None
        for attempt in range(1, self.retries + 2):
            self.calls += 1
            try:
                resp = requests.post(self.endpoint, json={"prompt": prompt, "max_words": int(max_words)},
                                     headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                text = resp.json()["text"]
                if not isinstance(text, str):
                    raise ValueError("response field 'text' is not a string")
                return text.strip()
            except (requests.RequestException, ValueError, KeyError, TypeError) as exc:
                last_error = exc
                logger.warning("llm request %d for %r failed: %s", attempt, phrase, exc)
                if attempt <= self.retries:
                    time.sleep(self.backoff * 2 ** (attempt - 1))
        raise RetrievalError(
            f"llm backend {self.endpoint} failed for {phrase!r} after {self.retries + 1} attempts: {last_error}",
            attempts=self.retries + 1,
            last_error=last_error,
        )


class KnowledgeClient:
    """Cache-first retrieval with per-key single-flight."""

    def __init__(self, backend: LLMBackend, cache: KnowledgeCache):
        self.backend = backend
        self.cache = cache
        self._key_locks: Dict[tuple, threading.Lock] = {}
        self._guard = threading.Lock()

    def _lock_for(self, key) -> threading.Lock:
        with self._guard:
            return self._key_locks.setdefault(key, threading.Lock())

    def retrieve(self, hoi_id: int, phrase: str, n: int) -> KnowledgeEntry:
        prompt = build_prompt(phrase, n)
        key = (phrase, int(n), self.backend.backend_id)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        with self._lock_for(key):
            hit = self.cache.get(key)
            if hit is not None:
                return hit
            text = self.backend.complete(prompt, int(n), phrase)
            if not text:
                raise RetrievalError(f"backend {self.backend.backend_id} returned an empty description for {phrase!r}")
            entry = KnowledgeEntry(
                hoi_id=int(hoi_id),
                phrase=phrase,
                description=text,
                word_limit=int(n),
                source=self.backend.source,
                retrieved_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
                backend_id=self.backend.backend_id,
            )
            if entry.word_count > WORD_LIMIT_SLACK * n:
                logger.warning("description for %r has %d words, limit %d", phrase, entry.word_count, n)
            self.cache.put(entry)
            return entry

    def retrieve_all(self, registry: CategoryRegistry, n: int, hoi_ids: Optional[Sequence[int]] = None) -> List[KnowledgeEntry]:
        ids = range(registry.num_hois) if hoi_ids is None else hoi_ids
        return [self.retrieve(h, registry.phrase(h), n) for h in ids]


# ---------------------------------------------------------------------------
# text embeddings


@dataclass(frozen=True)
class TextEmbedding:
    vector: np.ndarray  # [D^t]
    text_hash: str
    encoder_id: str

    def __post_init__(self):
        if not np.isfinite(self.vector).all():
            raise EncodingError(f"encoder {self.encoder_id} produced non-finite values")
        self.vector.setflags(write=False)


class TextEncoder:
    encoder_id = "abstract"
    dim = TEXT_DIM

    def encode(self, text: str) -> np.ndarray:
        raise NotImplementedError


class MockTextEncoder(TextEncoder):
    """Unit vector drawn from a generator seeded by a hash of the text."""

    def __init__(self, seed: int = 0, dim: int = TEXT_DIM):
        self.seed = seed
        self.dim = dim
        self.encoder_id = f"mock-text:{seed}:{dim}"

    def encode(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\0{text}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)


class RemoteTextEncoder(TextEncoder):
    """POST ``{"text"}``, expect ``{"embedding": [...]}`` (the [CLS] vector)."""

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 2, dim: int = TEXT_DIM,
                 api_key_env: str = "HOIPROMPT_PROVIDER_API_KEY"):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.dim = dim
        self.api_key_env = api_key_env
        self.encoder_id = f"remote-text:{endpoint}"

    def encode(self, text: str) -> np.ndarray:
        import requests

        headers = {}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        last_error = None
        for attempt in range(self.retries + 1):
            try:
                resp = requests.post(self.endpoint, json={"text": text}, headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                vec = np.asarray(resp.json()["embedding"], dtype=np.float64)
                if vec.shape != (self.dim,):
                    raise ValueError(f"embedding shape {vec.shape}, expected ({self.dim},)")
                return vec
            except (requests.RequestException, ValueError, KeyError, TypeError) as exc:
                last_error = exc
        raise EncodingError(f"text encoder {self.endpoint} failed: {last_error}",
                            attempts=self.retries + 1, last_error=last_error)


def embed_text(text: str, encoder: TextEncoder) -> TextEmbedding:
    try:
        vec = np.asarray(encoder.encode(text), dtype=np.float64)
    except EncodingError:
        raise
    except Exception as exc:
        raise EncodingError(f"encoder {encoder.encoder_id} failed on {text!r}: {exc}") from exc
    return TextEmbedding(vec.copy(), hashlib.sha256(text.encode("utf-8")).hexdigest(), encoder.encoder_id)


def embeddings_for_categories(registry: CategoryRegistry, encoder: TextEncoder, mode: str = "phrase",
                              hoi_ids: Optional[Sequence[int]] = None,
                              entries: Optional[Mapping[int, KnowledgeEntry]] = None) -> List[TextEmbedding]:
    """One embedding per requested category, ascending hoi id."""
    ids = sorted(range(registry.num_hois) if hoi_ids is None else set(hoi_ids))
    if mode == "phrase":
        texts = [registry.phrase(h) for h in ids]
    elif mode == "description":
        entries = entries or {}
        missing = [h for h in ids if h not in entries or not entries[h].description.strip()]
        if missing:
            raise RetrievalError(f"no knowledge description for hoi ids {missing}")
        texts = [entries[h].description for h in ids]
    else:
        raise InvalidInputError(f"unknown text mode {mode!r}")
    return [embed_text(t, encoder) for t in texts]


def embedding_matrix(embeddings: Sequence[TextEmbedding]) -> np.ndarray:
    return np.stack([e.vector for e in embeddings]) if embeddings else np.zeros((0, TEXT_DIM))
