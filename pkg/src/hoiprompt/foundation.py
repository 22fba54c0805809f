"""Frozen foundation-feature providers and the HO prompt-guided decoder.

Providers are numpy-only and sit outside the autograd graph: their tokens
enter the model as constants, so no gradient can reach them.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Mapping, Optional

import numpy as np
import torch
from torch import nn

from .detector import HOSpatialTokens
from .errors import ChecksumError, InvalidInputError, ProviderError, ShapeError
from .layers import DecoderLayer

logger = logging.getLogger(__name__)

# Image tokens of ViT-L/14 at 224px and the Q-Former output it feeds.
BLIP2_INPUT_SIZE = 224
BLIP2_IMAGE_TOKENS = (257, 1408)
BLIP2_QFORMER_TOKENS = (32, 768)


@dataclass(frozen=True)
class FoundationTokens:
    tokens: np.ndarray  # [N^f, D^f]
    global_embedding: np.ndarray  # [D^f]
    provider_id: str

    def __post_init__(self):
        if not (np.isfinite(self.tokens).all() and np.isfinite(self.global_embedding).all()):
            raise ProviderError(f"provider {self.provider_id} returned non-finite features")
        self.tokens.setflags(write=False)
        self.global_embedding.setflags(write=False)


def global_target(tokens: np.ndarray) -> np.ndarray:
    """Image-level target for the mimic loss: mean of the raw tokens."""
    return tokens.mean(axis=0)


def bilinear_resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling of an ``H x W x C`` array."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if (h, w) == (height, width):
        return image.copy()

    def axis(n_in, n_out):
        coords = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        coords = np.clip(coords, 0, n_in - 1)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, coords - lo

    y0, y1, fy = axis(h, height)
    x0, x1, fx = axis(w, width)
    fx = fx[None, :, None]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bottom = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return top * (1 - fy[:, None, None]) + bottom * fy[:, None, None]


def _seeded_rng(*parts) -> np.random.Generator:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


class FoundationProvider:
    """Base class: resize to the provider's input size, then ``encode``."""

    provider_id: str = "abstract"
    input_size: int = BLIP2_INPUT_SIZE
    num_tokens: int = BLIP2_QFORMER_TOKENS[0]
    token_dim: int = BLIP2_QFORMER_TOKENS[1]

    def encode(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def features(self, image: np.ndarray, image_id: Optional[str] = None) -> FoundationTokens:
        small = bilinear_resize(image, self.input_size, self.input_size)
        tokens = np.asarray(self.encode(small), dtype=np.float32)
        if tokens.shape != (self.num_tokens, self.token_dim):
            raise ShapeError(
                f"{self.provider_id} produced {tokens.shape}, expected {(self.num_tokens, self.token_dim)}"
            )
        return FoundationTokens(tokens, global_target(tokens), self.provider_id)

    def state_digest(self) -> str:
        return hashlib.sha256(self.provider_id.encode()).hexdigest()


class MockFoundationProvider(FoundationProvider):
    """Deterministic stand-in with the BLIP2 token contract.

    A fixed random "image encoder" maps per-patch colour statistics of the
    224px image to 257 x 1408 tokens (CLS + 16 x 16 patches); a fixed set of
    32 random queries attends over them and is projected to 768 channels.
    """

    def __init__(self, seed: int = 0, patch: int = 14, image_token_dim: int = BLIP2_IMAGE_TOKENS[1],
                 num_tokens: int = BLIP2_QFORMER_TOKENS[0], token_dim: int = BLIP2_QFORMER_TOKENS[1],
                 input_size: int = BLIP2_INPUT_SIZE):
        if input_size % patch:
            raise ShapeError(f"input size {input_size} not divisible by patch {patch}")
        self.seed = seed
        self.patch = patch
        self.input_size = input_size
        self.image_token_dim = image_token_dim
        self.num_tokens = num_tokens
        self.token_dim = token_dim
        self.provider_id = f"mock-blip2:{seed}:{num_tokens}x{token_dim}"
        rng = _seeded_rng("mock-blip2", seed)
        n_stats = 12  # 2 x 2 sub-blocks x 3 channels
        self._patch_proj = rng.normal(0.0, 1.0, (n_stats, image_token_dim)) * 2.0
        self._patch_bias = rng.normal(0.0, 0.5, image_token_dim)
        self._queries = rng.normal(0.0, 1.0, (num_tokens, image_token_dim))
        self._out_proj = rng.normal(0.0, 1.0 / np.sqrt(image_token_dim), (image_token_dim, token_dim))
        for arr in (self._patch_proj, self._patch_bias, self._queries, self._out_proj):
            arr.setflags(write=False)

    def image_tokens(self, image: np.ndarray) -> np.ndarray:
        """Internal image-encoder output for an already-resized image."""
        img = np.asarray(image, dtype=np.float64)
        if img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        n = self.input_size // self.patch
        half = self.patch // 2
        blocks = img[: n * self.patch, : n * self.patch, :3].reshape(n, 2, half, n, 2, half, 3)
        stats = blocks.mean(axis=(2, 5)).transpose(0, 2, 1, 3, 4).reshape(n * n, 12)
        patches = np.tanh(stats @ self._patch_proj + self._patch_bias)
        cls = patches.mean(axis=0, keepdims=True)
        return np.concatenate([cls, patches], axis=0)

    def encode(self, image: np.ndarray) -> np.ndarray:
        x = self.image_tokens(image)
        scores = self._queries @ x.T / np.sqrt(self.image_token_dim)
        scores -= scores.max(axis=1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=1, keepdims=True)
        return np.tanh((weights @ x) @ self._out_proj)

    def state_digest(self) -> str:
        h = hashlib.sha256(self.provider_id.encode())
        for arr in (self._patch_proj, self._patch_bias, self._queries, self._out_proj):
            h.update(arr.tobytes())
        return h.hexdigest()


class FileCacheProvider(FoundationProvider):
    """Precomputed tokens keyed by image id, loaded once and read-only.

    Archive layout (numpy ``.npz``): a JSON ``header`` holding provider id,
    token shape, ids and a SHA-256 checksum, plus ``tokens``/``global``
    stacks in header id order.
    """

    def __init__(self, path, fallback: Optional[FoundationProvider] = None):
        self.path = Path(path)
        self.fallback = fallback
        header, tokens, globals_ = read_token_cache(self.path)
        self.provider_id = header["provider_id"]
        self.num_tokens, self.token_dim = header["num_tokens"], header["token_dim"]
        self._index = {image_id: i for i, image_id in enumerate(header["image_ids"])}
        self._tokens, self._globals = tokens, globals_
        self._checksum = header["checksum"]

    def features(self, image: np.ndarray, image_id: Optional[str] = None) -> FoundationTokens:
        if image_id is not None and image_id in self._index:
            i = self._index[image_id]
            return FoundationTokens(self._tokens[i].copy(), self._globals[i].copy(), self.provider_id)
        if self.fallback is not None:
            return self.fallback.features(image, image_id)
        raise ProviderError(f"image {image_id!r} not in token cache {self.path}")

    def state_digest(self) -> str:
        return self._checksum


def _cache_checksum(provider_id, image_ids, tokens, globals_) -> str:
    h = hashlib.sha256(provider_id.encode())
    for image_id in image_ids:
        h.update(image_id.encode() + b"\0")
    h.update(np.ascontiguousarray(tokens, dtype=np.float32).tobytes())
    h.update(np.ascontiguousarray(globals_, dtype=np.float32).tobytes())
    return h.hexdigest()


_cache_write_lock = threading.Lock()


def write_token_cache(path, entries: Mapping[str, FoundationTokens]) -> str:
    """Atomically write a token archive; returns its checksum."""
    path = Path(path)
    ids = sorted(entries)
    if not ids:
        raise InvalidInputError("refusing to write an empty token cache")
    provider_ids = {entries[i].provider_id for i in ids}
    if len(provider_ids) != 1:
        raise InvalidInputError(f"entries come from several providers: {sorted(provider_ids)}")
    tokens = np.stack([entries[i].tokens for i in ids]).astype(np.float32)
    globals_ = np.stack([entries[i].global_embedding for i in ids]).astype(np.float32)
    provider_id = provider_ids.pop()
    header = {
        "provider_id": provider_id,
        "num_tokens": int(tokens.shape[1]),
        "token_dim": int(tokens.shape[2]),
        "image_ids": ids,
        "checksum": _cache_checksum(provider_id, ids, tokens, globals_),
    }
    buf = io.BytesIO()
    np.savez(buf, header=np.array(json.dumps(header)), tokens=tokens, globals=globals_)
    with _cache_write_lock:
        tmp = path.with_suffix(path.suffix + f".tmp{os.getpid()}")
        tmp.write_bytes(buf.getvalue())
        os.replace(tmp, path)
    return header["checksum"]


def read_token_cache(path):
    with np.load(Path(path), allow_pickle=False) as archive:
        header = json.loads(str(archive["header"]))
        tokens, globals_ = archive["tokens"], archive["globals"]
    expected = _cache_checksum(header["provider_id"], header["image_ids"], tokens, globals_)
    if expected != header["checksum"]:
        raise ChecksumError(f"token cache {path} failed checksum verification")
    if tokens.shape[1:] != (header["num_tokens"], header["token_dim"]):
        raise ChecksumError(f"token cache {path} header disagrees with stored shape {tokens.shape}")
    tokens.setflags(write=False)
    globals_.setflags(write=False)
    return header, tokens, globals_


def build_token_cache(samples, provider: FoundationProvider, path) -> str:
    entries = {s.image_id: provider.features(s.image, s.image_id) for s in samples}
    return write_token_cache(path, entries)


class RemoteFoundationProvider(FoundationProvider):
    """HTTP adapter: POST PNG bytes, receive ``{"tokens": [[..]], "global": [..]}``."""

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 3, backoff: float = 0.5,
                 api_key_env: str = "HOIPROMPT_PROVIDER_API_KEY", provider_id: Optional[str] = None,
                 num_tokens: int = BLIP2_QFORMER_TOKENS[0], token_dim: int = BLIP2_QFORMER_TOKENS[1],
                 input_size: int = BLIP2_INPUT_SIZE):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.api_key_env = api_key_env
        self.provider_id = provider_id or f"remote:{endpoint}"
        self.num_tokens, self.token_dim = num_tokens, token_dim
        self.input_size = input_size

    def _post(self, payload: bytes) -> dict:
        import requests

        headers = {"Content-Type": "image/png"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        last_error = None
        for attempt in range(1, self.retries + 2):
            try:
                resp = requests.post(self.endpoint, data=payload, headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                return resp.json()
            except (requests.RequestException, ValueError) as exc:
                last_error = exc
                logger.warning("provider request %d failed: %s", attempt, exc)
                if attempt <= self.retries:
                    time.sleep(self.backoff * 2 ** (attempt - 1))
        raise ProviderError(
            f"provider {self.endpoint} unavailable after {self.retries + 1} attempts: {last_error}",
            attempts=self.retries + 1,
            last_error=last_error,
        )

    def features(self, image: np.ndarray, image_id: Optional[str] = None) -> FoundationTokens:
        from PIL import Image

        small = bilinear_resize(image, self.input_size, self.input_size)
        arr = np.clip(np.round(small * 255.0), 0, 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr if arr.shape[2] != 1 else arr[:, :, 0]).save(buf, format="PNG")
        doc = self._post(buf.getvalue())
        try:
            tokens = np.asarray(doc["tokens"], dtype=np.float32)
            glob = doc.get("global")
        except (KeyError, TypeError) as exc:
            raise ProviderError(f"malformed provider response: {exc}") from exc
        if tokens.shape != (self.num_tokens, self.token_dim):
            raise ShapeError(f"provider returned {tokens.shape}, expected {(self.num_tokens, self.token_dim)}")
        glob = global_target(tokens) if glob is None else np.asarray(glob, dtype=np.float32)
        return FoundationTokens(tokens, glob, self.provider_id)


def provide_features(image: np.ndarray, provider: FoundationProvider, image_id: Optional[str] = None) -> FoundationTokens:
    return provider.features(image, image_id)


# ---------------------------------------------------------------------------
# trainable side


@dataclass
class RelationTokens:
    tokens: torch.Tensor  # [B, N^q, D^v]


class FoundationProjection(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.linear.in_features:
            raise ShapeError(f"foundation width {tokens.shape[-1]} != projection input {self.linear.in_features}")
        return self.linear(tokens)


def project(tokens, projection: FoundationProjection) -> torch.Tensor:
    if isinstance(tokens, FoundationTokens):
        tokens = tokens.tokens
    tokens = torch.as_tensor(np.asarray(tokens) if not torch.is_tensor(tokens) else tokens,
                             dtype=projection.linear.weight.dtype)
    return projection(tokens)


class HOPromptDecoder(nn.Module):
    """Queries are the averaged HO prompts; keys are projected foundation tokens.

    Self-attention runs every block, cross-attention on every other block
    starting with the first.  Keys carry no positional term.
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int, num_layers: int, dropout: float = 0.0):
        super().__init__()
        self.layers = nn.ModuleList(
            DecoderLayer(dim, heads, ffn_dim, dropout, cross=(i % 2 == 0)) for i in range(num_layers)
        )

    def forward(self, prompts: HOSpatialTokens, foundation: torch.Tensor) -> RelationTokens:
        return self.forward_layers(prompts, foundation)[-1]

    def forward_layers(self, prompts: HOSpatialTokens, foundation: torch.Tensor) -> List[RelationTokens]:
        if foundation.shape[-2] == 0:
            raise InvalidInputError("foundation token set is empty")
        if foundation.shape[-1] != prompts.human.shape[-1]:
            raise ShapeError(f"foundation width {foundation.shape[-1]} != prompt width {prompts.human.shape[-1]}")
        x = prompts.prompt()
        outs = [] if self.layers else [RelationTokens(x)]
        for layer in self.layers:
            x = layer(x, foundation)
            outs.append(RelationTokens(x))
        return outs


def hopd_decode(prompts: HOSpatialTokens, foundation: torch.Tensor, decoder: HOPromptDecoder) -> RelationTokens:
    return decoder(prompts, foundation)
