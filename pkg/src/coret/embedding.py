"""Text embedding for code chunks and queries.

Two interchangeable sources produce unit-norm vectors: a self-contained
hashed bag-of-tokens linear model (the "toy" embedder, trainable and
dependency-free) and an HTTP provider service speaking a small JSON
protocol. Both share the tokenizer defined here so scores are comparable
across sources only by fingerprint, never silently.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
import re
import requests
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

DOWN_TOKEN = "[DOWN]"

DEFAULT_VOCAB_SIZE = 32768
DEFAULT_DIM = 64
DEFAULT_MAX_TOKENS = 1024

# Segment kinds: index into the segment offset table.
SEGMENT_BASE = 0
SEGMENT_NEIGHBOR = 1
_SEGMENT_KINDS = {"base": SEGMENT_BASE, "neighbor": SEGMENT_NEIGHBOR}

# [DOWN] must survive as one token, so it is matched before \w splitting.
_WORD_RE = re.compile(r"\[DOWN\]|\w+", re.UNICODE)
# Splits an identifier piece into camelCase humps, acronym runs, and digit runs.
_HUMP_RE = re.compile(r"[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z]+|[A-Z]+|[0-9]+")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a_64(text: str) -> int:
    """FNV-1a 64-bit hash of the UTF-8 bytes of `text`."""
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def split_tokens(text: str) -> list[str]:
    """Lowercased subtokens of `text`; `[DOWN]` passes through verbatim."""
    return [tok for tok, _ in tokenize_with_offsets(text)]


def tokenize(text: str, vocab_size: int = DEFAULT_VOCAB_SIZE) -> list[int]:
    """Hashed token ids: each subtoken mapped into [0, vocab_size) by
    FNV-1a, except `[DOWN]` which gets the reserved id vocab_size."""
    return [hash_token(tok, vocab_size) for tok in split_tokens(text)]


def tokenize_with_offsets(text: str) -> list[tuple[str, int]]:
    """Like `tokenize` but pairs each subtoken with the char offset of the
    word it came from (underscore/camel splits inherit the word start)."""
    out: list[tuple[str, int]] = []
    for m in _WORD_RE.finditer(text):
        word = m.group(0)
        start = m.start()
        if word == DOWN_TOKEN:
            out.append((DOWN_TOKEN, start))
            continue
        for piece in word.split("_"):
            if not piece:
                continue
            humps = _HUMP_RE.findall(piece)
            if not humps:
                out.append((piece.lower(), start))
                continue
            for hump in humps:
                out.append((hump.lower(), start))
    return out


def hash_token(token: str, vocab_size: int) -> int:
    """Token id in [0, vocab_size); `[DOWN]` gets the reserved id vocab_size."""
    if token == DOWN_TOKEN:
        return vocab_size
    return fnv1a_64(token) % vocab_size


def encode(
    text: str,
    vocab_size: int,
    segment_spans: list[tuple[int, int, str]] | None = None,
    max_tokens: int | None = None,
) -> tuple[list[int], list[int]]:
    """Token ids and per-token segment kinds for `text`.

    `segment_spans` is a list of (char_start, char_end, kind) with kind in
    {"base", "neighbor"}; a token takes the kind of the span containing the
    start of its source word. Tokens outside every span (the separator
    itself, or all tokens when no spans are given) count as base. Token
    sequences longer than `max_tokens` are truncated from the tail.
    """
    spans: list[tuple[int, int, int]] = []
    for s, e, kind in segment_spans or []:
        if kind not in _SEGMENT_KINDS:
            raise ValueError(f"unknown segment kind: {kind!r}")
        if s > e:
            raise ValueError(f"segment span start {s} > end {e}")
        spans.append((s, e, _SEGMENT_KINDS[kind]))

    ids: list[int] = []
    kinds: list[int] = []
    for token, start in tokenize_with_offsets(text):
        kind = SEGMENT_BASE
        for s, e, k in spans:
            if s <= start < e:
                kind = k
                break
        ids.append(hash_token(token, vocab_size))
        kinds.append(kind)
    if max_tokens is not None and len(ids) > max_tokens:
        ids = ids[:max_tokens]
        kinds = kinds[:max_tokens]
    return ids, kinds


@dataclass
class ToyEmbedderParams:
    """Weights of the hashed bag-of-tokens embedder.

    `projection` has vocab_size + 1 rows; the extra row is the `[DOWN]`
    separator, which lives outside the hashed id range. `segment_offsets`
    holds one additive row per segment kind (base, neighbor) and starts at
    zero so offsets only matter once trained. One parameter set serves both
    queries and chunks (weight tying).
    """

    vocab_size: int
    dim: int
    max_tokens: int
    seed: int
    projection: np.ndarray = field(repr=False)
    segment_offsets: np.ndarray = field(repr=False)

    def validate(self) -> None:
        if self.projection.shape != (self.vocab_size + 1, self.dim):
            raise ValueError(
                f"projection shape {self.projection.shape} != "
                f"{(self.vocab_size + 1, self.dim)}"
            )
        if self.segment_offsets.shape != (2, self.dim):
            raise ValueError(
                f"segment_offsets shape {self.segment_offsets.shape} != {(2, self.dim)}"
            )
        if not np.all(np.isfinite(self.projection)):
            raise ValueError("projection contains non-finite values")
        if not np.all(np.isfinite(self.segment_offsets)):
            raise ValueError("segment_offsets contains non-finite values")


def init_toy_params(
    vocab_size: int = DEFAULT_VOCAB_SIZE,
    dim: int = DEFAULT_DIM,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    seed: int = 0,
) -> ToyEmbedderParams:
    """Fresh weights: projection ~ U[-1/sqrt(dim), 1/sqrt(dim)], offsets zero."""
    if vocab_size < 1 or dim < 1 or max_tokens < 1:
        raise ValueError("vocab_size, dim and max_tokens must be positive")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(dim)
    projection = rng.uniform(-bound, bound, size=(vocab_size + 1, dim))
    segment_offsets = np.zeros((2, dim))
    return ToyEmbedderParams(
        vocab_size=vocab_size,
        dim=dim,
        max_tokens=max_tokens,
        seed=seed,
        projection=projection,
        segment_offsets=segment_offsets,
    )


def toy_embed(
    params: ToyEmbedderParams,
    text: str,
    segment_spans: list[tuple[int, int, str]] | None = None,
) -> np.ndarray:
    """Unit-norm embedding of `text`: mean of (token row + segment offset).

    Raises ValueError on token-free input ("empty input") and on inputs
    whose pooled vector vanishes ("degenerate embedding").
    """
    ids, kinds = encode(text, params.vocab_size, segment_spans, params.max_tokens)
    if not ids:
        raise ValueError("empty input: text has no tokens")
    rows = params.projection[ids] + params.segment_offsets[kinds]
    pooled = rows.mean(axis=0)
    norm = float(np.linalg.norm(pooled))
    if norm < 1e-12:
        raise ValueError("degenerate embedding: zero vector before normalization")
    return pooled / norm


def embed_texts(
    params: ToyEmbedderParams,
    texts: list[str],
    segment_spans: list[list[tuple[int, int, str]] | None] | None = None,
) -> np.ndarray:
    """Stack of toy embeddings, shape (len(texts), dim)."""
    if segment_spans is not None and len(segment_spans) != len(texts):
        raise ValueError("segment_spans must align with texts")
    rows = []
    for i, text in enumerate(texts):
        spans = segment_spans[i] if segment_spans is not None else None
        rows.append(toy_embed(params, text, spans))
    return np.stack(rows) if rows else np.zeros((0, params.dim))


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two vectors; rejects mismatched shapes, zeros
    and non-finite input instead of returning NaN."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"cosine needs two equal-length vectors, got {a.shape} and {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("cosine input contains non-finite values")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < 1e-12 or nb < 1e-12:
        raise ValueError("cosine undefined for zero-norm input")
    return float(np.dot(a, b) / (na * nb))


# --- parameter persistence ------------------------------------------------

_PARAMS_FORMAT = "coret-toy-params"


def _params_blob(params: ToyEmbedderParams) -> bytes:
    header = {
        "format": _PARAMS_FORMAT,
        "version": 1,
        "vocab_size": params.vocab_size,
        "dim": params.dim,
        "max_tokens": params.max_tokens,
        "seed": params.seed,
    }
    return (
        json.dumps(header, sort_keys=True).encode("utf-8")
        + b"\n"
        + np.ascontiguousarray(params.projection, dtype="<f8").tobytes()
        + np.ascontiguousarray(params.segment_offsets, dtype="<f8").tobytes()
    )


def save_params(params: ToyEmbedderParams, path: str | os.PathLike) -> None:
    """Write weights as one JSON header line plus raw little-endian float64."""
    params.validate()
    with open(path, "wb") as f:
        f.write(_params_blob(params))


def load_params(path: str | os.PathLike) -> ToyEmbedderParams:
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not a toy params file") from exc
        if header.get("format") != _PARAMS_FORMAT:
            raise ValueError(f"{path}: unexpected format {header.get('format')!r}")
        vocab_size = int(header["vocab_size"])
        dim = int(header["dim"])
        proj_count = (vocab_size + 1) * dim
        raw = f.read()
    expected = (proj_count + 2 * dim) * 8
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, found {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f8")
    params = ToyEmbedderParams(
        vocab_size=vocab_size,
        dim=dim,
        max_tokens=int(header["max_tokens"]),
        seed=int(header["seed"]),
        projection=flat[:proj_count].reshape(vocab_size + 1, dim).copy(),
        segment_offsets=flat[proj_count:].reshape(2, dim).copy(),
    )
    params.validate()
    return params


def params_fingerprint(params: ToyEmbedderParams) -> str:
    """sha256 of the serialized weights; identifies an embedding space."""
    return hashlib.sha256(_params_blob(params)).hexdigest()


# --- provider client --------------------------------------------------------

TOKEN_ENV_VAR = "CORET_PROVIDER_TOKEN"


class ProviderError(RuntimeError):
    """Base class for embedding provider failures."""

    retryable = False


class ProviderTransportError(ProviderError):
    """Network-level failure (connect, timeout, 5xx). Safe to retry."""

    retryable = True


class ProviderProtocolError(ProviderError):
    """The service answered, but not with what the protocol promises."""


@dataclass
class ProviderInfo:
    """Handshake result from GET /info."""

    model: str
    dim: int
    max_tokens: int
    normalizes: bool
    special_tokens: list[str]


def _auth_headers() -> dict[str, str]:
    token = os.environ.get(TOKEN_ENV_VAR)
    if token:
        return {"Authorization": f"Bearer {token}"}
    return {}


def handshake(base_url: str, timeout: float = 10.0) -> ProviderInfo:
    """GET {base_url}/info and validate the advertised capabilities."""
    url = base_url.rstrip("/") + "/info"
    try:
        resp = requests.get(url, headers=_auth_headers(), timeout=timeout)
    except requests.RequestException as exc:
        raise ProviderTransportError(f"provider unreachable at {url}: {exc}") from exc
    if resp.status_code >= 500:
        raise ProviderTransportError(f"provider /info returned {resp.status_code}")
    if resp.status_code != 200:
        raise ProviderProtocolError(f"provider /info returned {resp.status_code}")
    try:
        body = resp.json()
        info = ProviderInfo(
            model=str(body["model"]),
            dim=int(body["dim"]),
            max_tokens=int(body["max_tokens"]),
            normalizes=bool(body["normalizes"]),
            special_tokens=[str(t) for t in body.get("special_tokens", [])],
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise ProviderProtocolError(f"malformed /info response: {exc}") from exc
    if info.dim < 1:
        raise ProviderProtocolError(f"provider advertises dim={info.dim}")
    return info


def provider_embed(
    base_url: str,
    texts: list[str],
    segment_spans: list[list[tuple[int, int, str]] | None] | None = None,
    info: ProviderInfo | None = None,
    timeout: float = 60.0,
    retries: int = 3,
) -> np.ndarray:
    """POST /embed and return unit-norm vectors, shape (len(texts), info.dim).

    `info` defaults to a fresh handshake. Transport failures are retried
    `retries` times with short backoff; a malformed response (wrong count
    or dim) fails immediately. When the provider does not normalize,
    vectors are normalized client-side.
    """
    if info is None:
        info = handshake(base_url, timeout=timeout)
    if not texts:
        return np.zeros((0, info.dim))
    if segment_spans is not None and len(segment_spans) != len(texts):
        raise ValueError("segment_spans must align with texts")
    payload: dict = {"texts": list(texts)}
    if segment_spans is not None:
        payload["segment_spans"] = [
            [[s, e, kind] for s, e, kind in (spans or [])] for spans in segment_spans
        ]
    url = base_url.rstrip("/") + "/embed"
    last_exc: Exception | None = None
    for attempt in range(retries):
        try:
            resp = requests.post(url, json=payload, headers=_auth_headers(), timeout=timeout)
        except requests.RequestException as exc:
            last_exc = exc
            time.sleep(0.2 * (attempt + 1))
            continue
        if resp.status_code >= 500:
            last_exc = ProviderTransportError(f"provider /embed returned {resp.status_code}")
            time.sleep(0.2 * (attempt + 1))
            continue
        if resp.status_code != 200:
            raise ProviderProtocolError(
                f"provider /embed returned {resp.status_code}: {resp.text[:200]}"
            )
        try:
            vectors = np.asarray(resp.json()["vectors"], dtype=np.float64)
        except (ValueError, KeyError, TypeError) as exc:
            raise ProviderProtocolError(f"malformed /embed response: {exc}") from exc
        if vectors.shape != (len(texts), info.dim):
            raise ProviderProtocolError(
                f"provider returned shape {vectors.shape}, expected {(len(texts), info.dim)}"
            )
        if not np.all(np.isfinite(vectors)):
            raise ProviderProtocolError("provider returned non-finite vectors")
        if not info.normalizes:
            norms = np.linalg.norm(vectors, axis=1, keepdims=True)
            if np.any(norms < 1e-12):
                raise ProviderProtocolError("provider returned a zero vector")
            vectors = vectors / norms
        return vectors
    raise ProviderTransportError(
        f"provider /embed failed after {retries} attempts: {last_exc}"
    )


class ToyEmbedder(TransformerMixin, BaseEstimator):
    """Estimator wrapper around the toy embedder.

    `fit` draws fresh weights from `seed`; `transform` maps an iterable of
    strings to a (n, dim) array of unit vectors. Use `from_params` to wrap
    already-trained weights.
    """

    def __init__(
        self,
        vocab_size: int = DEFAULT_VOCAB_SIZE,
        dim: int = DEFAULT_DIM,
        max_tokens: int = DEFAULT_MAX_TOKENS,
        seed: int = 0,
    ):
        self.vocab_size = vocab_size
        self.dim = dim
        self.max_tokens = max_tokens
        self.seed = seed

    def fit(self, X=None, y=None) -> "ToyEmbedder":
        self.params_ = init_toy_params(self.vocab_size, self.dim, self.max_tokens, self.seed)
        return self

    @classmethod
    def from_params(cls, params: ToyEmbedderParams) -> "ToyEmbedder":
        est = cls(params.vocab_size, params.dim, params.max_tokens, params.seed)
        est.params_ = params
        return est

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "params_"):
            raise NotFittedError("ToyEmbedder is not fitted; call fit() first")
        return embed_texts(self.params_, list(X))

    def embed(self, texts: list[str], segment_spans=None) -> np.ndarray:
        if not hasattr(self, "params_"):
            raise NotFittedError("ToyEmbedder is not fitted; call fit() first")
        return embed_texts(self.params_, texts, segment_spans)

    def fingerprint(self) -> str:
        if not hasattr(self, "params_"):
            raise NotFittedError("ToyEmbedder is not fitted; call fit() first")
        return params_fingerprint(self.params_)


class ProviderEmbedder:
    """Adapter giving a remote provider the same embed/dim/fingerprint
    surface as ToyEmbedder, so indexes can be built from either."""

    def __init__(self, base_url: str, info: ProviderInfo | None = None):
        self.base_url = base_url.rstrip("/")
        self.info = info if info is not None else handshake(self.base_url)

    @property
    def dim(self) -> int:
        return self.info.dim

    def embed(self, texts: list[str], segment_spans=None) -> np.ndarray:
        return provider_embed(self.base_url, texts, segment_spans, info=self.info)

    def fingerprint(self) -> str:
        return f"provider:{self.info.model}:{self.info.dim}"
