"""Deterministic hashed bag-of-words text embedder.

Tokens are hashed into a fixed number of buckets with FNV-1a, counted, and
L2-normalized. No model weights, no randomness: the same text produces a
bit-identical vector on every platform, which gives retrieval tests a
computable ground truth.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DIM = 256

_FNV_OFFSET_BASIS = 14695981039346656037
_FNV_PRIME = 1099511628211
_U64_MASK = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash of a byte string."""
    h = _FNV_OFFSET_BASIS
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _U64_MASK
    return h


def tokenize(text: str) -> list[str]:
    """Lowercase and split on every non-alphanumeric codepoint."""
    tokens: list[str] = []
    current: list[str] = []
    for ch in text.lower():
        if ch.isalnum():
            current.append(ch)
        elif current:
            tokens.append("".join(current))
            current = []
    if current:
        tokens.append("".join(current))
    return tokens


def bucket_of(token: str, dim: int = DEFAULT_DIM) -> int:
    """Bucket index a token hashes to."""
    return fnv1a64(token.encode("utf-8")) % dim


def embed_reference(text: str, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Embed text as L2-normalized hashed token counts.

    Empty or token-free text yields the all-zero vector; anything else is
    normalized to unit length. Token order never matters, only the multiset.
    """
    if dim < 1:
        raise ValueError(f"embedding dimension must be positive, got {dim}")
    counts = np.zeros(dim, dtype=np.float64)
    for token in tokenize(text):
        counts[bucket_of(token, dim)] += 1.0
    norm = float(np.linalg.norm(counts))
    if norm == 0.0:
        return counts
    return counts / norm


def is_zero_vector(vector: np.ndarray) -> bool:
    return not np.any(vector)
