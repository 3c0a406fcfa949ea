"""Per-sample random token-order shuffling with client-held inversion keys.

Keys are generated once per sample from a dedicated seeded stream, applied
before features leave the client, and kept client-side; they are plain row
moves, so permute followed by its inverse is byte-exact. Keys are
deliberately not serializable: the transport payload schema only admits
float32 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor, gather_rows

__all__ = ["PermutationKey", "KeyError_", "generate_key", "identity_key",
           "permute", "inverse_permute", "permute_batch",
           "inverse_permute_batch", "key_stream"]

_KEY_STREAM_TAG = 0x9E37


class KeyError_(ValueError):
    """Key length does not match the token count it is applied to."""


@dataclass(frozen=True)
class PermutationKey:
    """A bijection on token indices and its inverse, tied to one sample."""

    sample_id: int
    forward: np.ndarray = field(repr=False)
    inverse: np.ndarray = field(repr=False)

    def __post_init__(self):
        fwd = np.asarray(self.forward, dtype=np.int64)
        inv = np.asarray(self.inverse, dtype=np.int64)
        object.__setattr__(self, "forward", fwd)
        object.__setattr__(self, "inverse", inv)
        if not np.array_equal(np.sort(fwd), np.arange(fwd.size)):
            raise ValueError("forward is not a bijection on [0, n)")
        if not np.array_equal(fwd[inv], np.arange(fwd.size)):
            raise ValueError("inverse does not invert forward")

    @property
    def n_tokens(self) -> int:
        return int(self.forward.size)


def key_stream(seed: int, client_id: int, sample_id: int) -> np.random.Generator:
    """Independent generator for one (client, sample) pair."""
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, client_id, sample_id, _KEY_STREAM_TAG])))


def generate_key(sample_id: int, n_tokens: int,
                 rng: np.random.Generator) -> PermutationKey:
    """Uniformly random permutation drawn from the given stream."""
    if n_tokens < 1:
        raise ValueError(f"n_tokens must be >= 1, got {n_tokens}")
    fwd = rng.permutation(n_tokens).astype(np.int64)
    inv = np.argsort(fwd)
    return PermutationKey(sample_id, fwd, inv)


def identity_key(sample_id: int, n_tokens: int) -> PermutationKey:
    idx = np.arange(n_tokens, dtype=np.int64)
    return PermutationKey(sample_id, idx, idx.copy())


def _check(key: PermutationKey, tokens: Tensor) -> None:
    if tokens.shape[-2] != key.n_tokens:
        raise KeyError_(
            f"key for {key.n_tokens} tokens applied to {tokens.shape[-2]} rows")


def permute(tokens: Tensor, key: PermutationKey) -> Tensor:
    """out[i] = tokens[forward[i]]; differentiable exact row move."""
    _check(key, tokens)
    return gather_rows(tokens, key.forward)


def inverse_permute(tokens: Tensor, key: PermutationKey) -> Tensor:
    """out[i] = tokens[inverse[i]]; exact inverse of permute."""
    _check(key, tokens)
    return gather_rows(tokens, key.inverse)


def _check_batch(index: np.ndarray, tokens: Tensor) -> None:
    if tokens.data.ndim != index.ndim + 1 or tokens.shape[:-1] != index.shape:
        raise KeyError_(
            f"stacked key shape {index.shape} does not match token batch "
            f"{tokens.shape}")


def permute_batch(tokens: Tensor, forward_idx: np.ndarray) -> Tensor:
    """Per-sample permutation of a [B, n, d] batch given stacked forward
    indices [B, n]."""
    idx = np.asarray(forward_idx, dtype=np.int64)
    _check_batch(idx, tokens)
    return gather_rows(tokens, idx)


def inverse_permute_batch(tokens: Tensor, inverse_idx: np.ndarray) -> Tensor:
    idx = np.asarray(inverse_idx, dtype=np.int64)
    _check_batch(idx, tokens)
    return gather_rows(tokens, idx)
