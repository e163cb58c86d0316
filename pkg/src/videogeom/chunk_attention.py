"""Dynamic chunking attention.

A chunk partition splits N frames into contiguous groups.  Query frame i may
attend to key frame j iff ``chunk(j) <= chunk(i)``: bidirectional inside a
chunk, causal across chunks.  The partition ``[N]`` gives offline (full)
attention, ``[1] * N`` gives streaming (strictly causal) attention, and
anything in between gives chunk-based inference.  Because past chunks never
see future ones, chunk-by-chunk execution with a KV cache computes the same
thing as one masked pass over the whole sequence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import torch

from .tensors import ShapeError, masked_softmax, matmul

__all__ = [
    "ChunkPartition",
    "AttentionWeights",
    "KVCache",
    "SequenceError",
    "InferenceMode",
    "build_mask",
    "expand_mask",
    "attend_full",
    "attend_streaming",
    "run_mode",
]


class SequenceError(RuntimeError):
    """A chunk was submitted out of order or to the wrong cache."""


@dataclass(frozen=True)
class ChunkPartition:
    lengths: tuple[int, ...]

    def __post_init__(self):
        lengths = tuple(int(n) for n in self.lengths)
        if not lengths:
            raise ValueError("partition must contain at least one chunk")
        if any(n < 1 for n in lengths):
            raise ValueError(f"chunk lengths must be >= 1, got {lengths}")
        object.__setattr__(self, "lengths", lengths)

    @classmethod
    def full(cls, n: int) -> "ChunkPartition":
        return cls((n,))

    @classmethod
    def streaming(cls, n: int) -> "ChunkPartition":
        return cls((1,) * n)

    @classmethod
    def chunked(cls, n: int, size: int) -> "ChunkPartition":
        """Chunks of ``size`` frames; the last one may be shorter (no padding)."""
        if size < 1:
            raise ValueError("chunk size must be >= 1")
        full, rest = divmod(n, size)
        return cls((size,) * full + ((rest,) if rest else ()))

    @property
    def n_frames(self) -> int:
        return sum(self.lengths)

    @property
    def n_chunks(self) -> int:
        return len(self.lengths)

    def chunk_index(self) -> np.ndarray:
        """ch(i) for every frame i."""
        return np.repeat(np.arange(len(self.lengths)), self.lengths)

    def bounds(self) -> Iterator[tuple[int, int]]:
        start = 0
        for n in self.lengths:
            yield start, start + n
            start += n


def build_mask(partition: ChunkPartition) -> torch.Tensor:
    """Frame-level N x N boolean mask, ``mask[i, j] = ch(j) <= ch(i)``."""
    ch = torch.from_numpy(partition.chunk_index())
    return ch[None, :] <= ch[:, None]


def expand_mask(frame_mask: torch.Tensor, tokens_per_frame: int) -> torch.Tensor:
    """Lift a frame mask to tokens laid out frame-major."""
    if tokens_per_frame < 1:
        raise ValueError("tokens_per_frame must be >= 1")
    t = tokens_per_frame
    return frame_mask.repeat_interleave(t, dim=0).repeat_interleave(t, dim=1)


@dataclass
class AttentionWeights:
    """Projection parameters of one multi-head attention layer (``x @ w + b``)."""

    wq: torch.Tensor
    bq: torch.Tensor
    wk: torch.Tensor
    bk: torch.Tensor
    wv: torch.Tensor
    bv: torch.Tensor
    wo: torch.Tensor
    bo: torch.Tensor
    heads: int

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.heads:
            raise ValueError(f"width {d} not divisible by {self.heads} heads")

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @classmethod
    def random(cls, width: int, heads: int, seed: int = 0, dtype=torch.float32) -> "AttentionWeights":
        g = torch.Generator().manual_seed(seed)
        bound = 1.0 / math.sqrt(width)

        def u(*shape):
            return (torch.rand(*shape, generator=g, dtype=torch.float64) * 2 - 1).mul(bound).to(dtype)

        return cls(u(width, width), u(width), u(width, width), u(width),
                   u(width, width), u(width), u(width, width), u(width), heads)

    def to(self, dtype) -> "AttentionWeights":
        names = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
        return AttentionWeights(*(getattr(self, n).to(dtype) for n in names), heads=self.heads)


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    # [..., T, d] -> [..., h, T, d/h]
    *lead, t, d = x.shape
    return x.reshape(*lead, t, heads, d // heads).transpose(-2, -3)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    *lead, h, t, dh = x.shape
    return x.transpose(-2, -3).reshape(*lead, t, h * dh)


def _project(x, w, b):
    return matmul(x, w) + b


def _attend(q, k, v, mask, weights: AttentionWeights) -> torch.Tensor:
    qh, kh, vh = (_split_heads(t, weights.heads) for t in (q, k, v))
    scores = matmul(qh, kh.transpose(-1, -2)) * (1.0 / math.sqrt(weights.head_dim))
    probs = masked_softmax(scores, mask)
    return _project(_merge_heads(matmul(probs, vh)), weights.wo, weights.bo)


def attend_full(x: torch.Tensor, weights: AttentionWeights, mask: torch.Tensor) -> torch.Tensor:
    """Multi-head attention over ``x[..., T, d]`` under a ``T x T`` token mask."""
    if x.shape[-1] != weights.width:
        raise ShapeError(f"token width {x.shape[-1]} != layer width {weights.width}")
    t = x.shape[-2]
    if tuple(mask.shape[-2:]) != (t, t):
        raise ShapeError(f"mask {tuple(mask.shape)} does not match {t} tokens")
    q = _project(x, weights.wq, weights.bq)
    k = _project(x, weights.wk, weights.bk)
    v = _project(x, weights.wv, weights.bv)
    return _attend(q, k, v, mask, weights)


@dataclass
class KVCache:
    """Keys/values of completed chunks for one attention layer.

    With ``window=None`` every past frame is kept.  With ``window=w`` only the
    most recent ``w`` frames survive after each append; this is an approximate
    bounded-memory policy, exact only while the history fits in the window.
    """

    tokens_per_frame: int
    window: int | None = None
    keys: torch.Tensor | None = None
    values: torch.Tensor | None = None
    frames_seen: int = 0
    peak_frames: int = 0
    _first_cached: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.tokens_per_frame < 1:
            raise ValueError("tokens_per_frame must be >= 1")
        if self.window is not None and self.window < 1:
            raise ValueError("window must be >= 1")

    @property
    def frames_cached(self) -> int:
        return self.frames_seen - self._first_cached

    @property
    def cached_frame_indices(self) -> range:
        return range(self._first_cached, self.frames_seen)

    def reset(self) -> None:
        self.keys = self.values = None
        self.frames_seen = self.peak_frames = self._first_cached = 0

    def append(self, keys: torch.Tensor, values: torch.Tensor, n_frames: int) -> None:
        if self.keys is None:
            self.keys, self.values = keys, values
        else:
            self.keys = torch.cat([self.keys, keys], dim=-2)
            self.values = torch.cat([self.values, values], dim=-2)
        self.frames_seen += n_frames
        if self.window is not None and self.frames_cached > self.window:
            drop = self.frames_cached - self.window
            self.keys = self.keys[..., drop * self.tokens_per_frame :, :]
            self.values = self.values[..., drop * self.tokens_per_frame :, :]
            self._first_cached += drop
        self.peak_frames = max(self.peak_frames, self.frames_cached)


def attend_streaming(
    x: torch.Tensor,
    weights: AttentionWeights,
    cache: KVCache,
    start_frame: int | None = None,
) -> tuple[torch.Tensor, KVCache]:
    """Process the next chunk ``x[T_new, d]`` against the cached history.

    New queries see every cached key plus all keys of their own chunk, which
    is exactly the chunk mask restricted to the new rows.  The cache
    is extended in place (and returned for convenience).
    """
    if x.shape[-1] != weights.width:
        raise ShapeError(f"token width {x.shape[-1]} != layer width {weights.width}")
    t = cache.tokens_per_frame
    if x.shape[-2] % t:
        raise ShapeError(f"{x.shape[-2]} tokens is not a whole number of {t}-token frames")
    if start_frame is not None and start_frame != cache.frames_seen:
        raise SequenceError(f"expected chunk starting at frame {cache.frames_seen}, got {start_frame}")
    n_new = x.shape[-2] // t
    q = _project(x, weights.wq, weights.bq)
    k_new = _split_heads(_project(x, weights.wk, weights.bk), weights.heads)
    v_new = _split_heads(_project(x, weights.wv, weights.bv), weights.heads)
    if cache.keys is not None:
        if cache.keys.shape[:-2] != k_new.shape[:-2] or cache.keys.shape[-1] != k_new.shape[-1]:
            raise SequenceError("cache belongs to a layer with a different shape")
        k_all = torch.cat([cache.keys, k_new], dim=-2)
        v_all = torch.cat([cache.values, v_new], dim=-2)
    else:
        k_all, v_all = k_new, v_new
    mask = torch.ones(x.shape[-2], k_all.shape[-2], dtype=torch.bool)
    qh = _split_heads(q, weights.heads)
    scores = matmul(qh, k_all.transpose(-1, -2)) * (1.0 / math.sqrt(weights.head_dim))
    probs = masked_softmax(scores, mask)
    out = _project(_merge_heads(matmul(probs, v_all)), weights.wo, weights.bo)
    cache.append(k_new, v_new, n_new)
    return out, cache


@dataclass(frozen=True)
class InferenceMode:
    """``offline``, ``streaming`` or ``chunked`` with a chunk size."""

    kind: str
    chunk: int | None = None

    def __post_init__(self):
        if self.kind not in ("offline", "streaming", "chunked"):
            raise ValueError(f"unknown inference mode {self.kind!r}")
        if self.kind == "chunked" and (self.chunk is None or self.chunk < 1):
            raise ValueError("chunked mode needs a chunk size >= 1")

    @classmethod
    def parse(cls, text: str, chunk: int | None = None) -> "InferenceMode":
        kind, _, size = text.partition(":")
        if size:
            chunk = int(size)
        return cls(kind, chunk if kind == "chunked" else None)

    def partition(self, n_frames: int) -> ChunkPartition:
        if n_frames < 1:
            raise ValueError("need at least one frame")
        if self.kind == "offline":
            return ChunkPartition.full(n_frames)
        if self.kind == "streaming":
            return ChunkPartition.streaming(n_frames)
        return ChunkPartition.chunked(n_frames, self.chunk)

    def __str__(self) -> str:
        return f"chunked:{self.chunk}" if self.kind == "chunked" else self.kind


def masked_pass(
    layers: Sequence[AttentionWeights],
    tokens: torch.Tensor,
    partition: ChunkPartition,
    tokens_per_frame: int = 1,
) -> torch.Tensor:
    """One pass of a residual attention stack under the partition's mask."""
    mask = expand_mask(build_mask(partition), tokens_per_frame)
    x = tokens
    for w in layers:
        x = x + attend_full(x, w, mask)
    return x


def chunkwise_pass(
    layers: Sequence[AttentionWeights],
    tokens: torch.Tensor,
    partition: ChunkPartition,
    tokens_per_frame: int = 1,
    window: int | None = None,
) -> tuple[torch.Tensor, list[KVCache]]:
    """The same stack, run chunk by chunk through per-layer KV caches."""
    caches = [KVCache(tokens_per_frame, window) for _ in layers]
    outs = []
    t = tokens_per_frame
    for start, stop in partition.bounds():
        x = tokens[start * t : stop * t]
        for w, cache in zip(layers, caches):
            y, _ = attend_streaming(x, w, cache, start_frame=start)
            x = x + y
        outs.append(x)
    return torch.cat(outs, dim=0), caches


def run_mode(
    layers: Sequence[AttentionWeights],
    tokens: torch.Tensor,
    mode: InferenceMode | str,
    tokens_per_frame: int = 1,
    window: int | None = None,
) -> torch.Tensor:
    """Run a residual attention stack over ``tokens[N*t, d]`` in one inference mode.

    Offline is one masked pass with partition ``[N]``; streaming and chunked go
    through the KV cache.  All three are the same computation under different
    partitions.
    """
    if isinstance(mode, str):
        mode = InferenceMode.parse(mode)
    if tokens.shape[0] == 0 or tokens.shape[0] % tokens_per_frame:
        raise ShapeError("tokens must hold a positive whole number of frames")
    n = tokens.shape[0] // tokens_per_frame
    partition = mode.partition(n)
    if mode.kind == "offline":
        return masked_pass(layers, tokens, partition, tokens_per_frame)
    out, _ = chunkwise_pass(layers, tokens, partition, tokens_per_frame, window)
    return out
