"""Randomised self-check of the chunk-attention invariants (``attn-verify``)."""
from __future__ import annotations

import math

import numpy as np
import torch

from .chunk_attention import (
    AttentionWeights,
    ChunkPartition,
    attend_full,
    build_mask,
    chunkwise_pass,
    expand_mask,
)


def random_partition(n: int, rng: np.random.Generator) -> ChunkPartition:
    lengths, left = [], n
    while left:
        lengths.append(int(rng.integers(1, left + 1)))
        left -= lengths[-1]
    return ChunkPartition(lengths)


def reference_attention(x, layers, frame_of_token, chunk_of_frame) -> torch.Tensor:
    """float64 textbook attention stack; mask built from chunk ids, not ``build_mask``."""
    ch = torch.as_tensor(chunk_of_frame)[torch.as_tensor(frame_of_token)]
    allowed = ch[None, :] <= ch[:, None]
    x = x.double()
    for w in layers:
        w = w.to(torch.float64)
        dh = w.head_dim
        q, k, v = x @ w.wq + w.bq, x @ w.wk + w.bk, x @ w.wv + w.bv
        heads = []
        for h in range(w.heads):
            sl = slice(h * dh, (h + 1) * dh)
            s = (q[:, sl] @ k[:, sl].T) / math.sqrt(dh)
            s = s.masked_fill(~allowed, float("-inf"))
            heads.append(torch.softmax(s, dim=-1) @ v[:, sl])
        x = x + torch.cat(heads, dim=-1) @ w.wo + w.bo
    return x


def _masked(layers, tokens, partition, t, break_mask):
    mask = build_mask(partition)
    if break_mask:
        mask = mask.T.contiguous()
    mask = expand_mask(mask, t)
    x = tokens
    for w in layers:
        x = x + attend_full(x, w, mask)
    return x


def verify_attention(frames: int = 8, dim: int = 64, heads: int = 4, trials: int = 20,
                     seed: int = 0, break_mask: bool = False, n_layers: int = 2) -> dict[str, float]:
    """Max absolute deviation per invariant over ``trials`` random instances."""
    rng = np.random.default_rng(seed)
    worst = dict.fromkeys(("cache_vs_masked", "masked_vs_reference", "offline_reduction",
                           "streaming_reduction", "causality", "window_covering_history"), 0.0)
    for trial in range(trials):
        t = int(rng.integers(1, 4))
        layers = [AttentionWeights.random(dim, heads, seed=seed * 1000 + trial * 10 + i) for i in range(n_layers)]
        x = torch.from_numpy(rng.standard_normal((frames * t, dim)).astype(np.float32))
        part = random_partition(frames, rng)
        frame_of_token = np.repeat(np.arange(frames), t)

        def dev(a, b):
            return float((a.double() - b.double()).abs().max())

        masked = _masked(layers, x, part, t, break_mask)
        cached, _ = chunkwise_pass(layers, x, part, t)
        worst["cache_vs_masked"] = max(worst["cache_vs_masked"], dev(masked, cached))
        ref = reference_attention(x, layers, frame_of_token, part.chunk_index())
        worst["masked_vs_reference"] = max(worst["masked_vs_reference"], dev(masked, ref))

        full = _masked(layers, x, ChunkPartition.full(frames), t, break_mask)
        ref_full = reference_attention(x, layers, frame_of_token, np.zeros(frames, int))
        worst["offline_reduction"] = max(worst["offline_reduction"], dev(full, ref_full))
        stream = _masked(layers, x, ChunkPartition.streaming(frames), t, break_mask)
        ref_causal = reference_attention(x, layers, frame_of_token, np.arange(frames))
        worst["streaming_reduction"] = max(worst["streaming_reduction"], dev(stream, ref_causal))

        # perturbing every frame after chunk k must leave chunks <= k untouched
        if part.n_chunks > 1:
            k = int(rng.integers(0, part.n_chunks - 1))
            stop = list(part.bounds())[k][1]
            x2 = x.clone()
            x2[stop * t :] += torch.from_numpy(rng.standard_normal(x2[stop * t :].shape).astype(np.float32))
            moved = _masked(layers, x2, part, t, break_mask)
            worst["causality"] = max(worst["causality"], dev(masked[: stop * t], moved[: stop * t]))

        windowed, _ = chunkwise_pass(layers, x, part, t, window=frames)
        worst["window_covering_history"] = max(worst["window_covering_history"], dev(windowed, cached))
    return worst
