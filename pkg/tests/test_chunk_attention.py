import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from videogeom.chunk_attention import (
    AttentionWeights,
    ChunkPartition,
    InferenceMode,
    KVCache,
    SequenceError,
    attend_full,
    attend_streaming,
    build_mask,
    chunkwise_pass,
    expand_mask,
    masked_pass,
    run_mode,
)
from videogeom.tensors import ShapeError

partitions = st.lists(st.integers(1, 4), min_size=1, max_size=5).map(ChunkPartition)


def test_partition_constructors():
    assert ChunkPartition.full(5).lengths == (5,)
    assert ChunkPartition.streaming(3).lengths == (1, 1, 1)
    assert ChunkPartition.chunked(10, 4).lengths == (4, 4, 2)
    assert ChunkPartition.chunked(8, 4).lengths == (4, 4)
    assert ChunkPartition.chunked(3, 16).lengths == (3,)
    for bad in ((), (2, 0), (-1,)):
        with pytest.raises(ValueError):
            ChunkPartition(bad)


@settings(max_examples=50, deadline=None)
@given(partitions)
def test_mask_is_block_lower_triangular(part):
    m = build_mask(part).numpy()
    n = part.n_frames
    assert m.shape == (n, n) and m.diagonal().all()
    for a, b in part.bounds():
        assert m[a:b, a:b].all()  # bidirectional within a chunk
        assert not m[a:b, b:].any()  # nothing from later chunks
        assert m[a:b, :a].all()  # everything earlier


def test_mask_degenerate_partitions():
    assert build_mask(ChunkPartition.full(4)).all()
    assert torch.equal(build_mask(ChunkPartition.streaming(4)), torch.tril(torch.ones(4, 4, dtype=torch.bool)))


def test_expand_mask_frame_major():
    m = expand_mask(build_mask(ChunkPartition((1, 1))), 2)
    assert m.tolist() == [[True, True, False, False]] * 2 + [[True] * 4] * 2


def _setup(n, t, d=16, heads=2, layers=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    ws = [AttentionWeights.random(d, heads, seed=seed + i) for i in range(layers)]
    return ws, torch.randn(n * t, d, generator=g)


@settings(max_examples=20, deadline=None)
@given(partitions, st.integers(1, 3), st.integers(0, 1000))
def test_chunkwise_is_bit_identical_to_masked(part, t, seed):
    ws, x = _setup(part.n_frames, t, seed=seed)
    out, caches = chunkwise_pass(ws, x, part, t)
    assert torch.equal(out, masked_pass(ws, x, part, t))
    assert all(c.frames_seen == part.n_frames for c in caches)


def test_modes_agree_on_one_frame():
    ws, x = _setup(1, 3)
    outs = [run_mode(ws, x, m, 3) for m in ("offline", "streaming", "chunked:4")]
    assert all(torch.equal(outs[0], o) for o in outs)


def test_window_eviction_and_peak():
    ws, x = _setup(12, 2)
    out, caches = chunkwise_pass(ws, x, ChunkPartition.chunked(12, 3), 2, window=4)
    c = caches[0]
    assert c.peak_frames == 4 and c.frames_cached == 4
    assert list(c.cached_frame_indices) == [8, 9, 10, 11]
    assert c.keys.shape[-2] == 8
    # a window that covers the whole history changes nothing
    full, _ = chunkwise_pass(ws, x, ChunkPartition.chunked(12, 3), 2, window=12)
    assert torch.equal(full, masked_pass(ws, x, ChunkPartition.chunked(12, 3), 2))
    assert not torch.equal(out, full)


def test_window_semantics_per_query():
    # with window w the newest chunk sees the last w cached frames plus itself
    w = AttentionWeights.random(8, 2, seed=3)
    x = torch.randn(6, 8)
    cache = KVCache(1, window=2)
    for i in range(5):
        attend_streaming(x[i : i + 1], w, cache, start_frame=i)
    got, _ = attend_streaming(x[5:6], w, cache, start_frame=5)
    ref = attend_full(x[3:6], w, torch.ones(3, 3, dtype=torch.bool))[-1:]
    assert torch.equal(got, ref)


def test_streaming_rejects_gaps_and_bad_shapes():
    w = AttentionWeights.random(8, 2)
    cache = KVCache(2)
    attend_streaming(torch.randn(4, 8), w, cache, start_frame=0)
    with pytest.raises(SequenceError):
        attend_streaming(torch.randn(2, 8), w, cache, start_frame=5)
    with pytest.raises(ShapeError):
        attend_streaming(torch.randn(3, 8), w, cache)
    with pytest.raises(ShapeError):
        attend_full(torch.randn(3, 4), w, torch.ones(3, 3, dtype=torch.bool))


def test_cache_reset():
    w = AttentionWeights.random(8, 2)
    cache = KVCache(1)
    attend_streaming(torch.randn(3, 8), w, cache)
    cache.reset()
    assert cache.frames_seen == 0 and cache.keys is None


def test_inference_mode_parse():
    assert InferenceMode.parse("chunked:4").partition(10).lengths == (4, 4, 2)
    assert InferenceMode.parse("chunked", 3).chunk == 3
    assert InferenceMode.parse("streaming").partition(2).lengths == (1, 1)
    assert str(InferenceMode.parse("offline")) == "offline"
    for bad in ("chunked", "sideways"):
        with pytest.raises(ValueError):
            InferenceMode.parse(bad)


def test_run_mode_rejects_partial_frames():
    ws, x = _setup(2, 2)
    with pytest.raises(ShapeError):
        run_mode(ws, x[:3], "offline", tokens_per_frame=2)
