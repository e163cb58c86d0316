"""Throughput and KV-cache footprint of the inference modes."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import torch

from .model import GeometryModel

BENCH_COLUMNS = ("mode", "N", "C", "window", "ms_per_frame", "peak_cache_frames")


@dataclass
class BenchRow:
    mode: str
    n: int
    chunk: int | None
    window: int | None
    ms_per_frame: float
    peak_cache_frames: int

    def row(self) -> list:
        return [self.mode, self.n, self.chunk, self.window, self.ms_per_frame, self.peak_cache_frames]


def bench(model: GeometryModel, lengths: Sequence[int], chunk_sizes: Sequence[int],
          window: int | None = None, height: int = 16, width: int = 16, repeats: int = 2,
          seed: int = 0, offline: bool = True) -> list[BenchRow]:
    """Time offline and chunked inference on random frames.

    Offline rows report the whole sequence as cached frames (every key is
    held at once); chunked rows report the largest per-layer cache.  Each
    repeat round times every configuration once and the minimum per
    configuration is kept, so slow drift in machine load hits all lengths
    alike instead of skewing the later ones.
    """
    g = torch.Generator().manual_seed(seed)
    jobs = []  # (mode, n, chunk, fn)
    peaks: dict[tuple[int, int], int] = {}
    for n in lengths:
        frames = torch.rand(n, 3, height, width, generator=g)
        if offline:
            jobs.append(("offline", n, None, lambda f=frames: model.run(f, "offline")))
        for c in chunk_sizes:
            def go(f=frames, n=n, c=c):
                state = model.new_stream(window)
                for a in range(0, n, c):
                    model.forward_streaming(f[a : a + c], state, start_frame=a)
                peaks[(n, c)] = state.peak_cache_frames

            jobs.append(("chunked", n, c, go))
    best = [float("inf")] * len(jobs)
    with torch.no_grad():
        model.run(torch.rand(2, 3, height, width, generator=g), "streaming")  # JIT warm-up
        for _ in range(max(1, repeats)):
            for k, (_, _, _, fn) in enumerate(jobs):
                t0 = time.perf_counter()
                fn()
                best[k] = min(best[k], time.perf_counter() - t0)
    rows = []
    for (mode, n, c, _), t in zip(jobs, best):
        peak = n if mode == "offline" else peaks[(n, c)]
        rows.append(BenchRow(mode, n, c, None if mode == "offline" else window, 1e3 * t / n, peak))
    return rows
