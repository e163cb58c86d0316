"""A small ViT-style video geometry network.

Frames are cut into patches, embedded with learned spatial and frame-index
embeddings and run through a stack of pre-norm transformer blocks.  Most
blocks attend within a frame; an evenly spaced subset attends across frames
under the dynamic chunk mask.  A per-frame decoder follows, then tokens are
unpatchified and two small convolutional heads produce a point map (exp on
z, so depth stays positive) and unit normals.  Depth is the point map's z
channel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field
from fractions import Fraction

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .chunk_attention import (
    AttentionWeights,
    ChunkPartition,
    InferenceMode,
    KVCache,
    SequenceError,
    attend_full,
    attend_streaming,
    build_mask,
    expand_mask,
)
from .tensors import ShapeError, layer_norm, matmul, row_sum

__all__ = [
    "ModelConfig",
    "GeometryOutput",
    "GeometryModel",
    "StreamState",
    "init_model",
    "gelu",
]

_SQRT1_2 = 1.0 / math.sqrt(2.0)


def gelu(x: torch.Tensor) -> torch.Tensor:
    # composed from erf so results do not depend on tensor size
    return 0.5 * x * (1.0 + torch.erf(x * _SQRT1_2))


@dataclass
class ModelConfig:
    patch_size: int = 8
    width: int = 64
    heads: int = 4
    n_backbone_layers: int = 6
    chunk_attn_ratio: float = 1 / 3
    n_decoder_layers: int = 2
    seed: int = 0
    max_frames: int = 64
    max_grid: int = 8
    mlp_ratio: int = 2
    head_channels: int = 16

    def __post_init__(self):
        if self.patch_size < 1 or self.width < 1 or self.heads < 1:
            raise ValueError("patch_size, width and heads must be positive")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        if self.n_backbone_layers < 1 or self.n_decoder_layers < 0:
            raise ValueError("need >= 1 backbone layer and >= 0 decoder layers")
        self.chunk_layers()

    def chunk_layers(self) -> list[int]:
        """Backbone depths using chunk attention, evenly spaced, 0-indexed."""
        L = self.n_backbone_layers
        count = Fraction(self.chunk_attn_ratio).limit_denominator(1000) * L
        if count.denominator != 1 or count < 1 or count > L:
            raise ValueError(
                f"{L} layers x ratio {self.chunk_attn_ratio} is not a whole count in [1, {L}]")
        n = int(count)
        return [(k + 1) * L // n - 1 for k in range(n)]

    def to_kv(self) -> dict[str, str]:
        return {k: repr(v) for k, v in asdict(self).items()}

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        import ast

        fields = cls.__dataclass_fields__
        return cls(**{k: ast.literal_eval(v) for k, v in kv.items() if k in fields})


@dataclass
class GeometryOutput:
    points: torch.Tensor  # [N, 3, H, W]
    depth: torch.Tensor  # [N, H, W]
    normals: torch.Tensor  # [N, 3, H, W]

    def detach(self) -> "GeometryOutput":
        return GeometryOutput(self.points.detach(), self.depth.detach(), self.normals.detach())

    def numpy(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k).detach().numpy() for k in ("points", "depth", "normals")}

    @staticmethod
    def cat(parts: list["GeometryOutput"]) -> "GeometryOutput":
        return GeometryOutput(*(torch.cat([getattr(p, k) for p in parts]) for k in ("points", "depth", "normals")))


class _Init:
    def __init__(self, seed: int):
        self.g = torch.Generator().manual_seed(seed)

    def uniform(self, *shape, bound: float) -> nn.Parameter:
        t = (torch.rand(*shape, generator=self.g, dtype=torch.float64) * 2 - 1) * bound
        return nn.Parameter(t.to(torch.float32))

    def fan_in(self, fan_in: int, *shape) -> nn.Parameter:
        return self.uniform(*shape, bound=1.0 / math.sqrt(fan_in))


class Linear(nn.Module):
    def __init__(self, init: _Init, d_in: int, d_out: int, zero: bool = False):
        super().__init__()
        self.weight = init.fan_in(d_in, d_in, d_out)
        self.bias = init.fan_in(d_in, d_out)
        if zero:
            with torch.no_grad():
                self.weight.zero_()
                self.bias.zero_()

    def forward(self, x):
        return matmul(x, self.weight) + self.bias


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias)


class Block(nn.Module):
    """Pre-norm transformer block; ``temporal`` blocks attend across frames."""

    def __init__(self, init: _Init, width: int, heads: int, mlp_ratio: int, temporal: bool):
        super().__init__()
        self.temporal = temporal
        self.heads = heads
        self.norm1 = LayerNorm(width)
        self.q, self.k, self.v, self.o = (Linear(init, width, width) for _ in range(4))
        self.norm2 = LayerNorm(width)
        self.fc1 = Linear(init, width, width * mlp_ratio)
        self.fc2 = Linear(init, width * mlp_ratio, width)

    @property
    def attention(self) -> AttentionWeights:
        return AttentionWeights(self.q.weight, self.q.bias, self.k.weight, self.k.bias,
                                self.v.weight, self.v.bias, self.o.weight, self.o.bias, self.heads)

    def _mlp(self, x):
        return x + self.fc2(gelu(self.fc1(self.norm2(x))))

    def forward(self, x: torch.Tensor, token_mask: torch.Tensor | None = None) -> torch.Tensor:
        """``x[N, t, d]``; ``token_mask`` is the cross-frame mask for temporal blocks."""
        n, t, d = x.shape
        h = self.norm1(x)
        if self.temporal and token_mask is not None:
            a = attend_full(h.reshape(n * t, d), self.attention, token_mask).reshape(n, t, d)
        else:
            a = attend_full(h, self.attention, torch.ones(t, t, dtype=torch.bool))
        return self._mlp(x + a)

    def forward_cached(self, x: torch.Tensor, cache: KVCache, start_frame: int) -> torch.Tensor:
        n, t, d = x.shape
        h = self.norm1(x)
        a, _ = attend_streaming(h.reshape(n * t, d), self.attention, cache, start_frame)
        return self._mlp(x + a.reshape(n, t, d))


class Conv3x3(nn.Module):
    """3x3 same-padding convolution as im2col followed by the ordered matmul."""

    def __init__(self, init: _Init, c_in: int, c_out: int, zero: bool = False):
        super().__init__()
        self.lin = Linear(init, 9 * c_in, c_out, zero=zero)

    def forward(self, x):
        n, c, h, w = x.shape
        cols = F.unfold(x, kernel_size=3, padding=1).transpose(1, 2)  # [N, HW, 9C]
        return self.lin(cols).transpose(1, 2).reshape(n, -1, h, w)


class ConvHead(nn.Module):
    def __init__(self, init: _Init, c_in: int, hidden: int, c_out: int, zero_last: bool = False):
        super().__init__()
        self.conv1 = Conv3x3(init, c_in, hidden)
        self.conv2 = Conv3x3(init, hidden, c_out, zero=zero_last)

    def forward(self, x):
        return self.conv2(gelu(self.conv1(x)))


@dataclass
class StreamState:
    """Per-sequence caches for the temporal blocks of one model."""

    caches: list[KVCache]
    next_frame: int = 0

    @property
    def peak_cache_frames(self) -> int:
        return max((c.peak_frames for c in self.caches), default=0)


class Backbone(nn.Module):
    """Patch embedding, backbone blocks, per-frame decoder and unpatchify."""

    def __init__(self, config: ModelConfig, init: _Init, extra_inputs: int = 0):
        super().__init__()
        c = config
        self.config = c
        self.extra_inputs = extra_inputs
        p2 = c.patch_size ** 2
        self.embed = Linear(init, 3 * p2, c.width)
        if extra_inputs:
            self.embed_extra = Linear(init, extra_inputs * p2, c.width)
        self.spatial = init.uniform(c.max_grid * c.max_grid, c.width, bound=0.02)
        self.frame_embed = init.uniform(c.max_frames, c.width, bound=0.02)
        chunked = set(c.chunk_layers())
        self.blocks = nn.ModuleList(
            Block(init, c.width, c.heads, c.mlp_ratio, temporal=i in chunked)
            for i in range(c.n_backbone_layers))
        self.decoder = nn.ModuleList(
            Block(init, c.width, c.heads, c.mlp_ratio, temporal=False)
            for _ in range(c.n_decoder_layers))
        self.norm = LayerNorm(c.width)
        self.unpatch = Linear(init, c.width, p2 * c.head_channels)

    @property
    def temporal_blocks(self) -> list[Block]:
        return [b for b in self.blocks if b.temporal]

    def _grid(self, h: int, w: int) -> tuple[int, int]:
        p = self.config.patch_size
        if h % p or w % p:
            raise ShapeError(f"frame size {h}x{w} not divisible by patch size {p}")
        gh, gw = h // p, w // p
        if gh > self.config.max_grid or gw > self.config.max_grid:
            raise ShapeError(f"{gh}x{gw} patch grid exceeds max_grid {self.config.max_grid}")
        return gh, gw

    def _patchify(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        p = self.config.patch_size
        gh, gw = h // p, w // p
        return x.reshape(n, c, gh, p, gw, p).permute(0, 2, 4, 1, 3, 5).reshape(n, gh * gw, c * p * p)

    def tokens(self, frames, extra, first_frame: int, temporal: bool = True) -> torch.Tensor:
        if frames.dim() != 4 or frames.shape[1] != 3:
            raise ShapeError(f"frames must be [N, 3, H, W], got {tuple(frames.shape)}")
        n, _, h, w = frames.shape
        gh, gw = self._grid(h, w)
        x = self.embed(self._patchify(frames))
        if self.extra_inputs:
            if extra is None or tuple(extra.shape) != (n, self.extra_inputs, h, w):
                raise ShapeError("missing or mis-shaped extra input")
            x = x + self.embed_extra(self._patchify(extra))
        m = self.config.max_grid
        idx = (torch.arange(gh)[:, None] * m + torch.arange(gw)[None, :]).reshape(-1)
        x = x + self.spatial[idx]
        if temporal:
            fidx = (torch.arange(n) + first_frame).clamp(max=self.config.max_frames - 1)
            x = x + self.frame_embed[fidx][:, None, :]
        return x

    def features(self, x: torch.Tensor, frames: torch.Tensor) -> torch.Tensor:
        """Decoder + unpatchify; returns ``[N, head_channels + 5, H, W]``.

        Head inputs are the upsampled features, the RGB frame and two
        normalised pixel-coordinate channels.
        """
        for blk in self.decoder:
            x = blk(x)
        x = self.unpatch(self.norm(x))
        n, _, h, w = frames.shape
        p, c = self.config.patch_size, self.config.head_channels
        gh, gw = h // p, w // p
        x = x.reshape(n, gh, gw, c, p, p).permute(0, 3, 1, 4, 2, 5).reshape(n, c, h, w)
        v = torch.linspace(-1.0, 1.0, h).reshape(1, 1, h, 1).expand(n, 1, h, w)
        u = torch.linspace(-1.0, 1.0, w).reshape(1, 1, 1, w).expand(n, 1, h, w)
        return torch.cat([x, frames, u, v], dim=1)

    def encode(self, frames, partition: ChunkPartition, extra=None, temporal: bool = True):
        n = frames.shape[0]
        if partition.n_frames != n:
            raise ShapeError(f"partition covers {partition.n_frames} frames, input has {n}")
        x = self.tokens(frames, extra, 0, temporal)
        mask = None
        if temporal:
            mask = expand_mask(build_mask(partition), x.shape[1])
        for blk in self.blocks:
            x = blk(x, mask)
        return self.features(x, frames)

    def encode_cached(self, frames, state: StreamState, extra=None, start_frame: int | None = None):
        if start_frame is not None and start_frame != state.next_frame:
            raise SequenceError(f"expected packet starting at frame {state.next_frame}, got {start_frame}")
        x = self.tokens(frames, extra, state.next_frame)
        caches = iter(state.caches)
        for blk in self.blocks:
            x = blk.forward_cached(x, next(caches), state.next_frame) if blk.temporal else blk(x)
        state.next_frame += frames.shape[0]
        return self.features(x, frames)

    def new_state(self, window: int | None = None, tokens_per_frame: int = 1) -> StreamState:
        return StreamState([KVCache(tokens_per_frame, window) for _ in self.temporal_blocks])


class GeometryModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        init = _Init(config.seed)
        self.backbone = Backbone(config, init)
        c_in = config.head_channels + 5
        self.point_head = ConvHead(init, c_in, config.head_channels, 3)
        self.normal_head = ConvHead(init, c_in, config.head_channels, 3)

    def _heads(self, feats: torch.Tensor) -> GeometryOutput:
        raw = self.point_head(feats)
        z = torch.exp(raw[:, 2:3])
        points = torch.cat([raw[:, :2], z], dim=1)
        n = self.normal_head(feats)
        sq = n[:, 0] * n[:, 0] + n[:, 1] * n[:, 1] + n[:, 2] * n[:, 2]
        normals = n / torch.sqrt(sq.clamp_min(1e-24))[:, None]
        return GeometryOutput(points, points[:, 2], normals)

    def forward(self, frames: torch.Tensor, partition: ChunkPartition | None = None,
                temporal: bool = True) -> GeometryOutput:
        """Predict geometry for ``frames[N, 3, H, W]`` under a chunk partition.

        ``temporal=False`` drops the frame-index embedding and turns every
        cross-frame block into an intra-frame one (used to isolate where
        temporal mixing happens).
        """
        if partition is None:
            partition = ChunkPartition.full(frames.shape[0])
        return self._heads(self.backbone.encode(frames, partition, temporal=temporal))

    def new_stream(self, window: int | None = None) -> StreamState:
        # tokens per frame is fixed by the first packet
        return self.backbone.new_state(window)

    def forward_streaming(self, packet: torch.Tensor, state: StreamState,
                          start_frame: int | None = None) -> GeometryOutput:
        """Process the next contiguous packet of frames through the KV caches."""
        p = self.config.patch_size
        t = (packet.shape[-2] // p) * (packet.shape[-1] // p)
        for c in state.caches:
            if c.frames_seen == 0:
                c.tokens_per_frame = t
            elif c.tokens_per_frame != t:
                raise SequenceError("packet resolution differs from earlier packets")
        return self._heads(self.backbone.encode_cached(packet, state, start_frame=start_frame))

    def run(self, frames: torch.Tensor, mode: InferenceMode | str,
            window: int | None = None) -> GeometryOutput:
        """Whole-sequence inference in one of the three modes."""
        if isinstance(mode, str):
            mode = InferenceMode.parse(mode)
        n = frames.shape[0]
        partition = mode.partition(n)
        if mode.kind == "offline":
            return self.forward(frames, partition)
        state = self.new_stream(window)
        parts = [self.forward_streaming(frames[a:b], state, start_frame=a) for a, b in partition.bounds()]
        return GeometryOutput.cat(parts)

    # checkpoint helpers -------------------------------------------------
    def tensors(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self.state_dict().items()}

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        self.load_state_dict({k: torch.from_numpy(np.asarray(v)) for k, v in tensors.items()})


def init_model(config: ModelConfig) -> GeometryModel:
    return GeometryModel(config)
