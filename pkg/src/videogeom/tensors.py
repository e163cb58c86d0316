"""Deterministic dense kernels.

Tensors are plain ``torch.Tensor`` objects on the CPU (float32 on the main
path, float64 for oracles).  The kernels here fix the accumulation order of
every reduction so that the same row of output is produced by the same
sequence of IEEE operations no matter how many other rows are in the batch.
That property is what lets a chunk-by-chunk run with a KV cache reproduce a
single masked pass bit for bit.
"""
from __future__ import annotations

import numba
import numpy as np
import torch

__all__ = [
    "ShapeError",
    "DETERMINISTIC",
    "set_deterministic",
    "matmul",
    "masked_softmax",
    "layer_norm",
    "row_sum",
]

DETERMINISTIC = True


class ShapeError(ValueError):
    """Raised when operand extents do not agree."""


def set_deterministic(flag: bool) -> None:
    global DETERMINISTIC
    DETERMINISTIC = bool(flag)
    torch.use_deterministic_algorithms(DETERMINISTIC, warn_only=True)


@numba.njit(cache=True)
def _loop_nest(a, b, out):
    # out[i, j] = (((0 + a[i,0] b[0,j]) + a[i,1] b[1,j]) + ...), one rounding per op
    for batch in range(a.shape[0]):
        for i in range(a.shape[1]):
            for j in range(b.shape[2]):
                out[batch, i, j] = 0
            for t in range(a.shape[2]):
                x = a[batch, i, t]
                for j in range(b.shape[2]):
                    out[batch, i, j] += x * b[batch, t, j]


def _ordered_matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    dtype = torch.promote_types(a.dtype, b.dtype)
    lead = a.shape[:-2]
    a3 = a.detach().to(dtype).reshape(-1, a.shape[-2], a.shape[-1]).contiguous().numpy()
    b3 = b.detach().to(dtype).reshape(-1, b.shape[-2], b.shape[-1]).contiguous().numpy()
    out = np.empty((a3.shape[0], a3.shape[1], b3.shape[2]), dtype=a3.dtype)
    _loop_nest(a3, b3, out)
    return torch.from_numpy(out).reshape(*lead, a.shape[-2], b.shape[-1])


class _OrderedMatmul(torch.autograd.Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save_for_backward(a, b)
        return _ordered_matmul(a, b)

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved_tensors
        grad_a = grad_b = None
        if ctx.needs_input_grad[0]:
            grad_a = _ordered_matmul(grad, b.transpose(-1, -2))
        if ctx.needs_input_grad[1]:
            grad_b = _ordered_matmul(a.transpose(-1, -2), grad)
        return grad_a, grad_b


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Product of ``a[..., m, k]`` and ``b[k, n]`` or ``b[..., k, n]``.

    Leading dimensions of ``a`` are batch dimensions.  A 2-D ``b`` is shared
    across the batch; otherwise ``b`` must carry the same batch shape.
    """
    if a.dim() < 2 or b.dim() < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dims differ: {tuple(a.shape)} x {tuple(b.shape)}")
    if b.dim() > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batch dims differ: {tuple(a.shape)} x {tuple(b.shape)}")
    if not DETERMINISTIC:
        return torch.matmul(a, b)  # BLAS: faster, accumulation order depends on shape
    if b.dim() == 2:
        lead = a.shape[:-1]
        flat = a.reshape(-1, a.shape[-1])
        return _OrderedMatmul.apply(flat, b).reshape(*lead, b.shape[-1])
    return _OrderedMatmul.apply(a, b)


def row_sum(x: torch.Tensor) -> torch.Tensor:
    """Sum over the last axis in left-to-right order, keeping the axis."""
    ones = torch.ones(x.shape[-1], 1, dtype=x.dtype)
    return matmul(x, ones)


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis restricted to entries where ``mask`` is set.

    ``mask`` broadcasts against ``scores``.  Masked outputs are exactly zero.
    Every row must keep at least one entry.
    """
    mask = mask.to(torch.bool)
    if mask.shape[-1] != scores.shape[-1] or mask.shape[-2] != scores.shape[-2]:
        raise ShapeError(f"mask {tuple(mask.shape)} does not fit scores {tuple(scores.shape)}")
    if not bool(mask.any(dim=-1).all()):
        raise ValueError("masked_softmax: a row is fully masked")
    neg_inf = torch.tensor(float("-inf"), dtype=scores.dtype)
    masked = torch.where(mask, scores, neg_inf)
    row_max = masked.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(masked - row_max)
    e = torch.where(mask, e, torch.zeros((), dtype=scores.dtype))
    return e / row_sum(e)


def layer_norm(
    x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    d = x.shape[-1]
    if d < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    mean = row_sum(x) / d
    centred = x - mean
    var = row_sum(centred * centred) / d
    return centred / torch.sqrt(var + eps) * gain + bias
