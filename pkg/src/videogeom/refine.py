"""Completion-based refinement of sparse, noisy depth annotations.

Stages, per sequence:

1. outlier filtering against a monocular prior (local median-ratio fit),
2. a dense prior per frame from a screened Poisson solve in log depth,
3. median-log normalisation over the sequence,
4. a completion teacher that maps (RGB, normalised log prior) to depth,
   rescaled by the sequence median.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from .metrics import lower_median

log = logging.getLogger(__name__)

GAMMA_EPS = 1e-4


class RefineError(ValueError):
    pass


class PoissonSolveError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (relative residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


@dataclass
class SparseDepth:
    values: np.ndarray  # [H, W]
    valid: np.ndarray  # [H, W] bool

    def __post_init__(self):
        self.values = np.asarray(self.values, np.float64)
        self.valid = np.asarray(self.valid, bool)
        if self.values.shape != self.valid.shape:
            raise ValueError("values and mask shapes differ")
        if np.any(self.values[self.valid] <= 0):
            raise ValueError("sparse depth must be positive where valid")

    @property
    def masked(self) -> np.ndarray:
        return np.where(self.valid, self.values, 0.0)


@dataclass
class PoissonConfig:
    lam: float = 10.0
    cg_tol: float = 1e-6
    cg_max_iter: int | None = None

    def __post_init__(self):
        if not self.lam > 0 or not self.cg_tol > 0:
            raise ValueError("lambda and cg_tol must be positive")


@dataclass
class NormalizationState:
    m: float

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError("normalisation median must be positive")


# --------------------------------------------------------------------------
# outlier filtering

def filter_frame(raw: SparseDepth, mono: np.ndarray, window: int = 7, tau: float = 0.15,
                 min_samples: int = 5) -> SparseDepth:
    """Drop measurements that disagree with a locally scaled monocular prior.

    For each valid pixel the scale is the median of ``raw / mono`` over the
    valid pixels in a ``window x window`` neighbourhood.  Comparing ray
    distances instead of z-depth gives the same ratios (both carry the same
    per-pixel ray norm), so depth is used directly.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    mono = np.asarray(mono, np.float64)
    if not raw.valid.any():
        return SparseDepth(raw.values, np.zeros_like(raw.valid))
    usable = raw.valid & (mono > 0)
    ratio = np.where(usable, raw.values / np.where(mono > 0, mono, 1.0), np.nan)
    r = window // 2
    win = sliding_window_view(np.pad(ratio, r, constant_values=np.nan), (window, window))
    count = np.sum(np.isfinite(win), axis=(-1, -2))
    with np.errstate(all="ignore"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            scale = np.nanmedian(win.reshape(*ratio.shape, -1), axis=-1)
        err = np.abs(raw.values - scale * mono) / np.where(raw.valid, raw.values, 1.0)
    keep = usable & (count >= min_samples) & (err <= tau)
    return SparseDepth(raw.values, keep)


def filter_outliers(raw: Sequence[SparseDepth], mono: Sequence[np.ndarray], window: int = 7,
                    tau: float = 0.15) -> list[SparseDepth]:
    return [filter_frame(r, m, window, tau) for r, m in zip(raw, mono, strict=True)]


# --------------------------------------------------------------------------
# Poisson prior

def derive_gamma(mono: np.ndarray, sparse: SparseDepth) -> float:
    """Shift making ``mono + gamma`` proportional to the sparse depth.

    Fits ``a * mono + b ~ depth`` by least squares over valid pixels and
    returns ``max(b / a, 0) + eps``; a non-positive slope falls back to the
    smallest shift that keeps ``mono + gamma`` positive.
    """
    mono = np.asarray(mono, np.float64)
    x, y = mono[sparse.valid], sparse.values[sparse.valid]
    if x.size < 2:
        raise RefineError("derive_gamma needs at least two valid pixels")
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    a = np.sum((x - xm) * (y - ym)) / sxx if sxx > 0 else 0.0
    floor = -float(mono.min()) + GAMMA_EPS
    if a <= 0:
        return max(GAMMA_EPS, floor)
    b = ym - a * xm
    return max(max(b / a, 0.0) + GAMMA_EPS, floor)


def grid_laplacian(height: int, width: int) -> sp.csr_matrix:
    """Graph Laplacian of the 4-neighbour pixel grid (row-major indices)."""
    idx = np.arange(height * width).reshape(height, width)
    src = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    dst = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    n = height * width
    adj = sp.coo_matrix((np.ones(src.size), (src, dst)), shape=(n, n))
    adj = (adj + adj.T).tocsr()
    deg = np.asarray(adj.sum(axis=1)).ravel()
    return (sp.diags(deg) - adj).tocsr()


def conjugate_gradient(A, b: np.ndarray, x0: np.ndarray, tol: float, max_iter: int):
    """Plain CG for SPD ``A``; stops at ``||b - A x|| <= tol * ||b||``."""
    x = x0.copy()
    r = b - A @ x
    p = r.copy()
    rr = r @ r
    bnorm = np.linalg.norm(b)
    target = tol * bnorm
    it = 0
    while np.sqrt(rr) > target:
        if it >= max_iter:
            raise PoissonSolveError("conjugate gradient did not converge", np.sqrt(rr) / bnorm, it)
        Ap = A @ p
        alpha = rr / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
    return x, it, float(np.sqrt(rr) / bnorm) if bnorm > 0 else 0.0


def poisson_system(sparse: SparseDepth, mono: np.ndarray, gamma: float, lam: float):
    """Normal equations ``(L + lam M) u = L v + lam M log(d)`` of the log-depth energy."""
    mono = np.asarray(mono, np.float64)
    if np.any(mono + gamma <= 0):
        raise RefineError("mono + gamma must be positive everywhere")
    if not sparse.valid.any():
        raise RefineError("Poisson prior needs at least one valid measurement")
    h, w = mono.shape
    L = grid_laplacian(h, w)
    v = np.log(mono + gamma).ravel()
    msk = sparse.valid.ravel().astype(np.float64)
    d = np.log(np.where(sparse.valid, sparse.values, 1.0)).ravel()
    A = (L + sp.diags(lam * msk)).tocsr()
    rhs = L @ v + lam * msk * d
    return A, rhs, v, d


def poisson_prior(sparse: SparseDepth, mono: np.ndarray, config: PoissonConfig = PoissonConfig(),
                  gamma: float = 0.0) -> np.ndarray:
    """Dense depth whose log-gradients follow ``log(mono + gamma)`` and whose
    values stick to the valid sparse measurements."""
    A, rhs, v, d = poisson_system(sparse, mono, gamma, config.lam)
    valid = sparse.valid.ravel()
    # start from the prior shifted onto the measurements; exact when they agree
    x0 = v + lower_median(d[valid] - v[valid])
    max_iter = config.cg_max_iter or 10 * v.size
    u, it, res = conjugate_gradient(A, rhs, x0, config.cg_tol, max_iter)
    log.debug("poisson: %d CG iterations, residual %.2e", it, res)
    return np.exp(u).reshape(np.shape(mono))


# --------------------------------------------------------------------------
# normalisation and completion

def normalize_sequence(priors: Sequence[np.ndarray], sparse: Sequence[SparseDepth]):
    """``log(prior / m)`` with ``m`` the median valid sparse depth of the sequence."""
    vals = np.concatenate([s.values[s.valid] for s in sparse]) if sparse else np.empty(0)
    if vals.size == 0:
        raise RefineError("no valid sparse measurements in the sequence")
    state = NormalizationState(lower_median(vals))
    return np.stack([np.log(np.asarray(p, np.float64) / state.m) for p in priors]), state


def denormalize(log_priors: np.ndarray, state: NormalizationState) -> np.ndarray:
    return np.exp(log_priors) * state.m


class CompletionModel(Protocol):
    def __call__(self, frames: np.ndarray, log_priors: np.ndarray) -> np.ndarray:
        """Map ``frames[N, 3, H, W]`` and ``log_priors[N, H, W]`` to normalised depth."""


class IdentityTeacher:
    """Returns the prior unchanged."""

    def __call__(self, frames, log_priors):
        return np.exp(log_priors)


def complete_sequence(frames: np.ndarray, log_priors: np.ndarray, teacher: CompletionModel,
                      state: NormalizationState) -> np.ndarray:
    out = np.asarray(teacher(frames, log_priors), np.float64)
    if out.shape != np.shape(log_priors):
        raise RefineError(f"teacher returned shape {out.shape}, expected {np.shape(log_priors)}")
    return out * state.m


@dataclass
class RefineConfig:
    window: int = 7
    tau: float = 0.15
    poisson: PoissonConfig = field(default_factory=PoissonConfig)


@dataclass
class RefineResult:
    pseudo: np.ndarray  # [N, H, W]
    filtered: list[SparseDepth]
    priors: np.ndarray
    gammas: list[float]
    state: NormalizationState


def refine_pipeline(raw: Sequence[SparseDepth], mono: np.ndarray, frames: np.ndarray | None = None,
                    config: RefineConfig = RefineConfig(),
                    teacher: CompletionModel | None = None) -> RefineResult:
    """filter -> gamma -> Poisson prior -> normalise -> complete."""
    mono = np.asarray(mono, np.float64)
    if len(raw) != len(mono):
        raise RefineError("raw and mono sequences differ in length")
    teacher = teacher or IdentityTeacher()
    filtered = filter_outliers(raw, mono, config.window, config.tau)
    gammas, priors = [], []
    for f, m in zip(filtered, mono):
        g = derive_gamma(m, f)
        gammas.append(g)
        priors.append(poisson_prior(f, m, config.poisson, g))
    log_priors, state = normalize_sequence(priors, filtered)
    if frames is None:
        frames = np.zeros((len(mono), 3) + mono.shape[-2:], np.float32)
    pseudo = complete_sequence(frames, log_priors, teacher, state)
    return RefineResult(pseudo, filtered, np.stack(priors), gammas, state)


# --------------------------------------------------------------------------
# synthetic corruption for experiments and teacher training

def corrupt_depth(depth: np.ndarray, valid: np.ndarray, rng: np.random.Generator,
                  hole_frac: float = 0.3, outlier_frac: float = 0.05,
                  noise: float = 0.01) -> SparseDepth:
    """Sensor-like damage: rectangular holes, gross outliers, mild noise."""
    depth = np.asarray(depth, np.float64)
    h, w = depth.shape
    keep = np.asarray(valid, bool).copy()
    target = hole_frac * keep.sum()
    holes = np.zeros_like(keep)
    while holes.sum() < target:
        bh, bw = rng.integers(1, max(2, h // 3) + 1), rng.integers(1, max(2, w // 3) + 1)
        y, x = rng.integers(0, h - bh + 1), rng.integers(0, w - bw + 1)
        holes[y : y + bh, x : x + bw] = True
    keep &= ~holes
    values = depth * (1.0 + noise * rng.standard_normal(depth.shape))
    idx = np.flatnonzero(keep)
    n_out = int(round(outlier_frac * idx.size))
    bad = rng.choice(idx, size=n_out, replace=False)
    factor = rng.uniform(2.0, 4.0, size=n_out)
    factor = np.where(rng.random(n_out) < 0.5, factor, 1.0 / factor)
    values.ravel()[bad] *= factor
    values = np.where(keep, values, 0.0)
    return SparseDepth(values, keep)


def synthetic_mono(depth: np.ndarray, rng: np.random.Generator, scale: float = 0.5,
                   shift: float = 0.2, warp: float = 0.05) -> np.ndarray:
    """A relative-depth stand-in: affine in depth with a smooth multiplicative warp."""
    depth = np.asarray(depth, np.float64)
    h, w = depth.shape[-2:]
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    phase = rng.uniform(0, 2 * np.pi, size=2)
    field = np.sin(2 * np.pi * xx + phase[0]) * np.cos(np.pi * yy + phase[1])
    return np.maximum(scale * depth * np.exp(warp * field) - shift, 1e-3)
