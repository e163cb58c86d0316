"""Toy video depth-completion teacher.

The geometry backbone with an extra patch-embedding branch for the
normalised log prior.  A single convolutional head predicts a residual on
the log prior; its last layer starts at zero so an untrained teacher is the
identity on the prior.
"""
from __future__ import annotations

import logging

import numpy as np
import torch
from torch import nn

from .chunk_attention import ChunkPartition
from .model import Backbone, ConvHead, ModelConfig, _Init
from .refine import (
    NormalizationState,
    RefineConfig,
    corrupt_depth,
    derive_gamma,
    filter_outliers,
    normalize_sequence,
    poisson_prior,
    synthetic_mono,
)
from .training import DataConfig, TrainingError, sample_scene

log = logging.getLogger(__name__)


class TeacherModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        init = _Init(config.seed + 1)
        self.backbone = Backbone(config, init, extra_inputs=1)
        self.head = ConvHead(init, config.head_channels + 6, config.head_channels, 1, zero_last=True)

    def forward(self, frames: torch.Tensor, log_prior: torch.Tensor,
                partition: ChunkPartition | None = None) -> torch.Tensor:
        """Normalised log depth ``[N, H, W]``."""
        if partition is None:
            partition = ChunkPartition.full(frames.shape[0])
        prior = log_prior[:, None]
        feats = self.backbone.encode(frames, partition, extra=prior)
        return log_prior + self.head(torch.cat([feats, prior], dim=1))[:, 0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self.state_dict().items()}

    def load_tensors(self, tensors) -> None:
        self.load_state_dict({k: torch.from_numpy(np.asarray(v)) for k, v in tensors.items()})


class ToyTeacher:
    """Adapter from :class:`TeacherModel` to the completion-model call signature."""

    def __init__(self, model: TeacherModel):
        self.model = model

    def __call__(self, frames, log_priors):
        with torch.no_grad():
            out = self.model(torch.as_tensor(np.asarray(frames, np.float32)),
                             torch.as_tensor(np.asarray(log_priors, np.float32)))
        return np.exp(out.double().numpy())


def corrupted_sequence(rng: np.random.Generator, data: DataConfig, config: RefineConfig = RefineConfig()):
    """One synthetic training example: (rgb, log priors, normalised gt log depth, gt valid, state)."""
    scene = sample_scene(rng, data)
    raw = [corrupt_depth(d, v, rng) for d, v in zip(scene.depth, scene.valid)]
    mono = np.stack([synthetic_mono(d, rng) for d in scene.depth])
    filtered = filter_outliers(raw, mono, config.window, config.tau)
    priors = [poisson_prior(f, m, config.poisson, derive_gamma(m, f)) for f, m in zip(filtered, mono)]
    log_priors, state = normalize_sequence(priors, filtered)
    target = np.log(np.where(scene.valid, scene.depth, 1.0) / state.m)
    return scene, raw, mono, log_priors, target, state


def train_toy_teacher(config: ModelConfig, data: DataConfig, steps: int, lr: float = 3e-4,
                      refine: RefineConfig = RefineConfig()) -> tuple[TeacherModel, list[float]]:
    """Train on synthetic corruption with an L1 loss in normalised log depth."""
    model = TeacherModel(config)
    rng = np.random.default_rng(data.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, betas=(0.9, 0.999), weight_decay=0.01)
    history = []
    model.train()
    for step in range(steps):
        opt.zero_grad(set_to_none=True)
        total = 0.0
        for _ in range(data.batch_size):
            scene, _, _, log_priors, target, _ = corrupted_sequence(rng, data, refine)
            pred = model(torch.from_numpy(scene.rgb), torch.from_numpy(log_priors).float())
            valid = torch.from_numpy(scene.valid)
            loss = (pred - torch.from_numpy(target).float()).abs()[valid].mean() / data.batch_size
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite teacher loss at step {step}")
            loss.backward()
            total += loss.item()
        opt.step()
        history.append(total)
        if step % 20 == 0:
            log.info("teacher step %d loss %.4f", step, total)
    model.eval()
    return model, history
