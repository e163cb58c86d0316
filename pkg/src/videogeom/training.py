"""Toy training loop for the geometry model on synthetic scenes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .chunk_attention import ChunkPartition
from .geometry import Scene, SceneSpec, synth_scene
from .io_formats import write_csv
from .losses import GeometryTargets, LossWeights, total_loss
from .model import GeometryModel, ModelConfig, init_model

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "total", "points", "normal", "points_normal")


class TrainingError(RuntimeError):
    pass


@dataclass
class DataConfig:
    kinds: tuple[str, ...] = ("plane", "sphere")
    n_frames: int = 4
    height: int = 16
    width: int = 16
    batch_size: int = 2
    seed: int = 0


def random_spec(kind: str, rng: np.random.Generator, data: DataConfig) -> SceneSpec:
    """A scene of the given kind with jittered surface parameters."""
    base = dict(kind=kind, height=data.height, width=data.width, n_frames=data.n_frames)
    if kind == "plane":
        n = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), -1.0])
        n /= np.linalg.norm(n)
        return SceneSpec(**base, plane_normal=tuple(n), plane_offset=-rng.uniform(3.0, 6.0))
    if kind == "sphere":
        c = (rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(3.5, 5.0))
        return SceneSpec(**base, sphere_center=c, sphere_radius=rng.uniform(0.9, 1.5),
                         back_wall=rng.uniform(7.0, 9.0))
    return SceneSpec(**base)


def sample_scene(rng: np.random.Generator, data: DataConfig) -> Scene:
    kind = data.kinds[int(rng.integers(len(data.kinds)))]
    return synth_scene(random_spec(kind, rng, data), seed=int(rng.integers(2**31)))


def sample_partition(n: int, rng: np.random.Generator) -> ChunkPartition:
    """Offline, streaming, or random chunks of 2-4 frames, with equal odds."""
    choice = int(rng.integers(3))
    if choice == 0:
        return ChunkPartition.full(n)
    if choice == 1:
        return ChunkPartition.streaming(n)
    lengths, left = [], n
    while left:
        k = min(int(rng.integers(2, 5)), left)
        lengths.append(k)
        left -= k
    return ChunkPartition(tuple(lengths))


def targets_of(scene: Scene) -> GeometryTargets:
    return GeometryTargets(scene.points, scene.depth, scene.valid, scene.normals)


@dataclass
class TrainingLog:
    rows: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[LOG_COLUMNS.index(name)] for r in self.rows])

    def smoothed(self, name: str, window: int = 10) -> np.ndarray:
        v = self.column(name)
        if v.size == 0:
            return v
        w = min(window, v.size)
        return np.convolve(v, np.ones(w) / w, mode="valid")

    def to_csv(self, path) -> None:
        write_csv(path, LOG_COLUMNS, self.rows)


def train_toy(
    model: GeometryModel | ModelConfig,
    data: DataConfig,
    steps: int,
    lr: float = 3e-4,
    weights: LossWeights = LossWeights(),
) -> tuple[GeometryModel, TrainingLog]:
    """AdamW on freshly sampled synthetic sequences with per-batch chunk sampling."""
    if isinstance(model, ModelConfig):
        model = init_model(model)
    rng = np.random.default_rng(data.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, betas=(0.9, 0.999), weight_decay=0.01)
    history = TrainingLog()
    model.train()
    for step in range(steps):
        partition = sample_partition(data.n_frames, rng)
        opt.zero_grad(set_to_none=True)
        sums = np.zeros(4)
        for _ in range(data.batch_size):
            scene = sample_scene(rng, data)
            out = model(torch.from_numpy(scene.rgb), partition)
            tl = total_loss(out.points.detach().double().numpy(), out.normals.detach().double().numpy(),
                            targets_of(scene), weights)
            if not np.isfinite(tl.total):
                raise TrainingError(
                    f"non-finite loss at step {step}: points={tl.points} normal={tl.normal} "
                    f"points_normal={tl.points_normal} scale={tl.scale}")
            b = data.batch_size
            torch.autograd.backward(
                [out.points, out.normals],
                [torch.from_numpy(tl.grad_points / b).float(), torch.from_numpy(tl.grad_normals / b).float()])
            sums += (tl.total, tl.points, tl.normal, tl.points_normal)
        opt.step()
        row = (step, *map(float, sums / data.batch_size))
        history.rows.append(row)
        if step % 20 == 0:
            log.info("step %d total %.4f points %.4f", step, row[1], row[2])
    model.eval()
    return model, history
