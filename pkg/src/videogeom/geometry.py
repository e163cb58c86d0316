"""Camera model, point maps, normals from points, and analytic test scenes."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

__all__ = [
    "PinholeCamera",
    "SceneSpec",
    "Scene",
    "depth_to_points",
    "points_to_depth",
    "normals_from_points",
    "point_tangents",
    "tangent_grad_to_points",
    "synth_scene",
    "sample_trajectory",
]


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @classmethod
    def from_fov(cls, height: int, width: int, fov_deg: float = 60.0) -> "PinholeCamera":
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2)

    def rays(self, height: int, width: int) -> np.ndarray:
        """Unnormalised ray directions ``[3, H, W]`` with unit z."""
        v, u = np.meshgrid(np.arange(height, dtype=np.float64),
                           np.arange(width, dtype=np.float64), indexing="ij")
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)])


def depth_to_points(depth: np.ndarray, camera: PinholeCamera) -> np.ndarray:
    """``[..., H, W]`` depth -> ``[..., 3, H, W]`` camera-frame points."""
    depth = np.asarray(depth)
    if np.any(depth <= 0):
        raise ValueError("depth must be strictly positive")
    rays = camera.rays(*depth.shape[-2:]).astype(depth.dtype, copy=False)
    return depth[..., None, :, :] * rays


def points_to_depth(points: np.ndarray) -> np.ndarray:
    return points[..., 2, :, :]


def point_tangents(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal and vertical tangents of ``[..., 3, H, W]`` points.

    Central differences inside, one-sided at the borders.  The usual 1/2
    factor is dropped since only the direction of the cross product is used.
    """
    if points.shape[-1] < 3 or points.shape[-2] < 3:
        raise ValueError("normals need H, W >= 3")
    tu = np.empty_like(points)
    tu[..., 1:-1] = points[..., 2:] - points[..., :-2]
    tu[..., 0] = points[..., 1] - points[..., 0]
    tu[..., -1] = points[..., -1] - points[..., -2]
    tv = np.empty_like(points)
    tv[..., 1:-1, :] = points[..., 2:, :] - points[..., :-2, :]
    tv[..., 0, :] = points[..., 1, :] - points[..., 0, :]
    tv[..., -1, :] = points[..., -1, :] - points[..., -2, :]
    return tu, tv


def tangent_grad_to_points(g_tu: np.ndarray, g_tv: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`point_tangents`."""
    g = np.zeros_like(g_tu)
    g[..., 2:] += g_tu[..., 1:-1]
    g[..., :-2] -= g_tu[..., 1:-1]
    g[..., 1] += g_tu[..., 0]
    g[..., 0] -= g_tu[..., 0]
    g[..., -1] += g_tu[..., -1]
    g[..., -2] -= g_tu[..., -1]
    g[..., 2:, :] += g_tv[..., 1:-1, :]
    g[..., :-2, :] -= g_tv[..., 1:-1, :]
    g[..., 1, :] += g_tv[..., 0, :]
    g[..., 0, :] -= g_tv[..., 0, :]
    g[..., -1, :] += g_tv[..., -1, :]
    g[..., -2, :] -= g_tv[..., -1, :]
    return g


def normals_from_points(points: np.ndarray, eps: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Unit normals of a point map, oriented towards the camera (z <= 0).

    Returns ``(normals [..., 3, H, W], valid [..., H, W])``; pixels whose
    tangents are parallel or vanish are invalid and their normal is zero.
    """
    points = np.asarray(points, dtype=np.float64)
    tu, tv = point_tangents(points)
    c = np.cross(tu, tv, axis=-3)
    norm = np.linalg.norm(c, axis=-3)
    scale = np.linalg.norm(tu, axis=-3) * np.linalg.norm(tv, axis=-3)
    valid = norm > eps * np.maximum(scale, eps)
    sign = np.where(c[..., 2, :, :] > 0, -1.0, 1.0)
    safe = np.where(valid, norm, 1.0)
    normals = c * (sign / safe)[..., None, :, :]
    normals = np.where(valid[..., None, :, :], normals, 0.0)
    return normals, valid


# --------------------------------------------------------------------------
# analytic scenes

@dataclass
class SceneSpec:
    kind: str = "plane"
    height: int = 16
    width: int = 16
    n_frames: int = 4
    fov_deg: float = 60.0
    # plane: unit normal (pointing at the camera) and offset, n . X = offset
    plane_normal: tuple[float, float, float] = (0.25, -0.35, -0.9)
    plane_offset: float = -4.0
    sphere_center: tuple[float, float, float] = (0.0, 0.0, 4.0)
    sphere_radius: float = 1.3
    # boxes as (min xyz, max xyz)
    boxes: tuple = (((-1.6, -0.4, 3.0), (-0.4, 1.0, 4.0)), ((0.5, -1.2, 4.0), (1.6, 0.6, 5.2)))
    back_wall: float = 8.0
    # per-frame camera motion magnitude
    motion: float = 0.08
    trajectory: list | None = None

    def __post_init__(self):
        if self.kind not in ("plane", "sphere", "boxes"):
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.height < 3 or self.width < 3 or self.n_frames < 1:
            raise ValueError("scene needs H, W >= 3 and at least one frame")

    @property
    def camera(self) -> PinholeCamera:
        return PinholeCamera.from_fov(self.height, self.width, self.fov_deg)

    def to_kv(self) -> dict[str, str]:
        d = asdict(self)
        d.pop("trajectory")
        return {k: repr(v) for k, v in d.items()}

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "SceneSpec":
        import ast

        known = {f for f in cls.__dataclass_fields__ if f != "trajectory"}
        unknown = set(kv) - known
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**{k: ast.literal_eval(v) for k, v in kv.items()})


@dataclass
class Scene:
    rgb: np.ndarray  # [N, 3, H, W] float32 in [0, 1]
    points: np.ndarray  # [N, 3, H, W]
    depth: np.ndarray  # [N, H, W], 0 where invalid
    normals: np.ndarray  # [N, 3, H, W]
    valid: np.ndarray  # [N, H, W] bool
    camera: PinholeCamera
    poses: list = field(default_factory=list)


def _rotation(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return ry @ rx @ rz


def sample_trajectory(n_frames: int, seed: int, motion: float = 0.08) -> list[tuple[np.ndarray, np.ndarray]]:
    """Smooth camera path: list of (camera-to-world rotation, centre)."""
    rng = np.random.default_rng(seed)
    c0 = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.3, 0.3), rng.uniform(-0.8, 0.2)])
    vel = rng.normal(size=3) * motion
    a0 = rng.uniform(-0.12, 0.12, size=3)
    da = rng.normal(size=3) * motion * 0.3
    poses = []
    for i in range(n_frames):
        poses.append((_rotation(*(a0 + i * da)), c0 + i * vel))
    return poses


def _hit_plane(origin, dirs, normal, offset):
    denom = np.tensordot(normal, dirs, axes=(0, 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (offset - normal @ origin) / denom
    t = np.where(np.abs(denom) > 1e-12, t, np.inf)
    t = np.where(t > 1e-9, t, np.inf)
    return t, np.broadcast_to(np.asarray(normal, float)[:, None, None], dirs.shape)


def _hit_sphere(origin, dirs, center, radius):
    oc = origin - np.asarray(center)
    a = np.sum(dirs * dirs, axis=0)
    b = 2 * np.tensordot(oc, dirs, axes=(0, 0))
    c = oc @ oc - radius**2
    disc = b * b - 4 * a * c
    root = np.sqrt(np.maximum(disc, 0.0))
    t = (-b - root) / (2 * a)
    t = np.where((disc >= 0) & (t > 1e-9), t, np.inf)
    hit = origin[:, None, None] + t * dirs
    n = (hit - np.asarray(center)[:, None, None]) / radius
    return t, np.where(np.isfinite(t), n, 0.0)


def _hit_box(origin, dirs, lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo[:, None, None] - origin[:, None, None]) * inv
        t2 = (hi[:, None, None] - origin[:, None, None]) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tnear = tmin.max(axis=0)
    tfar = tmax.min(axis=0)
    ok = (tnear <= tfar) & (tnear > 1e-9)
    t = np.where(ok, tnear, np.inf)
    axis = tmin.argmax(axis=0)
    n = np.zeros_like(dirs)
    for k in range(3):
        sel = axis == k
        n[k][sel] = -np.sign(dirs[k][sel])
    return t, n


def synth_scene(spec: SceneSpec, seed: int = 0) -> Scene:
    """Ray-cast an analytic scene along a seed-dependent camera path."""
    cam = spec.camera
    rays_c = cam.rays(spec.height, spec.width)
    poses = spec.trajectory or sample_trajectory(spec.n_frames, seed, spec.motion)
    if len(poses) != spec.n_frames:
        raise ValueError("trajectory length does not match n_frames")
    light = np.array([-0.3, -0.5, -1.0])
    light /= np.linalg.norm(light)
    out = {k: [] for k in ("rgb", "points", "depth", "normals", "valid")}
    for rot, centre in poses:
        dirs = np.tensordot(rot, rays_c, axes=(1, 0))
        hits = []
        if spec.kind == "plane":
            n = np.asarray(spec.plane_normal, float)
            hits.append(_hit_plane(centre, dirs, n / np.linalg.norm(n), spec.plane_offset))
        else:
            hits.append(_hit_plane(centre, dirs, np.array([0.0, 0.0, -1.0]), -spec.back_wall))
            if spec.kind == "sphere":
                hits.append(_hit_sphere(centre, dirs, spec.sphere_center, spec.sphere_radius))
            else:
                for lo, hi in spec.boxes:
                    hits.append(_hit_box(centre, dirs, lo, hi))
        ts = np.stack([h[0] for h in hits])
        best = ts.argmin(axis=0)
        t = np.take_along_axis(ts, best[None], 0)[0]
        nw = np.zeros_like(dirs)
        for k, (_, nk) in enumerate(hits):
            nw = np.where(best[None] == k, nk, nw)
        valid = np.isfinite(t)
        if valid.mean() < 0.8:
            raise ValueError("scene view has fewer than 80% valid pixels")
        depth = np.where(valid, t, 0.0)  # ray direction has unit camera z
        points = depth[None] * rays_c
        normals = np.tensordot(rot.T, nw, axes=(1, 0))
        normals /= np.maximum(np.linalg.norm(normals, axis=0), 1e-12)
        normals = np.where(normals[2:3] > 0, -normals, normals)
        normals = np.where(valid[None], normals, 0.0)
        shade = 0.25 + 0.75 * np.clip(np.tensordot(light, normals, axes=(0, 0)), 0.0, 1.0)
        tt = np.clip((depth - 1.0) / 8.0, 0.0, 1.0)
        rgb = np.stack([shade * (1 - tt), shade * tt, 0.5 * shade]) * valid[None]
        out["rgb"].append(rgb)
        out["points"].append(points)
        out["depth"].append(depth)
        out["normals"].append(normals)
        out["valid"].append(valid)
    return Scene(
        rgb=np.stack(out["rgb"]).astype(np.float32),
        points=np.stack(out["points"]),
        depth=np.stack(out["depth"]),
        normals=np.stack(out["normals"]),
        valid=np.stack(out["valid"]),
        camera=cam,
        poses=list(poses),
    )
