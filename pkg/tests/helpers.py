"""Independent oracles shared by the unit and acceptance tests."""
import numpy as np

from videogeom.geometry import PinholeCamera, depth_to_points


def fd_grad(f, x, h=1e-6):
    """Central finite differences of a scalar function in float64."""
    x = np.array(x, np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30))


def smooth_instance(rng, n=1, h=6, w=6):
    """A smooth positive depth map, its points, and perturbed unit normals."""
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    c = rng.uniform(-0.4, 0.4, size=(n, 3))
    depth = 3 + c[:, 0, None, None] * xx + c[:, 1, None, None] * yy + c[:, 2, None, None] * xx * yy
    pts = depth_to_points(depth, PinholeCamera.from_fov(h, w))
    normals = np.stack([rng.normal(0, 0.3, (n, h, w)), rng.normal(0, 0.3, (n, h, w)), -np.ones((n, h, w))], 1)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return depth, pts, normals
