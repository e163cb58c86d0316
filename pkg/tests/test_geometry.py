import numpy as np
import pytest

from videogeom.geometry import (
    PinholeCamera,
    SceneSpec,
    depth_to_points,
    normals_from_points,
    point_tangents,
    points_to_depth,
    sample_trajectory,
    synth_scene,
    tangent_grad_to_points,
)


def test_camera_and_backprojection():
    cam = PinholeCamera.from_fov(5, 7, 90.0)
    assert cam.fx == pytest.approx(3.5) and (cam.cx, cam.cy) == (3.0, 2.0)
    depth = np.full((5, 7), 2.0)
    pts = depth_to_points(depth, cam)
    assert pts.shape == (3, 5, 7)
    assert np.array_equal(points_to_depth(pts), depth)
    assert pts[0, 2, 3] == 0 and pts[1, 2, 3] == 0  # principal point on the axis
    assert pts[0, 2, 6] == pytest.approx(2.0 * 3 / 3.5)
    with pytest.raises(ValueError):
        depth_to_points(np.zeros((3, 3)), cam)
    with pytest.raises(ValueError):
        PinholeCamera(0, 1, 0, 0)


def test_plane_normals_are_exact():
    # fronto-parallel plane: every derived normal is (0, 0, -1)
    pts = depth_to_points(np.full((6, 6), 3.0), PinholeCamera.from_fov(6, 6))
    n, valid = normals_from_points(pts)
    assert valid.all()
    assert np.allclose(n, np.array([0, 0, -1.0])[:, None, None], atol=1e-12)


def test_normals_orientation_and_degeneracy(rng):
    pts = rng.standard_normal((2, 3, 5, 5))
    n, valid = normals_from_points(pts)
    assert np.all(n[:, 2][valid] <= 0)
    assert np.allclose(np.linalg.norm(n, axis=1)[valid], 1)
    flat, v = normals_from_points(np.zeros((3, 4, 4)))
    assert not v.any() and not flat.any()


def test_tangent_adjoint(rng):
    p = rng.standard_normal((2, 3, 5, 6))
    gu, gv = rng.standard_normal(p.shape), rng.standard_normal(p.shape)
    tu, tv = point_tangents(p)
    lhs = np.sum(tu * gu) + np.sum(tv * gv)
    rhs = np.sum(p * tangent_grad_to_points(gu, gv))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("kind", ["plane", "sphere", "boxes"])
def test_synth_scene_consistency(kind):
    spec = SceneSpec(kind=kind, height=24, width=24, n_frames=3)
    s = synth_scene(spec, seed=5)
    assert s.rgb.shape == (3, 3, 24, 24) and s.rgb.dtype == np.float32
    assert s.valid.mean() >= 0.8
    assert np.all(s.depth[s.valid] > 0)
    assert np.allclose(s.points[:, 2], s.depth)
    assert np.all(s.normals[:, 2][s.valid] <= 0)
    # gt normals agree with normals derived from the points away from edges
    derived, ok = normals_from_points(s.points)
    cos = np.sum(derived * s.normals, axis=1)[ok & s.valid]
    assert np.median(cos) > 0.999
    again = synth_scene(spec, seed=5)
    assert np.array_equal(again.depth, s.depth)


def test_scene_spec_kv_round_trip():
    spec = SceneSpec(kind="sphere", sphere_radius=1.1, n_frames=2)
    assert SceneSpec.from_kv(spec.to_kv()) == spec
    with pytest.raises(ValueError):
        SceneSpec.from_kv({"colour": "1"})
    with pytest.raises(ValueError):
        SceneSpec(kind="torus")


def test_trajectory_is_seeded():
    a, b = sample_trajectory(4, 1), sample_trajectory(4, 1)
    assert all(np.array_equal(r1, r2) and np.array_equal(c1, c2) for (r1, c1), (r2, c2) in zip(a, b))
    for rot, _ in a:
        assert np.allclose(rot @ rot.T, np.eye(3))
