import numpy as np
import pytest

from advtex.geometry import Camera, TriMesh, look_at
from advtex.raster import rasterize_mesh, render_textured_mesh


def cam(w=48, h=40):
    return Camera(60.0, 60.0, w / 2, h / 2, w, h)


def ray_triangle(d, p0, p1, p2):
    """Möller-Trumbore from the origin along ``d``; returns (t, b1, b2) or None."""
    e1, e2 = p1 - p0, p2 - p0
    pv = np.cross(d, e2)
    det = e1 @ pv
    if abs(det) < 1e-15:
        return None
    tv = -p0
    b1 = (tv @ pv) / det
    qv = np.cross(tv, e1)
    b2 = (d @ qv) / det
    t = (e2 @ qv) / det
    return t, b1, b2


def random_triangle(rng):
    c = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.3, 0.3), rng.uniform(1.5, 4.0)])
    return c + rng.uniform(-0.6, 0.6, (3, 3)) * [1, 1, 0.8]


def test_depth_matches_ray_triangle_oracle_on_random_triangles():
    rng = np.random.default_rng(0)
    camera = cam()
    checked = 0
    for _ in range(100):
        tri = random_triangle(rng)
        depth, _, mask = rasterize_mesh(TriMesh(tri, [[0, 1, 2]]), camera)
        for i, j in zip(*np.nonzero(mask)):
            d = np.array([(j + 0.5 - camera.cx) / camera.fx, (i + 0.5 - camera.cy) / camera.fy, 1.0])
            t, b1, b2 = ray_triangle(d, *tri)
            assert min(b1, b2, 1 - b1 - b2) > -1e-9
            assert abs(depth[i, j] - t) / t < 1e-4
            checked += 1
    assert checked > 1000


def test_coverage_matches_oracle_away_from_edges():
    rng = np.random.default_rng(1)
    camera = cam()
    for _ in range(20):
        tri = random_triangle(rng)
        _, _, mask = rasterize_mesh(TriMesh(tri, [[0, 1, 2]]), camera)
        for i in range(camera.height):
            for j in range(camera.width):
                d = np.array([(j + 0.5 - camera.cx) / camera.fx, (i + 0.5 - camera.cy) / camera.fy, 1.0])
                hit = ray_triangle(d, *tri)
                if hit is None:
                    continue
                m = min(hit[1], hit[2], 1 - hit[1] - hit[2])
                if abs(m) > 1e-6:
                    assert mask[i, j] == (m > 0)


def quad(z, x0, x1, y0, y1):
    return [[x0, y0, z], [x1, y0, z], [x1, y1, z], [x0, y1, z]]


def test_z_buffer_keeps_nearest_in_either_order():
    near, far = quad(2.0, -0.3, 0.1, -0.3, 0.1), quad(3.0, -0.1, 0.5, -0.1, 0.5)
    faces = [[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]]
    for pts in (near + far, far + near):
        depth, _, mask, fid = rasterize_mesh(TriMesh(pts, faces), cam(), return_face_ids=True)
        # pixel (20, 24) sees the ray through (0.5/60, 0.5/60) which hits both quads
        assert depth[20, 24] == pytest.approx(2.0)
        # far-only region
        i, j = 20 + 8, 24 + 8
        assert depth[i, j] == pytest.approx(3.0)
        assert np.all(depth[mask] <= 3.0 + 1e-6)


def test_face_order_does_not_change_depth():
    rng = np.random.default_rng(2)
    tris = np.concatenate([random_triangle(rng) for _ in range(15)])
    faces = np.arange(45).reshape(15, 3)
    d1, _, m1 = rasterize_mesh(TriMesh(tris, faces), cam())
    perm = rng.permutation(15)
    d2, _, m2 = rasterize_mesh(TriMesh(tris, faces[perm]), cam())
    np.testing.assert_array_equal(m1, m2)
    np.testing.assert_array_equal(d1, d2)


def test_shared_edge_is_watertight_and_claimed_once():
    pts = quad(2.0, -0.31, 0.27, -0.23, 0.19)
    faces = [[0, 1, 2], [0, 2, 3]]
    camera = cam()
    _, _, union = rasterize_mesh(TriMesh(pts, faces), camera)
    a = rasterize_mesh(TriMesh(pts, [faces[0]]), camera)[2]
    b = rasterize_mesh(TriMesh(pts, [faces[1]]), camera)[2]
    assert not np.any(a & b)
    np.testing.assert_array_equal(a | b, union)
    jj, ii = np.meshgrid(np.arange(camera.width) + 0.5, np.arange(camera.height) + 0.5)
    x, y = (jj - camera.cx) / camera.fx * 2.0, (ii - camera.cy) / camera.fy * 2.0
    inside = (x > -0.31) & (x < 0.27) & (y > -0.23) & (y < 0.19)
    np.testing.assert_array_equal(union, inside)


def test_uv_is_perspective_correct():
    # slanted plane with uv equal to a linear function of world position
    pts = np.array([[-0.5, -0.4, 1.5], [0.5, -0.4, 3.5], [0.5, 0.4, 3.5], [-0.5, 0.4, 1.5]])
    uvs = np.array([[0, 0], [1, 0], [1, 1], [0, 1.0]])
    camera = cam()
    _, uv, mask = rasterize_mesh(TriMesh(pts, [[0, 1, 2], [0, 2, 3]], uvs), camera)
    n = 0
    for i, j in zip(*np.nonzero(mask)):
        d = np.array([(j + 0.5 - camera.cx) / camera.fx, (i + 0.5 - camera.cy) / camera.fy, 1.0])
        hit = ray_triangle(d, pts[0], pts[1], pts[2]) or ray_triangle(d, pts[0], pts[2], pts[3])
        p = d * hit[0]
        np.testing.assert_allclose(uv[i, j], [(p[0] + 0.5), (p[1] + 0.4) / 0.8], atol=2e-5)
        n += 1
    assert n > 200


def test_faces_behind_camera_and_empty_mesh():
    pts = quad(-2.0, -1, 1, -1, 1)
    depth, uv, mask = rasterize_mesh(TriMesh(pts, [[0, 1, 2], [0, 2, 3]]), cam())
    assert not mask.any() and np.all(depth == 0)
    depth, uv, mask = rasterize_mesh(TriMesh(np.zeros((0, 3)), np.zeros((0, 3))), cam())
    assert depth.shape == (40, 48) and uv.shape == (40, 48, 2) and not mask.any()


def test_render_textured_mesh_background_black():
    pts = quad(0.0, -0.5, 0.5, -0.5, 0.5)
    mesh = TriMesh(pts, [[0, 1, 2], [0, 2, 3]], [[0, 0], [1, 0], [1, 1], [0, 1]])
    camera = Camera(40.0, 40.0, 32, 32, 64, 64, look_at([0, 0, 3.0], [0, 0, 0]))
    texture = np.full((8, 8, 3), 0.7, dtype=np.float32)
    color, depth, uv, mask = render_textured_mesh(mesh, texture, camera)
    assert mask.any() and not mask.all()
    np.testing.assert_allclose(color[mask], 0.7, atol=1e-6)
    np.testing.assert_array_equal(color[~mask], 0.0)
    np.testing.assert_allclose(depth[mask], 3.0, rtol=1e-6)
