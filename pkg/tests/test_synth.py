import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from advtex.geometry import project
from advtex.render import sample_texture
from advtex.synth import (PerturbationSpec, icosphere, make_2d_dataset, make_3d_dataset, make_heightfield_mesh,
                          make_pattern_image, perturb_cameras, perturb_geometry, sample_hemisphere_views,
                          translate_image)


@pytest.mark.parametrize("level", range(5))
def test_icosphere_counts_and_topology(level):
    verts, faces = icosphere(level)
    assert len(verts) == 10 * 4 ** level + 2
    assert len(faces) == 20 * 4 ** level
    edges = {tuple(sorted(e)) for f in faces for e in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0]))}
    assert len(verts) - len(edges) + len(faces) == 2
    np.testing.assert_allclose(np.linalg.norm(verts, axis=1), 1.0)


def test_hemisphere_views_count_and_aim():
    cams = sample_hemisphere_views(4, radius=2.0, target=(0.1, 0.0, 0.0))
    assert len(cams) > 900
    for cam in cams[::50]:
        assert cam.position[2] >= -1e-9
        p = (cam.world_to_cam @ [0.1, 0.0, 0.0, 1.0])[:3]
        np.testing.assert_allclose(project(p, cam), [cam.cx, cam.cy], atol=1e-9)
        assert np.linalg.norm(cam.position - [0.1, 0, 0]) == pytest.approx(2.0)


def test_translate_image_matches_loop():
    img = np.random.default_rng(0).uniform(size=(6, 7, 3))
    out = translate_image(img, 2, -1)
    for i in range(6):
        for j in range(7):
            np.testing.assert_array_equal(out[i, j], img[min(max(i + 1, 0), 5), min(max(j - 2, 0), 6)])


def test_2d_dataset_offsets_and_determinism():
    gt = make_pattern_image(64, seed=1)
    data = make_2d_dataset(gt, 8, 8, seed=3)
    assert len(data) == 8
    for obs, (dx, dy) in data:
        assert -8 <= dx <= 8 and -8 <= dy <= 8
        np.testing.assert_array_equal(obs, translate_image(gt, dx, dy))
    again = make_2d_dataset(gt, 8, 8, seed=3)
    assert [o for _, o in again] == [o for _, o in data]
    with pytest.raises(ValueError):
        make_2d_dataset(gt[:10, :10], 4, 8)


def test_pattern_image_range_and_seed():
    a, b = make_pattern_image(32, seed=4), make_pattern_image(32, seed=4)
    np.testing.assert_array_equal(a, b)
    assert a.dtype == np.float32 and a.min() >= 0 and a.max() <= 1
    assert not np.array_equal(a, make_pattern_image(32, seed=5))


def test_severity_bounds():
    spec = PerturbationSpec.from_severity(2.0, seed=1)
    assert spec.e_t == pytest.approx(0.01 * 1.5 ** 2) and spec.e_g == pytest.approx(0.02 * 1.5 ** 2)
    assert spec.e_a == 5.0
    only_geo = PerturbationSpec.from_severity(2.0, camera=False)
    assert only_geo.e_t == 0 and only_geo.e_a == 0 and only_geo.e_g > 0
    with pytest.raises(ValueError):
        PerturbationSpec(e_t=-1.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), e_t=st.floats(0, 0.1), e_a=st.floats(0, 10))
def test_camera_perturbation_within_bounds(seed, e_t, e_a):
    cams = sample_hemisphere_views(1)[:4]
    out = perturb_cameras(cams, e_t, e_a, seed=seed)
    for a, b in zip(cams, out):
        assert np.all(np.abs(b.position - a.position) <= e_t + 1e-12)
        angles = Rotation.from_matrix(a.rotation.T @ b.rotation).as_euler("XYZ", degrees=True)
        assert np.all(np.abs(angles) <= e_a + 1e-6)
        b.validate()


def test_camera_perturbation_is_per_camera_deterministic():
    cams = sample_hemisphere_views(1)[:5]
    full = perturb_cameras(cams, 0.05, 5.0, seed=9)
    tail = perturb_cameras(cams[:2], 0.05, 5.0, seed=9)
    np.testing.assert_array_equal(full[1].cam_to_world, tail[1].cam_to_world)
    zero = perturb_cameras(cams, 0.0, 0.0, seed=9)
    np.testing.assert_array_equal(zero[3].cam_to_world, cams[3].cam_to_world)


def test_geometry_perturbation_along_normals_and_bounded():
    mesh = make_heightfield_mesh(resolution=12, seed=2)
    out = perturb_geometry(mesh, 0.05, seed=4)
    disp = out.positions - mesh.positions
    along = np.sum(disp * mesh.normals, axis=1)
    np.testing.assert_allclose(disp, along[:, None] * mesh.normals, atol=1e-12)
    assert np.abs(along).max() <= 0.05
    assert np.abs(along).max() > 0
    np.testing.assert_array_equal(perturb_geometry(mesh, 0.0).positions, mesh.positions)


def test_heightfield_mesh_is_valid():
    mesh = make_heightfield_mesh(resolution=8, seed=0)
    mesh.validate()
    assert mesh.n_vertices == 81 and len(mesh.faces) == 128
    assert mesh.uvs.min() == 0 and mesh.uvs.max() == 1
    assert np.all(mesh.normals[:, 2] > 0)


def test_error_free_3d_dataset_is_self_consistent():
    mesh = make_heightfield_mesh(resolution=16, seed=1)
    texture = make_pattern_image(32, seed=1)
    cams = sample_hemisphere_views(1, radius=1.8)[:3]
    scan = make_3d_dataset(mesh, texture, cams)
    for v in scan.views:
        v.validate()
        assert v.foreground.sum() > 100
        np.testing.assert_allclose(v.color, sample_texture(texture, v.uv_map, v.foreground), atol=1e-6)


def test_perturbed_3d_dataset_keeps_true_colors_and_moves_geometry():
    mesh = make_heightfield_mesh(resolution=16, seed=1)
    texture = make_pattern_image(32, seed=1)
    cams = sample_hemisphere_views(1, radius=1.8)[:3]
    clean = make_3d_dataset(mesh, texture, cams)
    noisy = make_3d_dataset(mesh, texture, cams, PerturbationSpec.from_severity(3, seed=2))
    for a, b in zip(clean.views, noisy.views):
        np.testing.assert_array_equal(a.color, b.color)
        assert not np.array_equal(a.depth, b.depth)
        assert not np.array_equal(a.camera.cam_to_world, b.camera.cam_to_world)
    assert noisy.true_cameras[0] is cams[0]
