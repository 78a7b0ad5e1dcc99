"""Synthetic datasets for controlled misalignment experiments.

All randomness comes from ``numpy.random.default_rng``. Per-item streams are
seeded with ``[seed, index]`` so outputs do not depend on processing order.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import Camera, TriMesh, ViewSample, compute_vertex_normals, laplacian_smooth_scalars, look_at
from .raster import rasterize_mesh
from .render import sample_texture

SEVERITIES = (1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5)


def make_pattern_image(size=128, seed=0, n_shapes=40):
    """Piecewise-constant test image of rectangles, discs and striped discs."""
    rng = np.random.default_rng(seed)
    img = np.zeros((size, size, 3)) + rng.uniform(0, 1, 3)
    yy, xx = np.mgrid[:size, :size].astype(np.float64)
    scale = size / 128.0
    for _ in range(int(n_shapes)):
        kind = rng.integers(3)
        color = rng.uniform(0, 1, 3)
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(3 * scale, size / 6)
        if kind == 0:
            m = (abs(yy - cy) < r) & (abs(xx - cx) < rng.uniform(2 * scale, size / 6))
        elif kind == 1:
            m = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            th = rng.uniform(0, np.pi)
            period = rng.uniform(3, 8) * scale
            stripes = (np.cos(th) * xx + np.sin(th) * yy) % period < period / 2
            m = stripes & ((yy - cy) ** 2 + (xx - cx) ** 2 < r * r)
        img[m] = color
    return img.astype(np.float32)


def translate_image(image, dx, dy):
    """Shift an image by integer (dx, dy) pixels, clamping at the edges."""
    h, w = image.shape[:2]
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return image[rows][:, cols]


def make_2d_dataset(ground_truth, num_observations=16, max_shift=16, seed=0):
    """Observations of ``ground_truth`` under random integer translations.

    Returns a list of ``(observation, (dx, dy))`` with offsets uniform in
    ``[-max_shift, max_shift]^2``.
    """
    gt = np.asarray(ground_truth, dtype=np.float32)
    if num_observations < 2:
        raise ValueError("need at least two observations")
    if max_shift < 0:
        raise ValueError("max_shift must be >= 0")
    if min(gt.shape[:2]) < 2 * max_shift:
        raise ValueError(f"image {gt.shape[:2]} is smaller than twice the maximum shift {max_shift}")
    rng = np.random.default_rng(seed)
    offsets = rng.integers(-max_shift, max_shift + 1, size=(num_observations, 2))
    return [(translate_image(gt, int(dx), int(dy)), (int(dx), int(dy))) for dx, dy in offsets]


def icosphere(level=0):
    """Vertices and faces of an icosahedron subdivided ``level`` times on the unit sphere."""
    phi = (1 + 5 ** 0.5) / 2
    verts = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
             (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
             (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(level):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts), np.array(faces, dtype=np.int64)


def intrinsics_for_fov(width, height, fov_degrees):
    f = 0.5 * width / np.tan(np.radians(fov_degrees) / 2)
    return f, f, width / 2.0, height / 2.0


def sample_hemisphere_views(subdivision_level=4, radius=1.0, target=(0.0, 0.0, 0.0),
                            width=64, height=64, fov_degrees=45.0):
    """Cameras on the upper (z >= 0) half of a subdivided icosahedron, aimed at ``target``."""
    if subdivision_level < 0:
        raise ValueError("subdivision_level must be >= 0")
    verts, _ = icosphere(subdivision_level)
    kept = verts[verts[:, 2] >= -1e-12]
    target = np.asarray(target, dtype=np.float64)
    fx, fy, cx, cy = intrinsics_for_fov(width, height, fov_degrees)
    return [Camera(fx, fy, cx, cy, width, height, look_at(target + radius * v, target)) for v in kept]


@dataclass
class PerturbationSpec:
    """Error magnitudes: translation (m), rotation (degrees), geometry (m)."""

    n: float = 0.0
    e_t: float = 0.0
    e_a: float = 0.0
    e_g: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.e_t, self.e_a, self.e_g) < 0:
            raise ValueError("perturbation bounds must be >= 0")

    @classmethod
    def from_severity(cls, n, seed=0, e_a=5.0, camera=True, geometry=True):
        """Bounds ``e_t = 0.01 * 1.5**n`` and ``e_g = 0.02 * 1.5**n``."""
        return cls(n=n, e_t=0.01 * 1.5 ** n if camera else 0.0, e_a=e_a if camera else 0.0,
                   e_g=0.02 * 1.5 ** n if geometry else 0.0, seed=seed)

    def to_dict(self):
        return asdict(self)


def perturb_cameras(cameras, e_t, e_a, seed=0):
    """Jitter each pose: uniform translation noise and intrinsic XYZ Euler rotation noise."""
    if e_t < 0 or e_a < 0:
        raise ValueError("perturbation bounds must be >= 0")
    out = []
    for i, cam in enumerate(cameras):
        rng = np.random.default_rng([seed, i])
        dt = rng.uniform(-e_t, e_t, 3)
        angles = rng.uniform(-e_a, e_a, 3)
        m = cam.cam_to_world.copy()
        m[:3, :3] = m[:3, :3] @ Rotation.from_euler("XYZ", angles, degrees=True).as_matrix()
        m[:3, 3] += dt
        out.append(cam.with_pose(m))
    return out


def perturb_geometry(mesh, e_g, seed=0, smooth_steps=3):
    """Displace vertices along their normals by smoothed uniform noise in [-e_g, e_g]."""
    rng = np.random.default_rng(seed)
    scalars = rng.uniform(-e_g, e_g, mesh.n_vertices) if e_g > 0 else np.zeros(mesh.n_vertices)
    scalars = laplacian_smooth_scalars(scalars, mesh, smooth_steps)
    normals = mesh.normals if mesh.normals is not None else compute_vertex_normals(mesh)
    positions = mesh.positions + scalars[:, None] * normals
    return TriMesh(positions, mesh.faces.copy(), None if mesh.uvs is None else mesh.uvs.copy())


def make_heightfield_mesh(resolution=32, size=1.0, seed=0, n_bumps=6, max_height=0.2):
    """Bumpy square patch in the z = 0 plane with planar uvs.

    Gaussian bumps create self-occlusion at grazing views; uv follows (x, y)
    so the texture is continuous with no seams.
    """
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, resolution + 1)
    uu, vv = np.meshgrid(t, t)
    x, y = (uu - 0.5) * size, (vv - 0.5) * size
    z = np.zeros_like(x)
    for _ in range(n_bumps):
        cx, cy = rng.uniform(-0.35, 0.35, 2) * size
        sigma = rng.uniform(0.06, 0.15) * size
        z += rng.uniform(0.3, 1.0) * max_height * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma ** 2))
    positions = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    uvs = np.stack([uu, vv], axis=-1).reshape(-1, 2)
    n = resolution + 1
    idx = np.arange(n * n).reshape(n, n)
    a, b, c, d = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])
    return TriMesh(positions, faces, uvs)


@dataclass
class SyntheticScan:
    """A perturbed virtual scan plus the ground truth kept aside for evaluation."""

    views: list
    texture: np.ndarray
    true_cameras: list
    true_mesh: TriMesh
    observed_mesh: TriMesh
    spec: PerturbationSpec = field(default_factory=PerturbationSpec)


def make_3d_dataset(mesh, texture, cameras, spec=None):
    """Render a virtual scan with camera and geometry errors.

    Colors come from the true mesh and poses. Each stored view carries the
    perturbed pose, and its depth, uv map and foreground are rasterized from
    the perturbed mesh under that pose, which is all an optimizer may see.
    """
    if mesh.uvs is None:
        raise ValueError("mesh has no uv coordinates")
    if not cameras:
        raise ValueError("need at least one camera")
    spec = spec or PerturbationSpec()
    texture = np.asarray(texture, dtype=np.float32)
    observed_cams = perturb_cameras(cameras, spec.e_t, spec.e_a, seed=spec.seed)
    observed_mesh = perturb_geometry(mesh, spec.e_g, seed=spec.seed + 1)
    views = []
    for true_cam, cam in zip(cameras, observed_cams):
        _, true_uv, true_mask = rasterize_mesh(mesh, true_cam)
        color = sample_texture(texture, true_uv, true_mask)
        depth, uv_map, fg = rasterize_mesh(observed_mesh, cam)
        views.append(ViewSample(color, depth, fg, cam, uv_map, fg.copy()))
    return SyntheticScan(views, texture, list(cameras), mesh, observed_mesh, spec)
