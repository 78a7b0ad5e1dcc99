"""Cameras, meshes, per-view observations and depth-based reprojection.

Pixel conventions: an image pixel at (row i, col j) has its center at
continuous image coordinates ``(u, v) = (j + 0.5, i + 0.5)``, and
:func:`project` returns continuous ``(u, v)``. Sampling an image at ``(u, v)``
therefore reads array position ``(v - 0.5, u - 0.5)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor, bilinear_sample

THETA_Z_SCENE = 0.1
THETA_Z_OBJECT = 0.03
# slack in pixels for the inside test, so border pixels survive round-off
INSIDE_TOL = 1e-6


class GeometryError(ValueError):
    pass


@dataclass
class Camera:
    """Pinhole camera with a rigid camera-to-world transform (meters)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_to_world: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64).reshape(4, 4)
        self.validate()

    def validate(self, tol=1e-5):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise GeometryError("image size must be positive")
        rot = self.rotation
        if np.abs(rot.T @ rot - np.eye(3)).max() > tol or abs(np.linalg.det(rot) - 1) > tol:
            raise GeometryError("cam_to_world rotation is not orthonormal with det +1")
        if np.abs(self.cam_to_world[3] - [0, 0, 0, 1]).max() > tol:
            raise GeometryError("cam_to_world bottom row must be [0, 0, 0, 1]")

    @property
    def K(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def rotation(self):
        return self.cam_to_world[:3, :3]

    @property
    def position(self):
        return self.cam_to_world[:3, 3]

    @property
    def world_to_cam(self):
        rot = self.rotation
        out = np.eye(4)
        out[:3, :3] = rot.T
        out[:3, 3] = -rot.T @ self.position
        return out

    def with_pose(self, cam_to_world):
        return replace(self, cam_to_world=np.asarray(cam_to_world, dtype=np.float64))

    def to_dict(self):
        return {
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "cam_to_world": [float(v) for v in self.cam_to_world.ravel()],
        }

    @classmethod
    def from_dict(cls, d):
        missing = {"fx", "fy", "cx", "cy", "width", "height", "cam_to_world"} - set(d)
        if missing:
            raise GeometryError(f"camera is missing fields: {sorted(missing)}")
        m = np.asarray(d["cam_to_world"], dtype=np.float64)
        if m.size != 16:
            raise GeometryError("cam_to_world must hold 16 row-major floats")
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), m.reshape(4, 4))


def look_at(eye, target, up=None):
    """Camera-to-world matrix for a camera at ``eye`` looking at ``target``.

    Camera axes follow the image convention: +x right, +y down, +z forward.
    The up hint is world +z unless the view direction lies within 1 degree
    of the z axis, in which case +x is used.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    if up is None:
        up = np.array([0.0, 0.0, 1.0])
        if abs(forward @ up) > np.cos(np.radians(1.0)):
            up = np.array([1.0, 0.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, down, forward, eye
    return m


def project(point_cam, camera):
    """Pinhole projection of camera-space point(s) to continuous pixel (u, v)."""
    p = np.asarray(point_cam, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise GeometryError("cannot project a point at or behind the camera plane")
    return np.stack([camera.fx * p[..., 0] / z + camera.cx, camera.fy * p[..., 1] / z + camera.cy], axis=-1)


def unproject(pixel, depth, camera):
    """Lift continuous pixel(s) (u, v) with depth to camera-space points."""
    px = np.asarray(pixel, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0):
        raise GeometryError("depth must be positive to unproject")
    x = (px[..., 0] - camera.cx) / camera.fx * d
    y = (px[..., 1] - camera.cy) / camera.fy * d
    return np.stack([x, y, np.broadcast_to(d, x.shape)], axis=-1)


def transform_points(matrix, points):
    points = np.asarray(points, dtype=np.float64)
    return points @ matrix[:3, :3].T + matrix[:3, 3]


@dataclass
class TriMesh:
    positions: np.ndarray
    faces: np.ndarray
    uvs: np.ndarray = None
    normals: np.ndarray = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.uvs is not None:
            self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(-1, 2)
        if self.normals is None and len(self.faces):
            self.normals = compute_vertex_normals(self)
        elif self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)

    @property
    def n_vertices(self):
        return len(self.positions)

    def validate(self, area_tol=1e-12):
        n = self.n_vertices
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= n):
            raise GeometryError("face index out of range")
        if len(self.faces) and face_areas(self).min() <= area_tol:
            raise GeometryError("mesh has degenerate faces")
        if self.uvs is not None and len(self.uvs) != n:
            raise GeometryError("uvs must be per-vertex")
        if self.normals is not None and len(self.normals) != n:
            raise GeometryError("normals must be per-vertex")
        return self

    def copy(self):
        return TriMesh(self.positions.copy(), self.faces.copy(),
                       None if self.uvs is None else self.uvs.copy(),
                       None if self.normals is None else self.normals.copy())


def _face_cross(mesh):
    p = mesh.positions[mesh.faces]
    return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])


def face_areas(mesh):
    return 0.5 * np.linalg.norm(_face_cross(mesh), axis=1)


def compute_vertex_normals(mesh, return_isolated=False):
    """Area-weighted vertex normals; isolated vertices get a zero normal."""
    cross = _face_cross(mesh)  # length is twice the face area
    acc = np.zeros((mesh.n_vertices, 3))
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], cross)
    norm = np.linalg.norm(acc, axis=1)
    isolated = norm == 0
    normals = np.where(isolated[:, None], 0.0, acc / np.where(isolated, 1.0, norm)[:, None])
    if return_isolated:
        return normals, isolated
    return normals


def laplacian_smooth_scalars(values, mesh, steps=3):
    """Repeatedly replace each vertex value by the uniform mean of its 1-ring."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    values = np.asarray(values, dtype=np.float64).copy()
    if steps == 0 or len(mesh.faces) == 0:
        return values
    edges = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    edges = np.unique(np.concatenate([edges, edges[:, ::-1]]), axis=0)
    src, dst = edges[:, 0], edges[:, 1]
    degree = np.bincount(src, minlength=mesh.n_vertices)
    has = degree > 0
    for _ in range(steps):
        total = np.bincount(src, weights=values[dst], minlength=mesh.n_vertices)
        values = np.where(has, total / np.maximum(degree, 1), values)
    return values


@dataclass
class ViewSample:
    """One observation: color, depth, foreground, camera and cached uv map.

    ``color`` is (H, W, 3) in [0, 1]; ``depth`` is (H, W) meters with 0 for
    invalid; ``uv_map`` is (H, W, 2) and ``uv_valid`` its (H, W) mask.
    """

    color: np.ndarray
    depth: np.ndarray
    foreground: np.ndarray
    camera: Camera
    uv_map: np.ndarray = None
    uv_valid: np.ndarray = None

    def __post_init__(self):
        self.color = np.asarray(self.color, dtype=np.float32)
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.foreground = np.asarray(self.foreground, dtype=bool)
        h, w = self.depth.shape
        if self.color.shape != (h, w, 3) or self.foreground.shape != (h, w):
            raise GeometryError("color, depth and foreground sizes disagree")
        if (self.camera.height, self.camera.width) != (h, w):
            raise GeometryError("camera resolution does not match the images")

    @property
    def shape(self):
        return self.depth.shape

    def validate(self):
        if np.any(self.foreground & ~(self.depth > 0)):
            raise GeometryError("foreground pixel without valid depth")
        if self.uv_map is not None:
            if np.any(self.foreground & ~self.uv_valid):
                raise GeometryError("foreground pixel without a valid uv")
            uv = self.uv_map[self.uv_valid]
            if uv.size and (uv.min() < -1e-6 or uv.max() > 1 + 1e-6):
                raise GeometryError("uv coordinates outside [0, 1]")
        return self


def reproject_view(source, auxiliary, theta_z=THETA_Z_SCENE):
    """Warp the auxiliary color image into the source view.

    Returns ``(warped, valid)`` where ``warped`` is (H, W, 3) and ``valid`` is
    a boolean (H, W) mask: the source pixel lands inside the auxiliary image
    (pixel-center extent, with ``INSIDE_TOL`` slack) and the auxiliary depth agrees with the transformed depth within
    ``theta_z``. Color is sampled bilinearly, depth nearest-neighbor.
    """
    if source.shape != auxiliary.shape:
        raise GeometryError(f"view sizes differ: {source.shape} vs {auxiliary.shape}")
    h, w = source.shape
    rows, cols = np.nonzero(source.foreground & (source.depth > 0))
    warped = np.zeros((h, w, 3), dtype=np.float32)
    valid = np.zeros((h, w), dtype=bool)
    if len(rows) == 0:
        return warped, valid
    pix = np.stack([cols + 0.5, rows + 0.5], axis=-1)
    p_a = unproject(pix, source.depth[rows, cols].astype(np.float64), source.camera)
    rel = auxiliary.camera.world_to_cam @ source.camera.cam_to_world
    p_b = transform_points(rel, p_a)
    z = p_b[:, 2]
    front = z > 1e-9
    uv = np.full((len(z), 2), -1.0)
    uv[front] = project(p_b[front], auxiliary.camera)
    # continuous array position of the sample
    sr, sc = uv[:, 1] - 0.5, uv[:, 0] - 0.5
    tol = INSIDE_TOL
    inside = front & (sr >= -tol) & (sr <= h - 1 + tol) & (sc >= -tol) & (sc <= w - 1 + tol)
    sr, sc = np.clip(sr, 0, h - 1), np.clip(sc, 0, w - 1)
    ni = np.clip(np.floor(uv[:, 1]).astype(np.int64), 0, h - 1)
    nj = np.clip(np.floor(uv[:, 0]).astype(np.int64), 0, w - 1)
    d_b = auxiliary.depth[ni, nj].astype(np.float64)
    ok = inside & (d_b > 0) & (np.abs(z - d_b) < theta_z)
    if not ok.any():
        return warped, valid
    coords = np.zeros((2, 1, int(ok.sum())))
    coords[0, 0], coords[1, 0] = sr[ok], sc[ok]
    aux = Tensor(auxiliary.color.transpose(2, 0, 1))
    sampled = bilinear_sample(aux, coords).data[:, 0, :]
    warped[rows[ok], cols[ok]] = sampled.T
    valid[rows[ok], cols[ok]] = True
    return warped, valid
