"""Z-buffered software rasterizer producing depth, uv and coverage maps."""
from __future__ import annotations

import numpy as np

from .geometry import transform_points

NEAR = 1e-6


def _includes_edge(dx, dy):
    # shared edges are traversed in opposite directions by their two faces,
    # so exactly one of them claims the pixels lying on the edge
    return dy > 0 or (dy == 0 and dx < 0)


def rasterize_mesh(mesh, camera, return_face_ids=False):
    """Rasterize ``mesh`` into ``camera``.

    Returns ``(depth, uv_map, mask)``: depth is the camera-space z of the
    nearest surface (0 where empty), uv_map holds perspective-correct
    interpolated vertex uvs (zeros where empty or when the mesh has none).
    Pixel centers sit at (j + 0.5, i + 0.5). On exactly equal depth the lower
    face index wins.
    """
    h, w = camera.height, camera.width
    depth = np.full((h, w), np.inf)
    face_ids = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    if len(mesh.faces):
        pc = transform_points(camera.world_to_cam, mesh.positions)
        for fi, face in enumerate(mesh.faces):
            z = pc[face, 2]
            if np.any(z <= NEAR):
                continue
            u = camera.fx * pc[face, 0] / z + camera.cx
            v = camera.fy * pc[face, 1] / z + camera.cy
            _raster_face(fi, u, v, z, depth, face_ids, bary)

    mask = face_ids >= 0
    out_depth = np.where(mask, depth, 0.0).astype(np.float32)
    uv_map = np.zeros((h, w, 2), dtype=np.float32)
    if mesh.uvs is not None and mask.any():
        fids = face_ids[mask]
        tri_uv = mesh.uvs[mesh.faces[fids]]
        uv_map[mask] = np.einsum("nk,nkc->nc", bary[mask], tri_uv)
        np.clip(uv_map, 0.0, 1.0, out=uv_map)
    if return_face_ids:
        return out_depth, uv_map, mask, face_ids
    return out_depth, uv_map, mask


def _raster_face(fi, u, v, z, depth, face_ids, bary):
    h, w = depth.shape
    area = (u[1] - u[0]) * (v[2] - v[0]) - (v[1] - v[0]) * (u[2] - u[0])
    if area == 0 or not np.isfinite(area):
        return
    order = [0, 1, 2] if area > 0 else [0, 2, 1]
    u, v, z = u[order], v[order], z[order]
    area = abs(area)
    j0 = max(int(np.floor(u.min() - 0.5)), 0)
    j1 = min(int(np.ceil(u.max() - 0.5)), w - 1)
    i0 = max(int(np.floor(v.min() - 0.5)), 0)
    i1 = min(int(np.ceil(v.max() - 0.5)), h - 1)
    if j0 > j1 or i0 > i1:
        return
    px = np.arange(j0, j1 + 1) + 0.5
    py = np.arange(i0, i1 + 1)[:, None] + 0.5
    inside = np.ones((i1 - i0 + 1, j1 - j0 + 1), dtype=bool)
    edge_vals = []
    for a, b in ((1, 2), (2, 0), (0, 1)):
        dx, dy = u[b] - u[a], v[b] - v[a]
        e = dx * (py - v[a]) - dy * (px - u[a])
        inside &= (e > 0) | ((e == 0) & _includes_edge(dx, dy))
        edge_vals.append(e)
    if not inside.any():
        return
    lam = np.stack([e[inside] for e in edge_vals], axis=-1) / area
    inv_z = lam @ (1.0 / z)
    zz = 1.0 / inv_z
    ii, jj = np.nonzero(inside)
    ii += i0
    jj += j0
    closer = zz < depth[ii, jj]
    if not closer.any():
        return
    ii, jj = ii[closer], jj[closer]
    depth[ii, jj] = zz[closer]
    face_ids[ii, jj] = fi
    persp = lam[closer] / z * zz[closer, None]
    # undo the winding swap so weights line up with the face's vertex order
    out = np.empty_like(persp)
    out[:, order] = persp
    bary[ii, jj] = out


def render_textured_mesh(mesh, texture, camera):
    """Color image of ``mesh`` with an (S, S, 3) texture; background is black.

    Returns ``(color, depth, uv_map, mask)``.
    """
    from .render import sample_texture

    depth, uv_map, mask = rasterize_mesh(mesh, camera)
    color = sample_texture(texture, uv_map, mask)
    return color, depth, uv_map, mask
