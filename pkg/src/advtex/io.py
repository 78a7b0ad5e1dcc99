"""Readers and writers for every on-disk artifact.

Binary layouts are documented in FORMATS.md. All binary formats are
little-endian and start with a 4-byte magic followed by a uint32 version.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Camera, GeometryError, TriMesh, ViewSample

VERSION = 1
DEPTH_MAGIC = b"ATDP"
UV_MAGIC = b"ATUV"
TENSOR_MAGIC = b"ATTC"
_PLANE_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte (or line) position, ``field`` what was read."""

    def __init__(self, path, offset, field_name, message):
        self.path, self.offset, self.field = str(path), offset, field_name
        super().__init__(f"{path}: at {offset} ({field_name}): {message}")


def read_png(path):
    """(H, W, 3) float32 image in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def to_uint8(image):
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def write_png(path, image):
    Image.fromarray(to_uint8(image), mode="RGB").save(path)


def _read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


def _read_plane_header(path, buf, magic):
    if len(buf) < _PLANE_HEADER.size:
        raise FormatError(path, len(buf), "header", "file shorter than the 16-byte header")
    got, version, width, height = _PLANE_HEADER.unpack_from(buf)
    if got != magic:
        raise FormatError(path, 0, "magic", f"expected {magic!r}, found {got!r}")
    if version != VERSION:
        raise FormatError(path, 4, "version", f"unsupported version {version}")
    return width, height


def write_depth(path, depth):
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(_PLANE_HEADER.pack(DEPTH_MAGIC, VERSION, w, h))
        f.write(depth.tobytes())


def read_depth(path):
    buf = _read_bytes(path)
    w, h = _read_plane_header(path, buf, DEPTH_MAGIC)
    need = _PLANE_HEADER.size + 4 * w * h
    if len(buf) != need:
        raise FormatError(path, len(buf), "payload", f"expected {need} bytes for {w}x{h} depth")
    return np.frombuffer(buf, dtype="<f4", offset=_PLANE_HEADER.size).reshape(h, w).astype(np.float32)


def write_uv(path, uv_map, valid):
    uv = np.asarray(uv_map, dtype="<f4")
    h, w, _ = uv.shape
    with open(path, "wb") as f:
        f.write(_PLANE_HEADER.pack(UV_MAGIC, VERSION, w, h))
        f.write(uv.tobytes())
        f.write(np.asarray(valid, dtype=np.uint8).tobytes())


def read_uv(path):
    """Returns ``(uv_map, valid)`` with shapes (H, W, 2) and (H, W)."""
    buf = _read_bytes(path)
    w, h = _read_plane_header(path, buf, UV_MAGIC)
    off = _PLANE_HEADER.size
    need = off + 8 * w * h + w * h
    if len(buf) != need:
        field_name = "uv plane" if len(buf) < off + 8 * w * h else "validity plane"
        raise FormatError(path, len(buf), field_name, f"expected {need} bytes for {w}x{h} uv cache")
    uv = np.frombuffer(buf, dtype="<f4", count=2 * w * h, offset=off).reshape(h, w, 2).astype(np.float32)
    valid_raw = np.frombuffer(buf, dtype=np.uint8, offset=off + 8 * w * h)
    if valid_raw.max(initial=0) > 1:
        bad = int(np.argmax(valid_raw > 1))
        raise FormatError(path, off + 8 * w * h + bad, "validity plane", "validity bytes must be 0 or 1")
    return uv, valid_raw.reshape(h, w).astype(bool)


def write_tensors(path, tensors):
    """Write a name -> array mapping as float32 payloads."""
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", TENSOR_MAGIC, VERSION, len(tensors), 0))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def read_tensors(path):
    buf = _read_bytes(path)

    def take(fmt, pos, field_name):
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise FormatError(path, pos, field_name, "unexpected end of file")
        return struct.unpack_from(fmt, buf, pos), pos + size

    (magic, version, count, _), pos = take("<4sIII", 0, "header")
    if magic != TENSOR_MAGIC:
        raise FormatError(path, 0, "magic", f"expected {TENSOR_MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise FormatError(path, 4, "version", f"unsupported version {version}")
    out = {}
    for k in range(count):
        (nlen,), pos = take("<I", pos, f"tensor {k} name length")
        if pos + nlen > len(buf):
            raise FormatError(path, pos, f"tensor {k} name", "unexpected end of file")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,), pos = take("<I", pos, f"{name} rank")
        dims, pos = take(f"<{rank}I", pos, f"{name} dims")
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise FormatError(path, pos, f"{name} payload", f"needs {nbytes} bytes, {len(buf) - pos} left")
        out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
        pos += nbytes
    if pos != len(buf):
        raise FormatError(path, pos, "trailer", f"{len(buf) - pos} unexpected trailing bytes")
    return out


def write_camera(path, camera):
    with open(path, "w") as f:
        json.dump(camera.to_dict(), f, indent=2)


def read_camera(path):
    with open(path) as f:
        data = json.load(f)
    try:
        return Camera.from_dict(data)
    except (GeometryError, TypeError, ValueError) as e:
        raise GeometryError(f"{path}: {e}") from e


def write_obj(path, mesh):
    with open(path, "w") as f:
        for p in mesh.positions:
            f.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        if mesh.uvs is not None:
            for t in mesh.uvs:
                f.write(f"vt {t[0]:.9g} {t[1]:.9g}\n")
        normals = mesh.normals
        if normals is not None:
            for n in normals:
                f.write(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}\n")
        for face in mesh.faces + 1:
            if mesh.uvs is not None and normals is not None:
                f.write("f " + " ".join(f"{i}/{i}/{i}" for i in face) + "\n")
            elif mesh.uvs is not None:
                f.write("f " + " ".join(f"{i}/{i}" for i in face) + "\n")
            elif normals is not None:
                f.write("f " + " ".join(f"{i}//{i}" for i in face) + "\n")
            else:
                f.write("f " + " ".join(str(i) for i in face) + "\n")


def read_obj(path):
    """Read the v/vt/vn/f subset of OBJ into a per-vertex :class:`TriMesh`.

    Corners that pair one position with different uvs become separate
    vertices. Polygons are fan-triangulated. Normals from the file are kept
    when every corner references one.
    """
    pos, tex, nrm = [], [], []
    corners = {}
    out_pos, out_uv, out_nrm, faces = [], [], [], []

    def resolve(idx, count, lineno, kind):
        i = int(idx)
        i = i - 1 if i > 0 else count + i
        if i < 0 or i >= count:
            raise FormatError(path, f"line {lineno}", f"face {kind} index", f"index {idx} out of range 1..{count}")
        return i

    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    pos.append([float(x) for x in parts[1:4]])
                elif parts[0] == "vt":
                    tex.append([float(x) for x in parts[1:3]])
                elif parts[0] == "vn":
                    nrm.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    ids = []
                    for tok in parts[1:]:
                        bits = tok.split("/") + ["", ""]
                        key = (resolve(bits[0], len(pos), lineno, "position"),
                               resolve(bits[1], len(tex), lineno, "uv") if bits[1] else -1,
                               resolve(bits[2], len(nrm), lineno, "normal") if bits[2] else -1)
                        if key not in corners:
                            corners[key] = len(out_pos)
                            out_pos.append(pos[key[0]])
                            out_uv.append(tex[key[1]] if key[1] >= 0 else None)
                            out_nrm.append(nrm[key[2]] if key[2] >= 0 else None)
                        ids.append(corners[key])
                    if len(ids) < 3:
                        raise FormatError(path, f"line {lineno}", "face", "face needs at least 3 corners")
                    faces += [(ids[0], ids[k], ids[k + 1]) for k in range(1, len(ids) - 1)]
            except (ValueError, IndexError) as e:
                if isinstance(e, FormatError):
                    raise
                raise FormatError(path, f"line {lineno}", parts[0], str(e)) from e
    if sorted(k[0] for k in corners) == list(range(len(pos))):
        # no seams: keep the file's vertex order
        perm = np.empty(len(pos), dtype=np.int64)
        for key, idx in corners.items():
            perm[idx] = key[0]
        inv = np.argsort(perm)
        out_pos, out_uv, out_nrm = ([seq[i] for i in inv] for seq in (out_pos, out_uv, out_nrm))
        faces = [tuple(int(perm[i]) for i in f) for f in faces]
    uvs = np.array(out_uv, dtype=np.float64) if out_uv and all(u is not None for u in out_uv) else None
    normals = None
    if out_nrm and all(n is not None for n in out_nrm):
        normals = np.array(out_nrm, dtype=np.float64)
        normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-300)
    return TriMesh(np.array(out_pos, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int64).reshape(-1, 3), uvs, normals)


@dataclass
class DatasetManifest:
    """Contents of ``meta.json``; paths are relative to the dataset directory."""

    kind: str
    view_count: int
    image_width: int
    image_height: int
    texture_size: int
    theta_z: float = 0.1
    seed: int = 0
    perturbation: dict = field(default_factory=dict)
    views: list = field(default_factory=list)
    offsets: list = None
    ground_truth: dict = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise FormatError("meta.json", "root", "keys", f"unknown fields {sorted(unknown)}")
        return cls(**d)


def write_manifest(root, manifest):
    with open(Path(root) / "meta.json", "w") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)


def read_manifest(root):
    path = Path(root) / "meta.json"
    if not path.exists():
        raise FormatError(path, 0, "meta.json", "dataset manifest not found")
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(path, e.pos, "json", e.msg) from e
    return DatasetManifest.from_dict(data)


def _view_paths(i):
    stem = f"views/{i:04d}"
    return {"color": f"{stem}.color.png", "depth": f"{stem}.depth.f32",
            "uv": f"{stem}.uv.f32", "camera": f"{stem}.camera.json"}


def save_2d_dataset(root, observations, ground_truth=None, seed=0, extra=None):
    """Write ``[(image, (dx, dy)), ...]`` as a 2D dataset directory."""
    root = Path(root)
    (root / "views").mkdir(parents=True, exist_ok=True)
    views = []
    for i, (img, _) in enumerate(observations):
        rel = f"views/{i:04d}.color.png"
        write_png(root / rel, img)
        views.append({"color": rel})
    h, w = observations[0][0].shape[:2]
    gt = None
    if ground_truth is not None:
        (root / "ground_truth").mkdir(exist_ok=True)
        write_png(root / "ground_truth/image.png", ground_truth)
        gt = {"image": "ground_truth/image.png"}
    manifest = DatasetManifest("2d", len(observations), w, h, max(w, h), seed=seed, views=views,
                               offsets=[list(o) for _, o in observations], ground_truth=gt, extra=extra or {})
    write_manifest(root, manifest)
    return manifest


def save_3d_dataset(root, scan, texture_size, theta_z=0.1, seed=0, extra=None):
    """Write a :class:`~advtex.synth.SyntheticScan` (or anything with ``views``)."""
    root = Path(root)
    (root / "views").mkdir(parents=True, exist_ok=True)
    views = []
    for i, v in enumerate(scan.views):
        paths = _view_paths(i)
        write_png(root / paths["color"], v.color)
        write_depth(root / paths["depth"], v.depth)
        write_uv(root / paths["uv"], v.uv_map, v.foreground if v.uv_valid is None else v.uv_valid)
        write_camera(root / paths["camera"], v.camera)
        views.append(paths)
    gt = None
    if getattr(scan, "texture", None) is not None:
        (root / "ground_truth").mkdir(exist_ok=True)
        write_png(root / "ground_truth/texture.png", scan.texture)
        with open(root / "ground_truth/cameras.json", "w") as f:
            json.dump([c.to_dict() for c in scan.true_cameras], f)
        write_obj(root / "ground_truth/mesh.obj", scan.true_mesh)
        write_obj(root / "ground_truth/observed_mesh.obj", scan.observed_mesh)
        gt = {"texture": "ground_truth/texture.png", "cameras": "ground_truth/cameras.json",
              "mesh": "ground_truth/mesh.obj", "observed_mesh": "ground_truth/observed_mesh.obj"}
    h, w = scan.views[0].shape
    spec = getattr(scan, "spec", None)
    manifest = DatasetManifest("3d", len(scan.views), w, h, int(texture_size), float(theta_z), int(seed),
                               spec.to_dict() if spec is not None else {}, views, None, gt, extra or {})
    write_manifest(root, manifest)
    return manifest


@dataclass
class LoadedDataset:
    manifest: DatasetManifest
    views: list
    root: Path

    @property
    def kind(self):
        return self.manifest.kind


def load_dataset(root):
    """Read a dataset directory without modifying it.

    2D datasets yield (H, W, 3) images; 3D datasets yield :class:`ViewSample`.
    """
    root = Path(root)
    manifest = read_manifest(root)
    if manifest.kind not in ("2d", "3d"):
        raise FormatError(root / "meta.json", "kind", "kind", f"unknown dataset kind {manifest.kind!r}")
    if len(manifest.views) != manifest.view_count:
        raise FormatError(root / "meta.json", "views", "view_count",
                          f"declares {manifest.view_count} views, lists {len(manifest.views)}")
    size = (manifest.image_height, manifest.image_width)
    views = []
    for i, entry in enumerate(manifest.views):
        for rel in entry.values():
            if not (root / rel).exists():
                raise FormatError(root / rel, 0, "file", f"view {i} file missing")
        color = read_png(root / entry["color"])
        if color.shape[:2] != size:
            raise FormatError(root / entry["color"], 0, "dimensions", f"expected {size}, got {color.shape[:2]}")
        if manifest.kind == "2d":
            views.append(color)
            continue
        depth = read_depth(root / entry["depth"])
        uv, valid = read_uv(root / entry["uv"])
        cam = read_camera(root / entry["camera"])
        if depth.shape != size or uv.shape[:2] != size:
            raise FormatError(root / entry["depth"], 0, "dimensions", f"view {i} planes are not {size}")
        views.append(ViewSample(color, depth, valid & (depth > 0), cam, uv, valid))
    return LoadedDataset(manifest, views, root)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
