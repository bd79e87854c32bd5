"""Binary STL ingestion and cell-centre point clouds."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..errors import EmptyMeshError, TruncatedError, UnsupportedFormatError
from .types import PointCloud

HEADER_BYTES = 80
RECORD = np.dtype(
    [("normal", "<f4", (3,)), ("vertices", "<f4", (3, 3)), ("attr", "<u2")]
)
assert RECORD.itemsize == 50


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (T, 3, 3)
    normals: np.ndarray  # (T, 3) as stored in the file
    attributes: np.ndarray  # (T,) u16
    degenerate: np.ndarray  # (T,) bool, zero-area triangles

    def __len__(self):
        return len(self.vertices)


def _looks_ascii(buf: bytes) -> bool:
    if not buf[:5].lower() == b"solid":
        return False
    if len(buf) >= 84:
        (count,) = struct.unpack_from("<I", buf, 80)
        if len(buf) == 84 + 50 * count:
            return False
    try:
        text = buf[:4096].decode("ascii")
    except UnicodeDecodeError:
        return False
    return "facet" in text or len(buf) < 84


def parse_stl(buf: bytes) -> TriangleMesh:
    """Parse a binary STL byte string."""
    if _looks_ascii(buf):
        raise UnsupportedFormatError("ASCII STL is not supported; convert to binary")
    if len(buf) < 84:
        raise TruncatedError(f"STL needs at least 84 bytes, got {len(buf)}")
    (count,) = struct.unpack_from("<I", buf, 80)
    if count == 0:
        raise EmptyMeshError("STL declares 0 triangles")
    need = 84 + 50 * count
    if len(buf) < need:
        raise TruncatedError(f"STL declares {count} triangles ({need} bytes), got {len(buf)}")
    rec = np.frombuffer(buf, dtype=RECORD, count=count, offset=84)
    vertices = rec["vertices"].astype(np.float64)
    cross = np.cross(vertices[:, 1] - vertices[:, 0], vertices[:, 2] - vertices[:, 0])
    return TriangleMesh(
        vertices=vertices,
        normals=rec["normal"].astype(np.float64),
        attributes=rec["attr"].copy(),
        degenerate=np.linalg.norm(cross, axis=1) == 0.0,
    )


def read_stl(path) -> TriangleMesh:
    with open(path, "rb") as fh:
        return parse_stl(fh.read())


def write_stl(path, vertices, normals=None, header: bytes = b"") -> None:
    """Write triangles ``(T, 3, 3)`` as binary STL (float32)."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3, 3)
    rec = np.zeros(len(vertices), dtype=RECORD)
    rec["vertices"] = vertices
    if normals is None:
        cross = np.cross(vertices[:, 1] - vertices[:, 0], vertices[:, 2] - vertices[:, 0])
        norm = np.linalg.norm(cross, axis=1, keepdims=True)
        normals = np.divide(cross, norm, out=np.zeros_like(cross), where=norm > 0)
    rec["normal"] = normals
    with open(path, "wb") as fh:
        fh.write(header[:HEADER_BYTES].ljust(HEADER_BYTES, b"\0"))
        fh.write(struct.pack("<I", len(vertices)))
        fh.write(rec.tobytes())


def mesh_to_pointcloud(mesh: TriangleMesh) -> PointCloud:
    """One point per triangle at its centroid, with unit normal and area.

    Zero-area triangles get area 0 and normal (0, 0, 0) and are flagged.
    """
    if len(mesh) == 0:
        raise EmptyMeshError("mesh has no triangles")
    v = mesh.vertices
    cross = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    norm = np.linalg.norm(cross, axis=1)
    degenerate = norm == 0.0
    normals = np.zeros_like(cross)
    normals[~degenerate] = cross[~degenerate] / norm[~degenerate, None]
    return PointCloud(
        points=v.mean(axis=1),
        normals=normals,
        areas=0.5 * norm,
        degenerate=degenerate,
    )
