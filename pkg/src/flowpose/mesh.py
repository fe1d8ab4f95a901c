"""Triangle meshes: container, OBJ/PLY ingestion, procedural test shapes,
and surface sampling utilities."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_UNIT_SCALE = {"m": 1.0, "mm": 1e-3}


@dataclass
class Mesh:
    """Vertices in object space (meters) and triangle vertex indices.

    surface_points are optional pre-sampled on-surface points used by the
    pose losses and metrics.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    surface_points: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.shape[0] < 1:
            raise ValueError("mesh must have at least one triangle")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")
        if self.surface_points is not None:
            self.surface_points = np.asarray(self.surface_points, dtype=float).reshape(-1, 3)

    @property
    def diameter(self) -> float:
        """Max pairwise distance over vertices (surface points if present)."""
        pts = self.surface_points if self.surface_points is not None else self.vertices
        # Exact O(n^2) on a subsample; test meshes are small.
        if len(pts) > 2000:
            idx = np.linspace(0, len(pts) - 1, 2000).astype(int)
            pts = pts[idx]
        d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
        return float(np.sqrt(d2.max()))

    def scaled(self, scale: float) -> "Mesh":
        sp = None if self.surface_points is None else self.surface_points * scale
        return Mesh(self.vertices * scale, self.triangles.copy(), sp)


def triangle_areas(mesh: Mesh) -> np.ndarray:
    a, b, c = (mesh.vertices[mesh.triangles[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_surface_points(mesh: Mesh, count: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform sampling of points on the mesh surface."""
    rng = np.random.default_rng(seed)
    areas = triangle_areas(mesh)
    probs = areas / areas.sum()
    tri_idx = rng.choice(len(probs), size=count, p=probs)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    a = mesh.vertices[mesh.triangles[tri_idx, 0]]
    b = mesh.vertices[mesh.triangles[tri_idx, 1]]
    c = mesh.vertices[mesh.triangles[tri_idx, 2]]
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def with_surface_points(mesh: Mesh, count: int = 512, seed: int = 0) -> Mesh:
    return Mesh(mesh.vertices, mesh.triangles, sample_surface_points(mesh, count, seed))


def point_to_surface_distance(mesh: Mesh, points) -> np.ndarray:
    """Distance from each query point to the nearest mesh triangle."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    best = np.full(len(pts), np.inf)
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    for block in range(0, len(pts), 256):
        p = pts[block : block + 256]
        d = _point_triangle_distance(p, a, b, c)
        best[block : block + 256] = d
    return best


def _point_triangle_distance(p, a, b, c) -> np.ndarray:
    """Min distance from points p (P,3) to triangles (T,3) -> (P,).

    Region classification after Ericson, vectorized over the P x T grid.
    """
    ab = b - a
    ac = c - a
    P, T = len(p), len(a)
    ap = p[:, None, :] - a[None, :, :]
    d1 = np.einsum("tk,ptk->pt", ab, ap)
    d2 = np.einsum("tk,ptk->pt", ac, ap)
    bp = p[:, None, :] - b[None, :, :]
    d3 = np.einsum("tk,ptk->pt", ab, bp)
    d4 = np.einsum("tk,ptk->pt", ac, bp)
    cp = p[:, None, :] - c[None, :, :]
    d5 = np.einsum("tk,ptk->pt", ab, cp)
    d6 = np.einsum("tk,ptk->pt", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    denom = np.where(np.abs(denom) < 1e-30, 1e-30, denom)
    v = vb / denom
    w = vc / denom

    # Clamp barycentric coordinates edge by edge.
    v = np.clip(v, 0.0, 1.0)
    w = np.clip(w, 0.0, 1.0)
    # Vertex / edge regions.
    in_a = (d1 <= 0) & (d2 <= 0)
    in_b = (d3 >= 0) & (d4 <= d3)
    in_c = (d6 >= 0) & (d5 <= d6)
    on_ab = (~in_a) & (~in_b) & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    on_ac = (~in_a) & (~in_c) & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    on_bc = (~in_b) & (~in_c) & (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)

    t_ab = np.where(np.abs(d1 - d3) < 1e-30, 0.0, d1 / np.where((d1 - d3) == 0, 1e-30, d1 - d3))
    t_ac = np.where(np.abs(d2 - d6) < 1e-30, 0.0, d2 / np.where((d2 - d6) == 0, 1e-30, d2 - d6))
    den_bc = (d4 - d3) + (d5 - d6)
    t_bc = (d4 - d3) / np.where(den_bc == 0, 1e-30, den_bc)

    v_full = np.where(in_a, 0.0, np.where(in_b, 1.0, np.where(in_c, 0.0, v)))
    w_full = np.where(in_a, 0.0, np.where(in_b, 0.0, np.where(in_c, 1.0, w)))
    v_full = np.where(on_ab, np.clip(t_ab, 0, 1), v_full)
    w_full = np.where(on_ab, 0.0, w_full)
    v_full = np.where(on_ac, 0.0, v_full)
    w_full = np.where(on_ac, np.clip(t_ac, 0, 1), w_full)
    v_full = np.where(on_bc, 1.0 - np.clip(t_bc, 0, 1), v_full)
    w_full = np.where(on_bc, np.clip(t_bc, 0, 1), w_full)

    closest = (
        a[None, :, :]
        + v_full[..., None] * ab[None, :, :]
        + w_full[..., None] * ac[None, :, :]
    )
    dist = np.linalg.norm(p[:, None, :] - closest, axis=-1)
    return dist.min(axis=1)


# ---------------------------------------------------------------------------
# File ingestion
# ---------------------------------------------------------------------------


def load_mesh(path, unit: str = "m") -> Mesh:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        return load_obj(path, unit=unit)
    if path.suffix.lower() == ".ply":
        return load_ply(path, unit=unit)
    raise ValueError(f"unsupported mesh format: {path.suffix}")


def load_obj(path, unit: str = "m") -> Mesh:
    """ASCII OBJ reader: v/f lines only, polygons triangulated fan-wise."""
    scale = _UNIT_SCALE[unit]
    verts: list[list[float]] = []
    tris: list[list[int]] = []
    with open(path, "r") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) * scale for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    tris.append([idx[0], idx[k], idx[k + 1]])
    return Mesh(np.array(verts), np.array(tris))


def save_obj(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def load_ply(path, unit: str = "m") -> Mesh:
    """Binary little-endian PLY with float32 x/y/z vertices and
    uchar-count int32 face index lists."""
    scale = _UNIT_SCALE[unit]
    with open(path, "rb") as fh:
        line = fh.readline().strip()
        if line != b"ply":
            raise ValueError("not a PLY file")
        n_vert = n_face = 0
        fmt = None
        while True:
            line = fh.readline()
            if not line:
                raise ValueError("truncated PLY header")
            tok = line.strip().split()
            if not tok:
                continue
            if tok[0] == b"format":
                fmt = tok[1]
            elif tok[0] == b"element" and tok[1] == b"vertex":
                n_vert = int(tok[2])
            elif tok[0] == b"element" and tok[1] == b"face":
                n_face = int(tok[2])
            elif tok[0] == b"end_header":
                break
        if fmt != b"binary_little_endian":
            raise ValueError("only binary little-endian PLY is supported")
        verts = np.frombuffer(fh.read(12 * n_vert), dtype="<f4").reshape(n_vert, 3)
        tris = []
        for _ in range(n_face):
            (cnt,) = struct.unpack("<B", fh.read(1))
            idx = struct.unpack(f"<{cnt}i", fh.read(4 * cnt))
            for k in range(1, cnt - 1):
                tris.append([idx[0], idx[k], idx[k + 1]])
    return Mesh(verts.astype(float) * scale, np.array(tris))


def save_ply(mesh: Mesh, path) -> None:
    with open(path, "wb") as fh:
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {len(mesh.vertices)}\n"
            "property float x\nproperty float y\nproperty float z\n"
            f"element face {len(mesh.triangles)}\n"
            "property list uchar int vertex_indices\nend_header\n"
        )
        fh.write(header.encode("ascii"))
        fh.write(mesh.vertices.astype("<f4").tobytes())
        for t in mesh.triangles:
            fh.write(struct.pack("<Biii", 3, int(t[0]), int(t[1]), int(t[2])))


# ---------------------------------------------------------------------------
# Procedural shapes used by the synthetic benchmark
# ---------------------------------------------------------------------------


def make_box(extents=(0.1, 0.1, 0.1), center=(0.0, 0.0, 0.0)) -> Mesh:
    ex, ey, ez = (e / 2.0 for e in extents)
    cx, cy, cz = center
    verts = np.array(
        [
            [cx - ex, cy - ey, cz - ez],
            [cx + ex, cy - ey, cz - ez],
            [cx + ex, cy + ey, cz - ez],
            [cx - ex, cy + ey, cz - ez],
            [cx - ex, cy - ey, cz + ez],
            [cx + ex, cy - ey, cz + ez],
            [cx + ex, cy + ey, cz + ez],
            [cx - ex, cy + ey, cz + ez],
        ]
    )
    quads = [
        (0, 1, 2, 3),
        (4, 7, 6, 5),
        (0, 4, 5, 1),
        (1, 5, 6, 2),
        (2, 6, 7, 3),
        (3, 7, 4, 0),
    ]
    tris = []
    for q in quads:
        tris.append([q[0], q[1], q[2]])
        tris.append([q[0], q[2], q[3]])
    return Mesh(verts, np.array(tris))


def make_icosphere(radius: float = 0.1, subdivisions: int = 2) -> Mesh:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=float,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    tris = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}
        new_verts = list(verts)

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = (new_verts[i] + new_verts[j]) / 2.0
                m = m / np.linalg.norm(m)
                cache[key] = len(new_verts)
                new_verts.append(m)
            return cache[key]

        new_tris = []
        for a, b, c in tris:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_tris += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(new_verts)
        tris = np.array(new_tris)
    return Mesh(verts * radius, tris)


def make_plane(size: float = 0.2, z: float = 0.0) -> Mesh:
    """Square quad in the object xy-plane at the given z."""
    h = size / 2.0
    verts = np.array([[-h, -h, z], [h, -h, z], [h, h, z], [-h, h, z]])
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    return Mesh(verts, tris)


def _merge(meshes: list[Mesh]) -> Mesh:
    verts = []
    tris = []
    offset = 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    return Mesh(np.vstack(verts), np.vstack(tris))


def make_widget() -> Mesh:
    """Chiral L-bracket with a fin: asymmetric silhouette from every view.

    Used as the default synthetic benchmark object; roughly 0.14 m across.
    """
    base = make_box((0.12, 0.05, 0.03))
    arm = make_box((0.04, 0.09, 0.03), center=(0.04, 0.045, 0.0))
    post = make_box((0.03, 0.03, 0.07), center=(-0.045, 0.0, 0.04))
    fin_verts = np.array(
        [
            [0.00, -0.025, 0.015],
            [0.06, -0.025, 0.015],
            [0.05, -0.025, 0.055],
            [0.00, -0.005, 0.015],
            [0.06, -0.005, 0.015],
            [0.05, -0.005, 0.055],
        ]
    )
    fin_tris = np.array(
        [
            [0, 1, 2], [3, 5, 4],
            [0, 2, 5], [0, 5, 3],
            [1, 4, 5], [1, 5, 2],
            [0, 3, 4], [0, 4, 1],
        ]
    )
    fin = Mesh(fin_verts, fin_tris)
    return _merge([base, arm, post, fin])
