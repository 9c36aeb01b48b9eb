"""Triangle mesh I/O, normalization, sampling, and point containment.

Everything the losses consume as supervision comes from here: surface
point/normal samples, balanced occupancy pairs with importance weights,
sphere samples, and the UV sphere tessellation used for mesh extraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import serialization

CUBE_HALF = 0.5          # sampling cube is [-0.5, 0.5]^3
NORMALIZED_EXTENT = 0.9  # max bbox extent after normalize_mesh


class MeshError(ValueError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray  # (N, 3) float64
    faces: np.ndarray     # (F, 3) int, 0-based

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.intp).reshape(-1, 3)

    def face_corners(self):
        v = self.vertices
        return v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]

    def face_areas(self) -> np.ndarray:
        a, b, c = self.face_corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def face_normals(self) -> np.ndarray:
        a, b, c = self.face_corners()
        n = np.cross(b - a, c - a)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def euler_characteristic(self) -> int:
        edges = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        n_edges = len(np.unique(edges, axis=0))
        return len(self.vertices) - n_edges + len(self.faces)


@dataclass
class SurfaceSamples:
    points: np.ndarray   # (N, 3)
    normals: np.ndarray  # (N, 3), unit length


@dataclass
class OccupancyPool:
    """Precomputed labeled cube samples; batches are drawn label-balanced."""

    points: np.ndarray  # (P, 3)
    labels: np.ndarray  # (P,) bool, True = inside

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=bool)
        self._inside_idx = np.flatnonzero(self.labels)
        self._outside_idx = np.flatnonzero(~self.labels)

    @property
    def size(self) -> int:
        return len(self.points)

    def weight(self, inside: bool) -> float:
        n = len(self._inside_idx) if inside else len(self._outside_idx)
        return 2.0 * n / self.size

    def draw(self, n: int, rng: np.random.Generator) -> "OccupancyBatch":
        """Balanced batch: n/2 inside, n/2 outside, importance-weighted."""
        n_in = n // 2
        n_out = n - n_in
        idx = np.concatenate([
            rng.choice(self._inside_idx, size=n_in, replace=True),
            rng.choice(self._outside_idx, size=n_out, replace=True),
        ])
        labels = self.labels[idx]
        weights = np.where(labels, self.weight(True), self.weight(False))
        return OccupancyBatch(self.points[idx], labels, weights)

    def save(self, path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        serialization.save_tensors(
            path / "manifest.json",
            path / "data.bin",
            {"points": self.points, "labels": self.labels.astype(np.float64)},
            extra={"kind": "occupancy-pool", "pool_size": self.size},
        )

    @classmethod
    def load(cls, path) -> "OccupancyPool":
        tensors, extra = serialization.load_tensors(Path(path) / "manifest.json")
        if extra.get("kind") != "occupancy-pool":
            raise serialization.SerializationError(f"{path} is not an occupancy pool")
        return cls(tensors["points"], tensors["labels"] > 0.5)


@dataclass
class OccupancyBatch:
    points: np.ndarray
    labels: np.ndarray
    weights: np.ndarray


@dataclass
class SphereTessellation:
    mesh: TriMesh
    radius: float
    n_lat: int
    n_lon: int


# ---------------------------------------------------------------------------
# OBJ I/O

def load_mesh(path) -> TriMesh:
    """Read the OBJ subset: `v x y z` and `f i j k ...` (1-based, fan-triangulated)."""
    path = Path(path)
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    try:
        text = path.read_text()
    except OSError as e:
        raise MeshError(f"cannot read mesh file {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            if len(parts) < 4:
                raise MeshError(f"{path}:{lineno}: malformed vertex record")
            vertices.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            if len(idx) < 3:
                raise MeshError(f"{path}:{lineno}: face with fewer than 3 vertices")
            idx = [i - 1 if i > 0 else len(vertices) + i for i in idx]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    if not vertices or not faces:
        raise MeshError(f"{path}: empty mesh")
    verts = np.asarray(vertices, dtype=np.float64)
    face_arr = np.asarray(faces, dtype=np.intp)
    if face_arr.min() < 0 or face_arr.max() >= len(verts):
        raise MeshError(f"{path}: face index out of range (have {len(verts)} vertices)")
    mesh = TriMesh(verts, face_arr)
    areas = mesh.face_areas()
    keep = areas > 1e-14
    if not keep.all():
        mesh = TriMesh(verts, face_arr[keep])
    if len(mesh.faces) == 0:
        raise MeshError(f"{path}: all faces degenerate")
    return mesh


def save_mesh(path, mesh: TriMesh):
    lines = [f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}" for v in mesh.vertices]
    lines += [f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}" for f in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# normalization

@dataclass
class NormalizeTransform:
    """x_normalized = (x - center) * scale."""

    center: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (points - self.center) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return points / self.scale + self.center

    def to_dict(self) -> dict:
        return {"center": list(self.center), "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizeTransform":
        return cls(np.asarray(d["center"], dtype=np.float64), float(d["scale"]))


def normalize_mesh(mesh: TriMesh) -> tuple[TriMesh, NormalizeTransform]:
    """Uniformly scale + translate so the bbox is origin-centered with max extent 0.9."""
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    extent = (hi - lo).max()
    if extent <= 0.0:
        raise MeshError("mesh has zero extent")
    transform = NormalizeTransform(center=(lo + hi) / 2.0, scale=NORMALIZED_EXTENT / extent)
    return TriMesh(transform.apply(mesh.vertices), mesh.faces.copy()), transform


# ---------------------------------------------------------------------------
# watertightness

def boundary_edge_count(mesh: TriMesh) -> int:
    """Number of edges not shared by exactly two faces."""
    edges = np.sort(mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return int(np.count_nonzero(counts != 2))


def require_watertight(mesh: TriMesh):
    bad = boundary_edge_count(mesh)
    if bad:
        raise MeshError(f"mesh is not watertight: {bad} edges not shared by exactly 2 faces")


# ---------------------------------------------------------------------------
# sampling

def sample_surface(mesh: TriMesh, n: int, rng: np.random.Generator) -> SurfaceSamples:
    """Area-weighted face choice, uniform barycentric point, face normal."""
    if n < 1:
        raise ValueError("need n >= 1 surface samples")
    areas = mesh.face_areas()
    face_idx = rng.choice(len(mesh.faces), size=n, p=areas / areas.sum())
    a, b, c = mesh.face_corners()
    a, b, c = a[face_idx], b[face_idx], c[face_idx]
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    points = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    normals = mesh.face_normals()[face_idx]
    return SurfaceSamples(points, normals)


def sample_sphere(n: int, r: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform points on the radius-r sphere via normalized isotropic Gaussians."""
    if n < 1:
        raise ValueError("need n >= 1 sphere samples")
    pts = rng.standard_normal((n, 3))
    norms = np.linalg.norm(pts, axis=1)
    while np.any(norms < 1e-12):
        bad = norms < 1e-12
        pts[bad] = rng.standard_normal((int(bad.sum()), 3))
        norms = np.linalg.norm(pts, axis=1)
    return pts * (r / norms)[:, None]


def uv_sphere(n_lat: int, n_lon: int, r: float) -> SphereTessellation:
    """Closed UV sphere: single-vertex poles with fans, quad belts split in two."""
    if n_lat < 3 or n_lon < 3:
        raise ValueError("uv_sphere needs n_lat >= 3 and n_lon >= 3")
    verts = [(0.0, 0.0, r)]
    for i in range(1, n_lat):
        theta = np.pi * i / n_lat
        for j in range(n_lon):
            phi = 2.0 * np.pi * j / n_lon
            verts.append((
                r * np.sin(theta) * np.cos(phi),
                r * np.sin(theta) * np.sin(phi),
                r * np.cos(theta),
            ))
    verts.append((0.0, 0.0, -r))
    south = len(verts) - 1

    def ring(i, j):
        return 1 + (i - 1) * n_lon + (j % n_lon)

    faces = []
    for j in range(n_lon):
        faces.append((0, ring(1, j), ring(1, j + 1)))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append((a, c, d))
            faces.append((a, d, b))
    for j in range(n_lon):
        faces.append((south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)))
    mesh = TriMesh(np.asarray(verts), np.asarray(faces))
    return SphereTessellation(mesh, r, n_lat, n_lon)


# ---------------------------------------------------------------------------
# point containment

_EPS_HIT = 1e-9


class MeshQuery:
    """Ray-parity point containment for a validated watertight mesh.

    Each query casts 3 rays in independent random directions and takes the
    majority parity; rays passing within 1e-9 of an edge, vertex, or the
    query point itself are re-drawn.
    """

    def __init__(self, mesh: TriMesh):
        require_watertight(mesh)
        self.mesh = mesh
        v0, v1, v2 = mesh.face_corners()
        self._v0 = v0
        self._e1 = v1 - v0
        self._e2 = v2 - v0

    def contains(self, points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        votes = np.zeros(len(points), dtype=np.intp)
        for _ in range(3):
            votes += self._parity(points, rng)
        return votes >= 2

    def _parity(self, points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        result = np.zeros(len(points), dtype=np.intp)
        pending = np.arange(len(points))
        while pending.size:
            d = rng.standard_normal(3)
            norm = np.linalg.norm(d)
            if norm < 1e-12:
                continue
            d /= norm
            parity, degenerate = self._parity_direction(points[pending], d)
            ok = ~degenerate
            result[pending[ok]] = parity[ok]
            pending = pending[degenerate]
        return result

    def _parity_direction(self, points, d):
        """Crossing parity of all points along one shared direction.

        Faces are binned on the plane orthogonal to d; a ray projects to a
        single point there, so its cell's bin holds every candidate face.
        """
        n = len(points)
        parity = np.zeros(n, dtype=np.intp)
        degenerate = np.zeros(n, dtype=bool)

        # orthonormal basis of the projection plane
        ref = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = np.cross(d, ref)
        u /= np.linalg.norm(u)
        v = np.cross(d, u)

        h = np.cross(d, self._e2)
        a = np.einsum("ij,ij->i", self._e1, h)
        parallel = np.abs(a) < 1e-12

        corners = np.stack(self.mesh.face_corners())          # (3, F, 3)
        pu = corners @ u                                       # (3, F)
        pv = corners @ v
        fu_lo, fu_hi = pu.min(axis=0), pu.max(axis=0)
        fv_lo, fv_hi = pv.min(axis=0), pv.max(axis=0)
        qu = points @ u
        qv = points @ v

        ng = max(1, min(64, int(np.sqrt(len(self._v0)))))
        lo_u, hi_u = fu_lo.min(), fu_hi.max()
        lo_v, hi_v = fv_lo.min(), fv_hi.max()
        span_u = max(hi_u - lo_u, 1e-12)
        span_v = max(hi_v - lo_v, 1e-12)

        def cell_u(x):
            return np.clip(((x - lo_u) / span_u * ng).astype(np.intp), 0, ng - 1)

        def cell_v(x):
            return np.clip(((x - lo_v) / span_v * ng).astype(np.intp), 0, ng - 1)

        bins: dict[int, list[int]] = {}
        iu0, iu1 = cell_u(fu_lo), cell_u(fu_hi)
        iv0, iv1 = cell_v(fv_lo), cell_v(fv_hi)
        for f in range(len(self._v0)):
            for i in range(iu0[f], iu1[f] + 1):
                base = i * ng
                for j in range(iv0[f], iv1[f] + 1):
                    bins.setdefault(base + j, []).append(f)

        outside = (qu < lo_u) | (qu > hi_u) | (qv < lo_v) | (qv > hi_v)
        cells = cell_u(qu) * ng + cell_v(qv)
        cells[outside] = -1  # ray misses every face bbox: parity 0

        order = np.argsort(cells, kind="stable")
        sorted_cells = cells[order]
        boundaries = np.flatnonzero(np.diff(sorted_cells)) + 1
        groups = np.split(order, boundaries)
        for group in groups:
            cell = cells[group[0]]
            if cell < 0:
                continue
            cand = bins.get(int(cell))
            if not cand:
                continue
            cand = np.asarray(cand, dtype=np.intp)
            if parallel[cand].any():
                degenerate[group] = True
                continue
            p, deg = self._count_crossings(points[group], d, cand)
            parity[group] = p
            degenerate[group] |= deg
        return (parity % 2).astype(np.intp), degenerate

    def _count_crossings(self, pts, d, cand):
        # Moller-Trumbore against the candidate faces, all pairs at once
        v0, e1, e2 = self._v0[cand], self._e1[cand], self._e2[cand]
        h = np.cross(d, e2)
        a = np.einsum("ij,ij->i", e1, h)
        f = 1.0 / a
        s = pts[:, None, :] - v0[None, :, :]                 # (P, C, 3)
        uu = np.einsum("pcj,cj->pc", s, h) * f
        q = np.cross(s, e1[None, :, :])
        vv = np.einsum("pcj,j->pc", q, d) * f
        tt = np.einsum("pcj,cj->pc", q, e2) * f
        w = 1.0 - uu - vv
        near_plane = (
            (tt > -_EPS_HIT)
            & (uu > -_EPS_HIT) & (vv > -_EPS_HIT) & (w > -_EPS_HIT)
        )
        boundary = (
            (np.abs(tt) < _EPS_HIT)
            | (np.abs(uu) < _EPS_HIT)
            | (np.abs(vv) < _EPS_HIT)
            | (np.abs(w) < _EPS_HIT)
        )
        degenerate = (near_plane & boundary).any(axis=1)
        hit = (tt > _EPS_HIT) & (uu > _EPS_HIT) & (vv > _EPS_HIT) & (w > _EPS_HIT)
        return hit.sum(axis=1), degenerate


def point_in_mesh(mesh: TriMesh, point, rng: np.random.Generator) -> bool:
    """One-off containment test; build a MeshQuery for repeated queries."""
    return bool(MeshQuery(mesh).contains(np.asarray(point, dtype=np.float64), rng)[0])


def build_occupancy_set(
    mesh: TriMesh, pool_size: int, rng: np.random.Generator
) -> OccupancyPool:
    """Uniform cube samples labeled by containment in the normalized mesh."""
    points = rng.uniform(-CUBE_HALF, CUBE_HALF, size=(pool_size, 3))
    labels = MeshQuery(mesh).contains(points, rng)
    if not labels.any():
        raise MeshError("mesh has no interior at this resolution")
    return OccupancyPool(points, labels)
