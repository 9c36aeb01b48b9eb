"""Procedural watertight test meshes: sphere, cube, capsule, dumbbell.

Acceptance and smoke runs need no external data; every fixture is a
closed genus-zero triangle mesh generated on demand.
"""

from __future__ import annotations

import numpy as np

from .geometry import TriMesh, uv_sphere

SPHERE_RADIUS = 0.35
CUBE_HALF_EXTENT = 0.35
CAPSULE_RADIUS = 0.2
CAPSULE_HEIGHT = 0.4
DUMBBELL_LOBE_RADIUS = 0.2
DUMBBELL_LOBE_OFFSET = 0.16


def revolve(profile, z_lo: float, z_hi: float, n_seg: int, n_lon: int) -> TriMesh:
    """Closed surface of revolution around z with single-vertex poles.

    ``profile(z)`` must be positive strictly between z_lo and z_hi and
    reach zero at both ends.
    """
    verts = [(0.0, 0.0, z_hi)]
    for i in range(1, n_seg):
        z = z_hi + (z_lo - z_hi) * i / n_seg
        s = profile(z)
        if s <= 0.0:
            raise ValueError(f"profile not positive at z={z}")
        for j in range(n_lon):
            phi = 2.0 * np.pi * j / n_lon
            verts.append((s * np.cos(phi), s * np.sin(phi), z))
    verts.append((0.0, 0.0, z_lo))
    south = len(verts) - 1

    def ring(i, j):
        return 1 + (i - 1) * n_lon + (j % n_lon)

    faces = []
    for j in range(n_lon):
        faces.append((0, ring(1, j), ring(1, j + 1)))
    for i in range(1, n_seg - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append((a, c, d))
            faces.append((a, d, b))
    for j in range(n_lon):
        faces.append((south, ring(n_seg - 1, j + 1), ring(n_seg - 1, j)))
    return TriMesh(np.asarray(verts), np.asarray(faces))


def sphere(radius: float = SPHERE_RADIUS, n_lat: int = 48, n_lon: int = 48) -> TriMesh:
    return uv_sphere(n_lat, n_lon, radius).mesh


def cube(half_extent: float = CUBE_HALF_EXTENT, center=(0.0, 0.0, 0.0)) -> TriMesh:
    c = np.asarray(center, dtype=np.float64)
    corners = np.array(
        [[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)],
        dtype=np.float64,
    )
    verts = corners * half_extent + c
    # 12 triangles, outward-facing
    faces = np.array([
        [0, 1, 3], [0, 3, 2],  # x = -1
        [4, 6, 7], [4, 7, 5],  # x = +1
        [0, 4, 5], [0, 5, 1],  # y = -1
        [2, 3, 7], [2, 7, 6],  # y = +1
        [0, 2, 6], [0, 6, 4],  # z = -1
        [1, 5, 7], [1, 7, 3],  # z = +1
    ])
    return TriMesh(verts, faces)


def capsule(
    radius: float = CAPSULE_RADIUS,
    height: float = CAPSULE_HEIGHT,
    n_seg: int = 48,
    n_lon: int = 32,
) -> TriMesh:
    h = height / 2.0

    def profile(z):
        if abs(z) <= h:
            return radius
        return float(np.sqrt(max(0.0, radius**2 - (abs(z) - h) ** 2)))

    return revolve(profile, -(h + radius), h + radius, n_seg, n_lon)


def dumbbell(
    lobe_radius: float = DUMBBELL_LOBE_RADIUS,
    lobe_offset: float = DUMBBELL_LOBE_OFFSET,
    n_seg: int = 64,
    n_lon: int = 32,
) -> TriMesh:
    """Union of two overlapping equal spheres centered at z = +-lobe_offset."""
    if lobe_offset >= lobe_radius:
        raise ValueError("lobes must overlap: offset < radius")

    def profile(z):
        return float(np.sqrt(max(0.0, lobe_radius**2 - (abs(z) - lobe_offset) ** 2)))

    extent = lobe_offset + lobe_radius
    return revolve(profile, -extent, extent, n_seg, n_lon)


FIXTURES = {
    "sphere": sphere,
    "cube": cube,
    "capsule": capsule,
    "dumbbell": dumbbell,
}


def make_fixture(name: str) -> TriMesh:
    try:
        return FIXTURES[name]()
    except KeyError:
        raise ValueError(f"unknown fixture '{name}', have {sorted(FIXTURES)}") from None
