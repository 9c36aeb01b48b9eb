"""Evaluation metrics: volumetric IoU, Chamfer-L1, and the fit report.

The metric Chamfer uses unsquared nearest distances, unlike the squared
training loss.  Prediction-side points are sampled area-uniformly from
the extracted primitive meshes restricted to retained faces.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    CUBE_HALF,
    MeshQuery,
    TriMesh,
    sample_sphere,
    sample_surface,
    uv_sphere,
)
from .homeo import SURFACE_EPS, ConditionalHomeomorphism

CSV_COLUMNS = ["mesh", "M", "iou", "chamfer_l1", "multi_containment"]


class MetricError(RuntimeError):
    pass


@dataclass
class EvalReport:
    mesh: str
    primitives: int
    iou: float
    chamfer_l1: float
    retention: list[float] = field(default_factory=list)
    multi_containment: float = 0.0
    retained_area: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mesh": self.mesh,
            "primitives": self.primitives,
            "iou": self.iou,
            "chamfer_l1": self.chamfer_l1,
            "retention": self.retention,
            "multi_containment": self.multi_containment,
            "retained_area": self.retained_area,
        }

    def csv_row(self) -> list:
        return [self.mesh, self.primitives, self.iou, self.chamfer_l1, self.multi_containment]


def monte_carlo_iou(inside_a, inside_b, n: int, rng: np.random.Generator) -> float:
    """IoU of two membership predicates over the sampling cube.

    Each predicate maps an (N, 3) array to an (N,) bool array.
    """
    points = rng.uniform(-CUBE_HALF, CUBE_HALF, size=(n, 3))
    a = np.asarray(inside_a(points), dtype=bool)
    b = np.asarray(inside_b(points), dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        raise MetricError("IoU undefined: both shapes empty over the sampling cube")
    return np.count_nonzero(a & b) / union


def chamfer_l1(x: np.ndarray, y: np.ndarray) -> float:
    """Symmetric mean nearest L2 distance (unsquared), both directions summed."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(y, dtype=np.float64).reshape(-1, 3)
    if len(x) == 0 or len(y) == 0:
        raise MetricError("chamfer_l1 needs two non-empty point sets")
    d_xy, _ = cKDTree(y).query(x)
    d_yx, _ = cKDTree(x).query(y)
    return float(d_xy.mean() + d_yx.mean())


def retained_face_mask(model: ConditionalHomeomorphism, mesh: TriMesh, prim: int) -> np.ndarray:
    """Per-face union filter for one primitive's extracted mesh.

    A face survives iff its centroid is not interior to any *other*
    primitive.  The face's own field is excluded: a centroid sits inside
    its own primitive by the chordal sag of the tessellation, which is
    orders of magnitude larger than the filter slack.
    """
    a, b, c = mesh.face_corners()
    centroids = (a + b + c) / 3.0
    g = model.g_all_values(centroids)
    others = np.delete(g, prim, axis=1)
    if others.shape[1] == 0:
        return np.ones(len(mesh.faces), dtype=bool)
    return others.min(axis=1) >= -SURFACE_EPS


def extract_primitive_meshes(
    model: ConditionalHomeomorphism, n_lat: int, n_lon: int
) -> list[TriMesh]:
    tess = uv_sphere(n_lat, n_lon, model.spec.radius)
    return [model.primitive_mesh(m, tess) for m in range(model.spec.primitives)]


def sample_prediction_surface(
    model: ConditionalHomeomorphism,
    n: int,
    rng: np.random.Generator,
    n_lat: int = 48,
    n_lon: int = 48,
) -> np.ndarray:
    """Area-uniform samples over the retained faces of all primitive meshes."""
    meshes = extract_primitive_meshes(model, n_lat, n_lon)
    verts, faces = [], []
    offset = 0
    for prim, mesh in enumerate(meshes):
        keep = retained_face_mask(model, mesh, prim)
        if keep.any():
            verts.append(mesh.vertices)
            faces.append(mesh.faces[keep] + offset)
            offset += len(mesh.vertices)
    if not faces:
        raise MetricError("no retained faces: every primitive surface is interior")
    union = TriMesh(np.concatenate(verts), np.concatenate(faces))
    return sample_surface(union, n, rng).points


def evaluate(
    model: ConditionalHomeomorphism,
    mesh: TriMesh,
    mesh_name: str = "mesh",
    n_iou: int = 100000,
    n_chamfer: int = 10000,
    n_lat: int = 48,
    n_lon: int = 48,
    n_retention: int = 1000,
    seed: int = 0,
) -> EvalReport:
    """Full fit report against a normalized watertight target mesh."""
    rng = np.random.default_rng(seed)
    query = MeshQuery(mesh)

    cube_points = rng.uniform(-CUBE_HALF, CUBE_HALF, size=(n_iou, 3))
    inside_target = query.contains(cube_points, rng)
    g_values = model.g_all_values(cube_points)
    inside_pred = (g_values < 0.0).any(axis=1)
    union = np.count_nonzero(inside_target | inside_pred)
    if union == 0:
        raise MetricError("IoU undefined: target and prediction both empty")
    iou = np.count_nonzero(inside_target & inside_pred) / union

    n_target_inside = np.count_nonzero(inside_target)
    if n_target_inside:
        multi = (g_values[inside_target] < 0.0).sum(axis=1) >= 2
        multi_containment = float(np.count_nonzero(multi) / n_target_inside)
    else:
        multi_containment = 0.0

    target_points = sample_surface(mesh, n_chamfer, rng).points
    pred_points = sample_prediction_surface(model, n_chamfer, rng, n_lat, n_lon)
    chamfer = chamfer_l1(target_points, pred_points)

    retention = []
    retained_area = []
    for m in range(model.spec.primitives):
        sphere_pts = sample_sphere(n_retention, model.spec.radius, rng)
        surf = model.surface_points(m, sphere_pts).value
        retention.append(
            float(np.mean(model.union_G_values(surf) >= -SURFACE_EPS))
        )
    for prim, pm in enumerate(extract_primitive_meshes(model, n_lat, n_lon)):
        keep = retained_face_mask(model, pm, prim)
        retained_area.append(float(pm.face_areas()[keep].sum()))

    return EvalReport(
        mesh=mesh_name,
        primitives=model.spec.primitives,
        iou=float(iou),
        chamfer_l1=float(chamfer),
        retention=retention,
        multi_containment=multi_containment,
        retained_area=retained_area,
    )


def append_csv(path, report: EvalReport):
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(CSV_COLUMNS)
        writer.writerow(report.csv_row())
