"""The five training loss terms and their weighted sum.

Every function returns a differentiable scalar node; ``loss_total``
assembles the full objective from one training batch and reports the
per-term breakdown for logging.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import OccupancyBatch, SurfaceSamples
from .homeo import ConditionalHomeomorphism


@dataclass
class LossWeights:
    rec: float = 1.0
    occ: float = 0.1
    norm: float = 0.01
    overlap: float = 0.1
    cover: float = 0.01


@dataclass
class LossHyper:
    tau: float = 4e-3        # boundary sharpness of the soft indicator
    lam: float = 1.95        # how many primitives may contain a point
    k_cover: int = 10        # interior points each primitive must cover


@dataclass
class TrainingBatch:
    surface: SurfaceSamples              # target surface points + normals
    occupancy: OccupancyBatch            # labeled, importance-weighted cube samples
    sphere_points: np.ndarray            # (M, K, 3) latent sphere samples
    normal_surface: SurfaceSamples | None = None  # subset used by the normal loss

    @property
    def normals_at(self) -> SurfaceSamples:
        return self.normal_surface if self.normal_surface is not None else self.surface


def loss_rec(target_points: np.ndarray, pred_points: ad.Node) -> ad.Node:
    """Bidirectional Chamfer with squared distances, mean over each side."""
    target_points = np.asarray(target_points, dtype=np.float64).reshape(-1, 3)
    if len(target_points) == 0:
        raise ValueError("reconstruction loss needs target surface points")
    if pred_points.shape[0] == 0:
        raise ValueError("all primitive surface points interior")
    t_sq = (target_points**2).sum(axis=1)
    p_sq = ad.rowsum(ad.mul(pred_points, pred_points))
    cross = ad.matmul(ad.constant(target_points), ad.transpose(pred_points))
    d = ad.add_colvec(ad.add_rowvec(ad.scale(cross, -2.0), p_sq), ad.constant(t_sq))
    to_pred, _ = ad.min_cols(d)
    to_target, _ = ad.min_cols(ad.transpose(d))
    return ad.add(ad.mean(to_pred), ad.mean(to_target))


def loss_occ(G: ad.Node, labels: np.ndarray, weights: np.ndarray, tau: float) -> ad.Node:
    """Importance-weighted cross-entropy between sigma(-G/tau) and the labels.

    Computed in logit form, BCE(sigma(l), o) = softplus(l) - o*l, so deep
    containment never under- or overflows.
    """
    logits = ad.scale(G, -1.0 / tau)
    o = np.asarray(labels, dtype=np.float64)
    per_point = ad.sub(ad.softplus(logits), ad.mul(logits, ad.constant(o)))
    return ad.mean(ad.mul(per_point, ad.constant(np.asarray(weights, dtype=np.float64))))


def loss_norm(grad_G: ad.Node, normals: np.ndarray) -> ad.Node:
    """Mean cosine distance between the field gradient and the target normals."""
    normals = np.asarray(normals, dtype=np.float64)
    mag = ad.clamp_min(ad.sqrt(ad.rowsum(ad.mul(grad_G, grad_G))), 1e-12)
    unit = ad.div_colvec(grad_G, mag)
    cos = ad.rowsum(ad.mul(unit, ad.constant(normals)))
    return ad.add_scalar(ad.neg(ad.mean(cos)), 1.0)


def loss_overlap(g_all: ad.Node, tau: float, lam: float) -> ad.Node:
    """Mean per-point hinge on the soft count of containing primitives."""
    soft = ad.sigmoid(ad.scale(g_all, -1.0 / tau))
    return ad.mean(ad.relu(ad.add_scalar(ad.rowsum(soft), -lam)))


def loss_cover(g_interior: ad.Node, k: int) -> ad.Node:
    """Hinge on each primitive's k nearest interior points.

    Selection is by current field value and is not differentiated through;
    gradients flow via the selected g values only.
    """
    n, m = g_interior.shape
    if n < k:
        raise ValueError(f"coverage loss needs at least k={k} interior points, got {n}")
    total = None
    for col in range(m):
        g_m = ad.as_vec(ad.slice_cols(g_interior, col, col + 1))
        nearest = np.argsort(g_m.value, kind="stable")[:k]
        term = ad.total_sum(ad.relu(ad.gather_rows(g_m, nearest)))
        total = term if total is None else ad.add(total, term)
    return total


def loss_total(
    model: ConditionalHomeomorphism,
    batch: TrainingBatch,
    weights: LossWeights,
    hyper: LossHyper,
) -> tuple[ad.Node, dict[str, float]]:
    """Weighted sum of the five terms plus the per-term breakdown."""
    points, prim_idx = model.all_surface_points(batch.sphere_points)
    retained, _ = model.union_surface(points, prim_idx)
    l_rec = loss_rec(batch.surface.points, retained)

    g_occ = model.g_all(batch.occupancy.points)
    G_occ, _ = ad.min_cols(g_occ)
    l_occ = loss_occ(G_occ, batch.occupancy.labels, batch.occupancy.weights, hyper.tau)
    l_overlap = loss_overlap(g_occ, hyper.tau, hyper.lam)

    interior = np.flatnonzero(batch.occupancy.labels)
    l_cover = loss_cover(ad.gather_rows(g_occ, interior), hyper.k_cover)

    normal_samples = batch.normals_at
    grad_G = model.grad_union_G(normal_samples.points)
    l_norm = loss_norm(grad_G, normal_samples.normals)

    total = ad.scale(l_rec, weights.rec)
    total = ad.add(total, ad.scale(l_occ, weights.occ))
    total = ad.add(total, ad.scale(l_norm, weights.norm))
    total = ad.add(total, ad.scale(l_overlap, weights.overlap))
    total = ad.add(total, ad.scale(l_cover, weights.cover))
    breakdown = {
        "rec": float(l_rec.value),
        "occ": float(l_occ.value),
        "norm": float(l_norm.value),
        "overlap": float(l_overlap.value),
        "cover": float(l_cover.value),
        "total": float(total.value),
    }
    return total, breakdown
