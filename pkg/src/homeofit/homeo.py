"""Conditional sphere homeomorphisms built from affine coupling layers.

Each primitive is the image of a radius-r sphere under a stack of coupling
layers conditioned on that primitive's shape embedding.  The same stack run
backwards gives the closed-form inverse, and with it a signed implicit
field per primitive and the min-union field over all of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import SphereTessellation, TriMesh

S_CLAMP = 10.0         # hard tanh thresholds on the log-scale output
SURFACE_EPS = 1e-6     # union filter slack for a point's own primitive
GRAD_FD_STEP = 1e-4    # central-difference step for the field gradient


@dataclass
class HomeoSpec:
    """Architecture hyperparameters for the coupling stack."""

    layers: int = 4
    hidden: int = 256
    embed_dim: int = 512
    p_out: int = 128
    radius: float = 0.25
    primitives: int = 1


def draw_split_schedule(n_layers: int, rng: np.random.Generator) -> list[int]:
    """Random transformed-dimension sequence with no consecutive repeats."""
    schedule: list[int] = []
    while len(schedule) < n_layers:
        d = int(rng.integers(0, 3))
        if schedule and schedule[-1] == d:
            continue
        schedule.append(d)
    return schedule


def _init_linear(store, prefix, fan_in, fan_out, rng, zero=False):
    if zero:
        store.create(f"{prefix}.W", np.zeros((fan_in, fan_out)))
        store.create(f"{prefix}.b", np.zeros(fan_out))
    else:
        a = 1.0 / np.sqrt(fan_in)
        store.create(f"{prefix}.W", rng.uniform(-a, a, size=(fan_in, fan_out)))
        store.create(f"{prefix}.b", np.zeros(fan_out))


class ConditionalHomeomorphism:
    """Coupling-layer stack plus the trainable per-primitive embedding table."""

    def __init__(self, spec: HomeoSpec, schedule: list[int], store: ad.ParameterStore):
        if len(schedule) != spec.layers:
            raise ValueError("split schedule length must match layer count")
        if any(schedule[i] == schedule[i + 1] for i in range(len(schedule) - 1)):
            raise ValueError("consecutive layers must transform different dimensions")
        self.spec = spec
        self.schedule = list(schedule)
        self.store = store

    @classmethod
    def create(
        cls,
        spec: HomeoSpec,
        rng: np.random.Generator,
        schedule: list[int] | None = None,
    ) -> "ConditionalHomeomorphism":
        if schedule is None:
            schedule = draw_split_schedule(spec.layers, rng)
        store = ad.ParameterStore()
        store.create(
            "embeddings",
            rng.standard_normal((spec.primitives, spec.embed_dim)) * 0.01,
        )
        ctx = spec.embed_dim + spec.p_out
        for i in range(spec.layers):
            _init_linear(store, f"layer{i}.p.0", 2, spec.hidden, rng)
            _init_linear(store, f"layer{i}.p.1", spec.hidden, spec.p_out, rng)
            for net in ("s", "t"):
                _init_linear(store, f"layer{i}.{net}.0", ctx, spec.hidden, rng)
                _init_linear(store, f"layer{i}.{net}.1", spec.hidden, spec.hidden, rng)
                # zero final layer: the stack starts as the exact identity
                _init_linear(store, f"layer{i}.{net}.2", spec.hidden, 1, rng, zero=True)
        return cls(spec, schedule, store)

    # -- network pieces ----------------------------------------------------

    def _linear(self, x, prefix):
        return ad.add_rowvec(
            ad.matmul(x, self.store.node(f"{prefix}.W")),
            self.store.node(f"{prefix}.b"),
        )

    def _scale_translate(self, layer: int, passthrough, emb_rows):
        feats = ad.relu(self._linear(passthrough, f"layer{layer}.p.0"))
        feats = self._linear(feats, f"layer{layer}.p.1")
        ctx = ad.concat_cols([emb_rows, feats])
        s = ad.relu(self._linear(ctx, f"layer{layer}.s.0"))
        s = ad.relu(self._linear(s, f"layer{layer}.s.1"))
        s = ad.hardtanh(self._linear(s, f"layer{layer}.s.2"), -S_CLAMP, S_CLAMP)
        t = ad.relu(self._linear(ctx, f"layer{layer}.t.0"))
        t = ad.relu(self._linear(t, f"layer{layer}.t.1"))
        t = self._linear(t, f"layer{layer}.t.2")
        return s, t

    def _coupling(self, points, layer: int, emb_rows, inverse: bool):
        dim = self.schedule[layer]
        keep = [d for d in range(3) if d != dim]
        passthrough = ad.concat_cols(
            [ad.slice_cols(points, d, d + 1) for d in keep]
        )
        s, t = self._scale_translate(layer, passthrough, emb_rows)
        z = ad.slice_cols(points, dim, dim + 1)
        if inverse:
            z = ad.mul(ad.sub(z, t), ad.exp(ad.neg(s)))
        else:
            z = ad.add(ad.mul(z, ad.exp(s)), t)
        cols = [ad.slice_cols(points, d, d + 1) for d in range(3)]
        cols[dim] = z
        return ad.concat_cols(cols)

    def _embedding_rows(self, idx, n: int):
        emb = self.store.node("embeddings")
        idx = np.asarray(idx)
        if idx.ndim == 0:
            idx = np.full(n, int(idx), dtype=np.intp)
        if idx.shape != (n,):
            raise ValueError(f"embedding index shape {idx.shape} != ({n},)")
        return ad.gather_rows(emb, idx)

    # -- point maps ---------------------------------------------------------

    def phi_forward(self, points, prim) -> ad.Node:
        """Map latent (sphere-space) points to primitive space."""
        points = points if isinstance(points, ad.Node) else ad.constant(points)
        emb_rows = self._embedding_rows(prim, points.shape[0])
        for layer in range(self.spec.layers):
            points = self._coupling(points, layer, emb_rows, inverse=False)
        return points

    def phi_inverse(self, points, prim) -> ad.Node:
        points = points if isinstance(points, ad.Node) else ad.constant(points)
        emb_rows = self._embedding_rows(prim, points.shape[0])
        for layer in reversed(range(self.spec.layers)):
            points = self._coupling(points, layer, emb_rows, inverse=True)
        return points

    # -- implicit fields ----------------------------------------------------

    def implicit_g(self, points, prim) -> ad.Node:
        """Signed field of one primitive: |phi_inverse(x)| - r."""
        y = self.phi_inverse(points, prim)
        return ad.add_scalar(ad.sqrt(ad.rowsum(ad.mul(y, y))), -self.spec.radius)

    def g_all(self, points) -> ad.Node:
        """All per-primitive fields at once, as an (N, M) column-per-primitive matrix."""
        points = points if isinstance(points, ad.Node) else ad.constant(points)
        n = points.shape[0]
        m = self.spec.primitives
        stacked = ad.concat_rows([points] * m)
        idx = np.repeat(np.arange(m, dtype=np.intp), n)
        g = self.implicit_g(stacked, idx)
        return ad.concat_cols(
            [ad.as_col(ad.slice_rows(g, k * n, (k + 1) * n)) for k in range(m)]
        )

    def union_G(self, points) -> tuple[ad.Node, np.ndarray]:
        """Min-union field and the (first-min) primitive index per point."""
        if self.spec.primitives < 1:
            raise ValueError("union field needs at least one primitive")
        return ad.min_cols(self.g_all(points))

    def union_G_values(self, points: np.ndarray, chunk: int = 20000) -> np.ndarray:
        """Value-only union field, chunked for large point sets."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(points))
        with ad.pause():
            for lo in range(0, len(points), chunk):
                out[lo : lo + chunk] = self.union_G(points[lo : lo + chunk])[0].value
        return out

    def g_all_values(self, points: np.ndarray, chunk: int = 20000) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty((len(points), self.spec.primitives))
        with ad.pause():
            for lo in range(0, len(points), chunk):
                out[lo : lo + chunk] = self.g_all(points[lo : lo + chunk]).value
        return out

    # -- surfaces -----------------------------------------------------------

    def surface_points(self, prim, sphere_points: np.ndarray) -> ad.Node:
        """Forward-map samples that must lie on the radius-r latent sphere."""
        sphere_points = np.asarray(sphere_points, dtype=np.float64).reshape(-1, 3)
        if len(sphere_points):
            err = np.abs(np.linalg.norm(sphere_points, axis=1) - self.spec.radius)
            if err.max() > 1e-12:
                raise ValueError(
                    f"sphere samples off the radius-{self.spec.radius} sphere "
                    f"by up to {err.max():.3g}"
                )
        return self.phi_forward(sphere_points, prim)

    def all_surface_points(self, sphere_points: np.ndarray) -> tuple[ad.Node, np.ndarray]:
        """Per-primitive surface points in one forward pass.

        ``sphere_points`` has shape (M, K, 3); returns the (M*K, 3) points
        node and the source primitive index of each row.
        """
        m, k, _ = sphere_points.shape
        if m != self.spec.primitives:
            raise ValueError("sphere sample blocks must match primitive count")
        flat = sphere_points.reshape(m * k, 3)
        err = np.abs(np.linalg.norm(flat, axis=1) - self.spec.radius)
        if len(flat) and err.max() > 1e-12:
            raise ValueError("sphere samples off the latent sphere")
        idx = np.repeat(np.arange(m, dtype=np.intp), k)
        return self.phi_forward(flat, idx), idx

    def union_surface(
        self, points: ad.Node, labels: np.ndarray
    ) -> tuple[ad.Node, np.ndarray]:
        """Discard surface points interior to another primitive.

        Keeps x with G(x) >= -eps; the slack absorbs round-off of g on the
        point's own primitive.  The filter mask is value-only; gradients
        flow through the retained rows.
        """
        G = self.union_G_values(points.value)
        keep = np.flatnonzero(G >= -SURFACE_EPS)
        return ad.gather_rows(points, keep), labels[keep]

    def grad_union_G(self, points: np.ndarray, h: float = GRAD_FD_STEP) -> ad.Node:
        """Spatial gradient of the union field by central differences.

        All six shifted field evaluations stay on the tape, so the result
        is still differentiable with respect to the network parameters.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = len(points)
        shifted = []
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            shifted.append(points + e)
            shifted.append(points - e)
        G, _ = self.union_G(np.concatenate(shifted, axis=0))
        cols = []
        for k in range(3):
            gp = ad.slice_rows(G, 2 * k * n, (2 * k + 1) * n)
            gm = ad.slice_rows(G, (2 * k + 1) * n, (2 * k + 2) * n)
            cols.append(ad.as_col(ad.scale(ad.sub(gp, gm), 1.0 / (2.0 * h))))
        return ad.concat_cols(cols)

    # -- meshes ---------------------------------------------------------------

    def primitive_mesh(self, prim: int, tess: SphereTessellation) -> TriMesh:
        """Deform the sphere tessellation; the face list is copied unchanged."""
        if abs(tess.radius - self.spec.radius) > 1e-12:
            raise ValueError(
                f"tessellation radius {tess.radius} != sphere radius {self.spec.radius}"
            )
        with ad.pause():
            verts = self.phi_forward(tess.mesh.vertices, prim).value
        return TriMesh(verts, tess.mesh.faces.copy())
