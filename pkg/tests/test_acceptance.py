"""Acceptance gate: eight end-to-end criteria, one test (pass/fail line) each.

Run with `pytest -v tests/test_acceptance.py`; expect roughly 20-30 minutes
on one CPU core because criteria 5-8 perform real fits.
"""

import json
import time

import numpy as np
import pytest

from homeofit import autodiff as ad
from homeofit import fixtures, geometry, metrics, trainer
from homeofit.homeo import ConditionalHomeomorphism, HomeoSpec
from homeofit.losses import LossHyper, LossWeights, loss_total
from homeofit.trainer import FitConfig, FitState, desk_config, draw_batch

pytestmark = pytest.mark.acceptance

# Criterion 5/7 locked settings: desk widths, 1000 iterations, seed 0.
# Chamfer is evaluated with 100k samples per side because the estimator's
# floor for identical surfaces is ~0.016 at the 10k operational default
# and ~0.005 at 100k; the 0.01 threshold is only meaningful above the floor.
SPHERE_CONFIG = dict(primitives=1, iterations=1000, seed=0)
DUMBBELL_ITERS = 1200
SEED_BATTERY_ITERS = 400
EVAL_KW = dict(n_iou=100000, n_chamfer=100000, seed=0)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def sphere_target():
    mesh, _ = geometry.normalize_mesh(fixtures.sphere())
    return mesh


@pytest.fixture(scope="module")
def sphere_pool(sphere_target):
    return geometry.build_occupancy_set(
        sphere_target, 100000, np.random.default_rng(0)
    )


@pytest.fixture(scope="module")
def sphere_runs(sphere_target, sphere_pool, work):
    """Two independent full runs of the criterion-5 configuration."""
    runs = []
    for tag in ("a", "b"):
        cfg = desk_config(**SPHERE_CONFIG)
        t0 = time.monotonic()
        result = trainer.fit(sphere_target, cfg, sphere_pool, out_dir=work / f"sphere_{tag}")
        elapsed = time.monotonic() - t0
        report = metrics.evaluate(result.model, sphere_target, "sphere", **EVAL_KW)
        runs.append((result, report, elapsed))
    return runs


@pytest.fixture(scope="module")
def dumbbell_target():
    mesh, _ = geometry.normalize_mesh(fixtures.dumbbell())
    return mesh


@pytest.fixture(scope="module")
def dumbbell_pool(dumbbell_target):
    return geometry.build_occupancy_set(
        dumbbell_target, 100000, np.random.default_rng(0)
    )


def fit_dumbbell(target, pool, **overrides):
    cfg = desk_config(
        primitives=2, iterations=DUMBBELL_ITERS, seed=0, **overrides
    )
    result = trainer.fit(target, cfg, pool)
    return metrics.evaluate(result.model, target, "dumbbell", **EVAL_KW)


def test_criterion_1_inverse_consistency():
    start = time.monotonic()
    worst = 0.0
    for draw in range(20):
        rng = np.random.default_rng(draw)
        spec = HomeoSpec(layers=4, hidden=64, embed_dim=64, p_out=64, primitives=1)
        model = ConditionalHomeomorphism.create(spec, rng)
        flat = model.store.flat()
        flat += rng.normal(0, 0.05, flat.shape)
        model.store.load_flat(flat)
        pts = rng.uniform(-0.5, 0.5, (1000, 3))
        with ad.pause():
            back = model.phi_inverse(model.phi_forward(pts, 0).value, 0).value
        worst = max(worst, float(np.abs(back - pts).max()))
    elapsed = time.monotonic() - start
    assert worst < 1e-9, f"round-trip error {worst:.3g}"
    assert elapsed < 5.0, f"took {elapsed:.1f}s"


def test_criterion_2_identity_at_init():
    spec = HomeoSpec()  # full-scale widths, zero-initialized s/t final layers
    model = ConditionalHomeomorphism.create(spec, np.random.default_rng(0))
    pts = np.random.default_rng(1).uniform(-0.5, 0.5, (500, 3))
    with ad.pause():
        out = model.phi_forward(pts, 0).value
    assert np.array_equal(out, pts), "phi_forward is not the exact identity"
    tess = geometry.uv_sphere(32, 32, spec.radius)
    mesh = model.primitive_mesh(0, tess)
    assert np.array_equal(mesh.vertices, tess.mesh.vertices), "vertices differ"
    assert np.array_equal(mesh.faces, tess.mesh.faces), "faces differ"


def test_criterion_3_gradient_suite():
    start = time.monotonic()
    rng = np.random.default_rng(0)
    cfg = FitConfig(
        primitives=2, layers=2, hidden=8, embed_dim=8, p_out=8,
        surface_samples=16, occupancy_samples=16, sphere_samples=8,
        normal_samples=8, k_cover=4, pool_size=400, iterations=1,
    )
    mesh, _ = geometry.normalize_mesh(geometry.uv_sphere(12, 12, 0.35).mesh)
    pool = geometry.build_occupancy_set(mesh, 400, rng)
    state = FitState.initialize(cfg)
    flat0 = state.model.store.flat()
    flat0 += np.random.default_rng(1).normal(0, 0.05, flat0.shape)
    state.model.store.load_flat(flat0)
    batch = draw_batch(mesh, pool, cfg, rng)
    weights, hyper = cfg.loss_weights(), cfg.loss_hyper()
    with ad.Tape() as tape:
        total, _ = loss_total(state.model, batch, weights, hyper)
        grads = tape.backward(total, state.model.store)
    analytic = np.concatenate(
        [grads[n].ravel() for n in state.model.store.names()]
    )
    def fd_at(i, h):
        e = np.zeros_like(flat0)
        e[i] = h
        state.model.store.load_flat(flat0 + e)
        _, up = loss_total(state.model, batch, weights, hyper)
        state.model.store.load_flat(flat0 - e)
        _, dn = loss_total(state.model, batch, weights, hyper)
        return (up["total"] - dn["total"]) / (2 * h)

    # The objective is piecewise smooth (relu, min, nearest-k selection,
    # surface retention): skip coordinates where step-halving disagrees,
    # i.e. the probe crossed a piece boundary. Error is measured as
    # |analytic - fd| / max(1, |fd|), which keeps finite-difference
    # round-off noise (~1e-10 on near-zero gradients) from dominating.
    worst = 0.0
    checked = 0
    idx = np.random.default_rng(2).choice(flat0.size, 200, replace=False)
    for i in idx:
        fd = fd_at(i, 1e-6)
        fd_half = fd_at(i, 5e-7)
        if abs(fd - fd_half) > 1e-6 * max(1.0, abs(fd)):
            continue
        checked += 1
        worst = max(worst, abs(analytic[i] - fd) / max(1.0, abs(fd)))
    elapsed = time.monotonic() - start
    assert checked >= 100, f"only {checked} smooth coordinates out of 200"
    assert worst < 1e-4, f"max relative gradient error {worst:.3g} over {checked} coords"
    assert elapsed < 60.0, f"took {elapsed:.1f}s"


def test_criterion_4_estimator_oracles():
    rng = np.random.default_rng(0)

    # IoU of two cubes offset by half a side: intersection/union = 1/3 exactly
    def box(lo, hi):
        lo, hi = np.asarray(lo), np.asarray(hi)
        return lambda p: np.all((p >= lo) & (p <= hi), axis=1)

    iou = metrics.monte_carlo_iou(
        box([-0.3, -0.2, -0.2], [0.1, 0.2, 0.2]),
        box([-0.1, -0.2, -0.2], [0.3, 0.2, 0.2]),
        100000, rng,
    )
    assert abs(iou - 1 / 3) <= 0.01, f"cube IoU {iou:.4f}"

    # occupancy pool inside-fraction vs the analytic sphere volume fraction
    mesh, _ = geometry.normalize_mesh(fixtures.sphere())  # radius 0.45 normalized
    pool = geometry.build_occupancy_set(mesh, 100000, np.random.default_rng(0))
    analytic = 4 * np.pi * 0.45**3 / 3  # cube volume is 1
    frac = float(pool.labels.mean())
    assert abs(frac - analytic) <= 0.01 * analytic, (
        f"inside fraction {frac:.4f} vs analytic {analytic:.4f}"
    )

    # chamfer of concentric spheres: 0.1 per direction, 0.2 total
    a = geometry.sample_sphere(20000, 0.3, rng)
    b = geometry.sample_sphere(20000, 0.4, rng)
    cham = metrics.chamfer_l1(a, b)
    assert abs(cham - 0.2) <= 0.05 * 0.2, f"chamfer {cham:.4f}"


def test_criterion_5_sphere_recovery(sphere_runs):
    _, report, elapsed = sphere_runs[0]
    assert report.iou >= 0.95, f"IoU {report.iou:.4f}"
    assert report.chamfer_l1 <= 0.01, f"chamfer {report.chamfer_l1:.4f}"
    assert elapsed <= 600.0, f"fit took {elapsed:.0f}s"


def test_criterion_6_dumbbell_decomposition(dumbbell_target, dumbbell_pool):
    start = time.monotonic()
    default = fit_dumbbell(dumbbell_target, dumbbell_pool)
    no_overlap = fit_dumbbell(dumbbell_target, dumbbell_pool, w_overlap=0.0)
    elapsed = time.monotonic() - start
    assert default.iou >= 0.85, f"IoU {default.iou:.4f}"
    assert default.multi_containment <= 0.05, (
        f"multi-containment {default.multi_containment:.4f}"
    )
    assert no_overlap.multi_containment > default.multi_containment, (
        f"removing the overlap penalty did not increase multi-containment "
        f"({default.multi_containment:.4f} -> {no_overlap.multi_containment:.4f})"
    )
    assert elapsed <= 1200.0, f"took {elapsed:.0f}s"


def test_criterion_7_determinism(sphere_runs, work):
    (res_a, rep_a, _), (res_b, rep_b, _) = sphere_runs
    for fname in ("manifest.json", "params.bin", "moments.manifest.json", "moments.bin"):
        fa = (work / "sphere_a" / "checkpoint" / fname).read_bytes()
        fb = (work / "sphere_b" / "checkpoint" / fname).read_bytes()
        assert fa == fb, f"checkpoint file {fname} differs between runs"
    assert json.dumps(rep_a.to_dict(), sort_keys=True) == json.dumps(
        rep_b.to_dict(), sort_keys=True
    ), "evaluation reports differ between identical runs"


def test_criterion_8_coverage_ablation(dumbbell_target, dumbbell_pool, capsys):
    # default config: across 5 seeds, no primitive's retained-face area may
    # fall below 1% of the other's (shortened runs; collapse happens early)
    ratios = {}
    for seed in range(5):
        cfg = desk_config(primitives=2, iterations=SEED_BATTERY_ITERS, seed=seed)
        result = trainer.fit(dumbbell_target, cfg, dumbbell_pool)
        areas = []
        tess = geometry.uv_sphere(48, 48, result.model.spec.radius)
        for prim in range(2):
            mesh = result.model.primitive_mesh(prim, tess)
            keep = metrics.retained_face_mask(result.model, mesh, prim)
            areas.append(mesh.face_areas()[keep].sum())
        ratios[seed] = min(areas) / max(areas)
    assert all(r >= 0.01 for r in ratios.values()), (
        f"default config produced a degenerate primitive: {ratios}"
    )

    # adversarial direction: w_cover = 0 with a non-identity init (random s/t
    # final layers, one primitive swallowed at start) may collapse a primitive
    cfg = desk_config(primitives=2, iterations=SEED_BATTERY_ITERS, seed=0, w_cover=0.0)
    state = FitState.initialize(cfg)
    adv = np.random.default_rng(1234)
    for layer in range(cfg.layers):
        for net in ("s", "t"):
            name = f"layer{layer}.{net}.2.W"
            state.model.store.set_value(
                name, adv.normal(0, 0.5, state.model.store[name].shape)
            )
    emb = state.model.store["embeddings"].copy()
    emb[0] = 1.0
    emb[1] = -1.0
    state.model.store.set_value("embeddings", emb)
    result = trainer.fit(dumbbell_target, cfg, dumbbell_pool, state=state)
    areas = []
    tess = geometry.uv_sphere(48, 48, result.model.spec.radius)
    for prim in range(2):
        mesh = result.model.primitive_mesh(prim, tess)
        keep = metrics.retained_face_mask(result.model, mesh, prim)
        areas.append(mesh.face_areas()[keep].sum())
    adv_ratio = min(areas) / max(areas) if max(areas) > 0 else 0.0
    # "may produce" in principle; with this fixed seed the collapse is
    # deterministic, so pin the observed failure mode
    assert adv_ratio < 0.01, (
        f"adversarial w_cover=0 run did not collapse a primitive (ratio {adv_ratio:.4f})"
    )
    with capsys.disabled():
        print(
            f"\n[criterion 8] default-seed ratios: "
            f"{ {k: round(v, 4) for k, v in ratios.items()} }; "
            f"adversarial w_cover=0 ratio: {adv_ratio:.4f}"
        )
