"""Auto-decoder fitting: Adam over network parameters and shape embeddings.

One run fits M primitives to a single normalized watertight mesh.  Fresh
surface/occupancy/sphere samples are drawn each step from one seeded RNG,
so a run is reproducible bit-exactly, including across checkpoint resumes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import serialization
from .geometry import (
    OccupancyPool,
    SurfaceSamples,
    TriMesh,
    build_occupancy_set,
    sample_sphere,
    sample_surface,
)
from .homeo import ConditionalHomeomorphism, HomeoSpec
from .losses import LossHyper, LossWeights, TrainingBatch, loss_total

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class FitDivergence(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class CheckpointError(ValueError):
    pass


@dataclass
class FitConfig:
    primitives: int = 1
    iterations: int = 2000
    learning_rate: float = 1e-4
    surface_samples: int = 2000
    occupancy_samples: int = 5000
    sphere_samples: int = 200
    normal_samples: int = 0        # 0: the normal loss uses the full surface batch
    grad_accum: int = 1
    seed: int = 0
    pool_size: int = 100000
    checkpoint_every: int = 0      # 0: checkpoint only at the end
    # architecture
    layers: int = 4
    hidden: int = 256
    embed_dim: int = 512
    p_out: int = 128
    radius: float = 0.25
    # loss weights
    w_rec: float = 1.0
    w_occ: float = 0.1
    w_norm: float = 0.01
    w_overlap: float = 0.1
    w_cover: float = 0.01
    # loss hyperparameters
    tau: float = 4e-3
    lam: float = 1.95
    k_cover: int = 10

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("config field 'iterations' must be >= 0")
        for name in ("primitives", "surface_samples",
                     "occupancy_samples", "sphere_samples", "grad_accum",
                     "pool_size", "layers", "hidden", "embed_dim", "p_out",
                     "k_cover"):
            if getattr(self, name) < 1:
                raise ValueError(f"config field '{name}' must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")

    def homeo_spec(self) -> HomeoSpec:
        return HomeoSpec(
            layers=self.layers,
            hidden=self.hidden,
            embed_dim=self.embed_dim,
            p_out=self.p_out,
            radius=self.radius,
            primitives=self.primitives,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_rec, self.w_occ, self.w_norm, self.w_overlap, self.w_cover)

    def loss_hyper(self) -> LossHyper:
        return LossHyper(self.tau, self.lam, self.k_cover)


def desk_config(**overrides) -> FitConfig:
    """Minutes-scale defaults: same structure, smaller widths and batches."""
    base = dict(
        hidden=64,
        embed_dim=64,
        p_out=64,
        surface_samples=512,
        occupancy_samples=1024,
        sphere_samples=128,
        normal_samples=128,
        learning_rate=2e-3,
        pool_size=100000,
        iterations=1000,
    )
    base.update(overrides)
    return FitConfig(**base)


@dataclass
class FitState:
    model: ConditionalHomeomorphism
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int
    rng: np.random.Generator
    last_breakdown: dict[str, float] = field(default_factory=dict)

    @classmethod
    def initialize(cls, config: FitConfig) -> "FitState":
        rng = np.random.default_rng(config.seed)
        model = ConditionalHomeomorphism.create(config.homeo_spec(), rng)
        m = {k: np.zeros_like(v) for k, v in model.store.items()}
        v = {k: np.zeros_like(a) for k, a in model.store.items()}
        return cls(model, m, v, 0, rng)

    def adam_step(self, grads: dict[str, np.ndarray], lr: float):
        """Standard Adam with bias correction and no weight decay."""
        store = self.model.store
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FitDivergence(f"non-finite gradient for parameter '{name}'")
        self.step += 1
        t = self.step
        for name in store.names():
            g = grads[name].reshape(store[name].shape)
            m = self.adam_m[name]
            v = self.adam_v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            m_hat = m / (1.0 - ADAM_BETA1**t)
            v_hat = v / (1.0 - ADAM_BETA2**t)
            store.set_value(name, store[name] - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS))


def draw_batch(mesh: TriMesh, pool: OccupancyPool, config: FitConfig, rng) -> TrainingBatch:
    """Fresh samples for one micro-batch; draw order is fixed for determinism."""
    surface = sample_surface(mesh, config.surface_samples, rng)
    occupancy = pool.draw(config.occupancy_samples, rng)
    m, k = config.primitives, config.sphere_samples
    sphere = sample_sphere(m * k, config.radius, rng).reshape(m, k, 3)
    normal_surface = None
    if config.normal_samples and config.normal_samples < config.surface_samples:
        normal_surface = SurfaceSamples(
            surface.points[: config.normal_samples],
            surface.normals[: config.normal_samples],
        )
    return TrainingBatch(surface, occupancy, sphere, normal_surface)


@dataclass
class FitResult:
    model: ConditionalHomeomorphism
    state: FitState
    history: list[dict]
    checkpoint_dir: Path | None


def fit(
    mesh: TriMesh,
    config: FitConfig,
    pool: OccupancyPool | None = None,
    out_dir=None,
    state: FitState | None = None,
) -> FitResult:
    """Fit M primitives to a normalized watertight mesh.

    Pass a loaded FitState to resume; the continuation is bit-identical to
    an uninterrupted run because the RNG state rides along in checkpoints.
    """
    if pool is None:
        pool = build_occupancy_set(mesh, config.pool_size, np.random.default_rng(config.seed))
    if state is None:
        state = FitState.initialize(config)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = (out_dir / "fit_log.jsonl").open("a")
    weights = config.loss_weights()
    hyper = config.loss_hyper()

    history: list[dict] = []
    checkpoint_dir = out_dir / "checkpoint" if out_dir is not None else None
    try:
        while state.step < config.iterations:
            accum: dict[str, np.ndarray] | None = None
            breakdown = None
            try:
                for _ in range(config.grad_accum):
                    batch = draw_batch(mesh, pool, config, state.rng)
                    with ad.Tape() as tape:
                        total, breakdown = loss_total(state.model, batch, weights, hyper)
                        grads = tape.backward(total, state.model.store)
                    if accum is None:
                        accum = grads
                    else:
                        for k in accum:
                            accum[k] = accum[k] + grads[k]
            except ad.NumericError as e:
                raise FitDivergence(f"step {state.step + 1}: {e}") from e
            if config.grad_accum > 1:
                for k in accum:
                    accum[k] = accum[k] / config.grad_accum
            state.adam_step(accum, config.learning_rate)
            state.last_breakdown = breakdown
            record = {"step": state.step, **breakdown}
            history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
            if (
                checkpoint_dir is not None
                and config.checkpoint_every
                and state.step % config.checkpoint_every == 0
            ):
                save_checkpoint(checkpoint_dir, state, config)
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir, state, config)
    finally:
        if log_file is not None:
            log_file.close()
    return FitResult(state.model, state, history, checkpoint_dir)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, state: FitState, config: FitConfig, extra: dict | None = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "step": state.step,
        "schedule": state.model.schedule,
        "radius": state.model.spec.radius,
        "spec": asdict(state.model.spec),
        "config": asdict(config),
        "rng_state": state.rng.bit_generator.state,
        "last_breakdown": state.last_breakdown,
    }
    if extra:
        meta.update(extra)
    serialization.save_tensors(
        path / "manifest.json",
        path / "params.bin",
        dict(state.model.store.items()),
        extra=meta,
    )
    moments = {}
    for name in state.model.store.names():
        moments[f"m:{name}"] = state.adam_m[name]
        moments[f"v:{name}"] = state.adam_v[name]
    serialization.save_tensors(
        path / "moments.manifest.json", path / "moments.bin", moments, extra={"step": state.step}
    )


def load_checkpoint(path, config: FitConfig | None = None) -> tuple[FitState, FitConfig]:
    path = Path(path)
    try:
        tensors, meta = serialization.load_tensors(path / "manifest.json")
        moment_tensors, _ = serialization.load_tensors(path / "moments.manifest.json")
    except (OSError, serialization.SerializationError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    saved_config = FitConfig(**meta["config"])
    if config is not None:
        for fld in ("primitives", "layers", "hidden", "embed_dim", "p_out", "radius"):
            if getattr(config, fld) != getattr(saved_config, fld):
                raise CheckpointError(
                    f"checkpoint {fld}={getattr(saved_config, fld)} incompatible "
                    f"with configured {fld}={getattr(config, fld)}"
                )
    spec = HomeoSpec(**meta["spec"])
    store = ad.ParameterStore()
    for name, arr in tensors.items():
        store.create(name, arr)
    model = ConditionalHomeomorphism(spec, list(meta["schedule"]), store)
    adam_m, adam_v = {}, {}
    for name in store.names():
        try:
            adam_m[name] = moment_tensors[f"m:{name}"]
            adam_v[name] = moment_tensors[f"v:{name}"]
        except KeyError as e:
            raise CheckpointError(f"moments blob missing entry for '{name}'") from e
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    state = FitState(
        model, adam_m, adam_v, int(meta["step"]), rng,
        dict(meta.get("last_breakdown") or {}),
    )
    return state, saved_config
