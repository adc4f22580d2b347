"""SDS / ISM / ESM distillation gradients, the optimization loop, and the
accumulated-error bookkeeping that compares ISM with ESM."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from .datasets import to_latent
from .denoiser import NULL, Condition, DenoiserModel, eps_fn, predict
from .diffcore import ContractError, NumericError, ParamStore
from .inversion import CoupledState, coupled_invert, interval_step, naive_invert
from .lora import LoraAdapter, lora_eps_fn, lora_train_step
from .schedule import NoiseSchedule, q_sample
from .splat import PARAM_FIELDS, CameraPose, SplatScene, render, render_vjp

log = logging.getLogger(__name__)

LOSSES = ("sds", "ism", "esm")
OMEGA_MODES = ("constant", "one_minus_alpha_bar")


@dataclass
class DistillConfig:
    loss: str = "esm"
    rho: float = 0.93
    delta_S: int = 200
    delta_T: int = 50
    iterations: int = 5000
    omega_mode: str = "constant"
    omega_scale: float = 1.0
    guidance: float = 1.0
    t_min: int = 1
    t_max: int = 1000
    lr: float = 1e-2
    lr_centers: float = 0.1
    lora_lr: float = 1e-3
    lora_rank: int = 4
    lora_batch: int = 1
    target_label: int = 0
    pose_angle_range: float = 2 * math.pi
    pose_translation: float = 0.0
    pose_zoom_jitter: float = 0.0
    seed: int = 0

    def validate(self, T: int = 1000) -> "DistillConfig":
        if self.loss not in LOSSES:
            raise ContractError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.omega_mode not in OMEGA_MODES:
            raise ContractError(f"omega_mode must be one of {OMEGA_MODES}")
        if not 0.0 < self.rho <= 1.0:
            raise ContractError("rho must lie in (0, 1]")
        if not 1 <= self.t_min < self.t_max <= T:
            raise ContractError(f"need 1 <= t_min < t_max <= {T}")
        if self.delta_T < 1 or self.delta_S < 1:
            raise ContractError("delta_T and delta_S must be >= 1")
        if self.iterations < 0:
            raise ContractError("iterations must be >= 0")
        return self


@dataclass
class ErrorReport:
    eps_ism: float
    eps_esm: float
    term1: float
    term2: float
    eta_norm: float
    delta_norm: float

    @classmethod
    def from_predictions(cls, eps_cond_t, eps_int_t, eps_base_s) -> "ErrorReport":
        """Squared-norm decomposition through the intermediate prediction ``eps_int_t``."""
        delta = eps_cond_t - eps_base_s
        term1 = float(np.sum((eps_cond_t - eps_int_t).astype(np.float64) ** 2))
        term2 = float(np.sum((eps_int_t - eps_base_s).astype(np.float64) ** 2))
        return cls(eps_ism=float(np.sum(delta.astype(np.float64) ** 2)), eps_esm=term1 + term2,
                   term1=term1, term2=term2, eta_norm=math.sqrt(term2),
                   delta_norm=float(np.linalg.norm(delta.astype(np.float64))))


@dataclass
class GradientResult:
    grads: dict[str, np.ndarray]
    cotangent: np.ndarray       # w.r.t. the latent x0
    report: ErrorReport
    t: int
    s: int
    image: np.ndarray
    latents: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def grad_norm(self) -> float:
        return float(math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in self.grads.values())))


def omega(t: int, sched: NoiseSchedule, cfg: DistillConfig) -> float:
    w = 1.0 if cfg.omega_mode == "constant" else float(1.0 - sched.alpha_bar[t])
    return cfg.omega_scale * w


def sample_timestep(cfg: DistillConfig, rng: np.random.Generator) -> int:
    return int(rng.integers(cfg.t_min, cfg.t_max + 1))


def interval_start(t: int, cfg: DistillConfig) -> int:
    return max(t - cfg.delta_T, 0)


def _cond(cfg: DistillConfig) -> Condition:
    return Condition.label(cfg.target_label)


# -- latent-space cotangents ---------------------------------------------------

def sds_cotangent(x0, t, noise, model, sched, cfg):
    x_t = q_sample(x0, t, noise, sched)
    e_cond = predict(model, x_t, t, _cond(cfg), cfg.guidance)
    e_null = predict(model, x_t, t, NULL)
    report = ErrorReport.from_predictions(e_cond, e_null, noise)
    return omega(t, sched, cfg) * (e_cond - noise), report, {"x_t": x_t}


def ism_cotangent(x0, t, model, sched, cfg):
    s = interval_start(t, cfg)
    base = eps_fn(model, NULL)
    x_s, _ = naive_invert(x0, s, cfg.delta_S, base, sched)
    x_t = interval_step(x_s, s, t, base, sched)
    e_cond = predict(model, x_t, t, _cond(cfg), cfg.guidance)
    e_s = predict(model, x_s, max(s, 1), NULL)
    e_int = predict(model, x_t, t, NULL)
    report = ErrorReport.from_predictions(e_cond, e_int, e_s)
    return omega(t, sched, cfg) * (e_cond - e_s), report, {"x_s": x_s, "x_t": x_t}


def esm_cotangent(x0, t, model, adapter, sched, cfg):
    s = interval_start(t, cfg)
    x_s, _ = naive_invert(x0, s, cfg.delta_S, eps_fn(model, NULL), sched)
    state = CoupledState.from_latent(x_s, s)
    out, x_int, x_aux_int = coupled_invert(state, t, lora_eps_fn(model, adapter), cfg.rho, sched)
    x_t = out.x
    e_cond = predict(model, x_t, t, _cond(cfg), cfg.guidance)
    e_s = predict(model, x_s, max(s, 1), NULL)
    e_int = predict(model, x_int, t, NULL)
    report = ErrorReport.from_predictions(e_cond, e_int, e_s)
    latents = {"x_s": x_s, "x_t": x_t, "x_int": x_int, "x_aux_int": x_aux_int}
    return omega(t, sched, cfg) * (e_cond - e_s), report, latents


# -- parameter-space gradients -------------------------------------------------

def _to_scene_grads(scene, cache, cot_latent):
    # image -> latent is x = 2 img - 1
    return render_vjp(scene, cache, 2.0 * cot_latent.astype(cache.raw.dtype, copy=False))


def _render_latent(scene, pose, model, rendered=None):
    image, cache = render(scene, pose, model.side) if rendered is None else rendered
    return image, cache, to_latent(image).astype(model.dtype)


def sds_gradient(scene, pose, model, sched, cfg, rng, t: int | None = None) -> GradientResult:
    image, cache, x0 = _render_latent(scene, pose, model)
    t = sample_timestep(cfg, rng) if t is None else t
    noise = rng.standard_normal(x0.shape).astype(model.dtype)
    cot, report, lat = sds_cotangent(x0, t, noise, model, sched, cfg)
    lat["noise"] = noise
    return GradientResult(_to_scene_grads(scene, cache, cot), cot, report, t, 0, image, lat)


def ism_gradient(scene, pose, model, sched, cfg, rng, t: int | None = None) -> GradientResult:
    image, cache, x0 = _render_latent(scene, pose, model)
    t = sample_timestep(cfg, rng) if t is None else t
    cot, report, lat = ism_cotangent(x0, t, model, sched, cfg)
    return GradientResult(_to_scene_grads(scene, cache, cot), cot, report, t, interval_start(t, cfg), image, lat)


def esm_gradient(scene, pose, model, adapter, sched, cfg, rng, t: int | None = None,
                 rendered=None) -> GradientResult:
    """``rendered`` lets the caller reuse an (image, cache) pair for this pose."""
    if adapter is None:
        raise ContractError("ESM needs a LoRA adapter")
    image, cache, x0 = _render_latent(scene, pose, model, rendered)
    t = sample_timestep(cfg, rng) if t is None else t
    cot, report, lat = esm_cotangent(x0, t, model, adapter, sched, cfg)
    return GradientResult(_to_scene_grads(scene, cache, cot), cot, report, t, interval_start(t, cfg), image, lat)


# -- scalar comparison ---------------------------------------------------------

@dataclass(frozen=True)
class IdentityCheck:
    eps_ism: float
    eps_esm: float
    identity_residual: float
    assumption_holds: bool


def error_identity_check(delta_norm: float, eta: float) -> IdentityCheck:
    """Collinear scalar model of the ISM-vs-ESM comparison.

    With the intermediate prediction offset by ``eta`` along the difference of
    norm ``delta_norm``: eps_ism = d^2, eps_esm = (d - eta)^2 + eta^2, and the
    identity eps_esm = eps_ism + 2 eta (eta - d) must hold exactly.
    """
    d, e = float(delta_norm), float(eta)
    if not d > 0:
        raise ContractError("delta_norm must be positive")
    eps_ism = d * d
    eps_esm = (d - e) ** 2 + e * e
    residual = eps_esm - (eps_ism + 2.0 * e * (e - d))
    return IdentityCheck(eps_ism, eps_esm, residual, 0.0 < e < d)


# -- optimization loop -----------------------------------------------------------

LOG_COLUMNS = ("iteration", "t", "s", "loss_variant", "eps_ism", "eps_esm", "term1", "term2",
               "eta_norm", "delta_norm", "grad_norm", "lora_loss")


def make_pose_sampler(cfg: DistillConfig) -> Callable[[np.random.Generator], CameraPose]:
    def sample(rng: np.random.Generator) -> CameraPose:
        angle = float(rng.uniform(0.0, cfg.pose_angle_range)) if cfg.pose_angle_range > 0 else 0.0
        tr = (tuple(float(v) for v in rng.uniform(-cfg.pose_translation, cfg.pose_translation, 2))
              if cfg.pose_translation > 0 else (0.0, 0.0))
        zoom = float(np.exp(rng.uniform(-cfg.pose_zoom_jitter, cfg.pose_zoom_jitter))) if cfg.pose_zoom_jitter > 0 else 1.0
        return CameraPose(angle, tr, zoom)
    return sample


def scene_store(scene: SplatScene) -> ParamStore:
    store = ParamStore()
    for name in PARAM_FIELDS:
        store.add(name, getattr(scene, name))
    return store


def store_scene(store: ParamStore) -> SplatScene:
    return SplatScene(**{name: store[name] for name in PARAM_FIELDS})


@dataclass
class DistillState:
    """Everything a run needs to continue: scene + Adam moments, adapter, RNG, counter."""

    store: ParamStore
    adapter: LoraAdapter | None
    rng: np.random.Generator
    iteration: int = 0

    @property
    def scene(self) -> SplatScene:
        return store_scene(self.store)

    @classmethod
    def fresh(cls, scene: SplatScene, cfg: DistillConfig, model: DenoiserModel,
              adapter: LoraAdapter | None = None) -> "DistillState":
        rng = np.random.default_rng(cfg.seed)
        if cfg.loss == "esm" and adapter is None:
            from .lora import init_adapter
            adapter = init_adapter(model, np.random.default_rng([cfg.seed, 1]), rank=cfg.lora_rank)
        return cls(scene_store(scene.copy()), adapter, rng, 0)


def learning_rates(cfg: DistillConfig) -> dict[str, float]:
    lr = {name: cfg.lr for name in PARAM_FIELDS}
    lr["centers"] = cfg.lr_centers
    return lr


def distill_loop(state: DistillState, model: DenoiserModel, sched: NoiseSchedule, cfg: DistillConfig,
                 pose_sampler=None, on_iteration=None) -> tuple[DistillState, list[dict]]:
    """Run iterations ``state.iteration .. cfg.iterations - 1`` in place; returns (state, log rows)."""
    cfg.validate(sched.T)
    pose_sampler = pose_sampler or make_pose_sampler(cfg)
    lrs = learning_rates(cfg)
    rows: list[dict] = []
    while state.iteration < cfg.iterations:
        it = state.iteration
        rng = state.rng
        scene = state.scene
        pose = pose_sampler(rng)
        lora_loss = float("nan")
        if cfg.loss == "esm":
            rendered = render(scene, pose, model.side)
            _, lora_loss = lora_train_step(model, state.adapter, to_latent(rendered[0]), sched, cfg.lora_lr,
                                           rng, cfg.lora_batch)
            res = esm_gradient(scene, pose, model, state.adapter, sched, cfg, rng, rendered=rendered)
        elif cfg.loss == "ism":
            res = ism_gradient(scene, pose, model, sched, cfg, rng)
        else:
            res = sds_gradient(scene, pose, model, sched, cfg, rng)
        gnorm = res.grad_norm
        if not math.isfinite(gnorm):
            raise NumericError(f"non-finite distillation gradient at iteration {it} (seed={cfg.seed})")
        state.store.set_grads(res.grads)
        dc.adam_step(state.store, lrs)
        row = {"iteration": it, "t": res.t, "s": res.s, "loss_variant": cfg.loss, **asdict(res.report),
               "grad_norm": gnorm, "lora_loss": lora_loss}
        rows.append(row)
        state.iteration += 1
        if on_iteration is not None:
            on_iteration(state, row)
    return state, rows
